import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from faceattend.errors import BoundsError, DimensionError, GeometryError, ImageFormatError
from faceattend.imagecore import (GrayImage, Rect, crop_resize, equalize, flatten, integral, load_gray, rect_sum,
                                  save_gray, to_gray, unflatten)


def brute_sum(a, r):
    total = 0
    for y in range(r.y, r.y2):
        for x in range(r.x, r.x2):
            total += int(a[y, x])
    return total


def random_rect(rng, w, h):
    x0, x1 = sorted(rng.integers(0, w + 1, 2))
    y0, y1 = sorted(rng.integers(0, h + 1, 2))
    return Rect(int(x0), int(y0), max(1, int(x1 - x0)), max(1, int(y1 - y0))) if x1 > x0 and y1 > y0 else Rect(0, 0, 1, 1)


# -- loading ---------------------------------------------------------------------------

def test_load_pgm_identity(tmp_path):
    p = tmp_path / "a.pgm"
    p.write_bytes(b"P5\n2 2\n255\n" + bytes([0, 255, 128, 64]))
    img = load_gray(p)
    assert img.data.tolist() == [[0, 255], [128, 64]]


def test_load_ascii_pgm(tmp_path):
    p = tmp_path / "a.pgm"
    p.write_text("P2\n2 2\n255\n0 255\n128 64\n")
    assert load_gray(p).data.tolist() == [[0, 255], [128, 64]]


@pytest.mark.parametrize("rgb, expected", [((255, 255, 255), 255), ((255, 0, 0), 76), ((0, 0, 0), 0)])
def test_luma(rgb, expected):
    assert to_gray(np.array([[rgb]], dtype=np.uint8)).data[0, 0] == expected


def test_load_rgb_png(tmp_path):
    p = tmp_path / "c.png"
    Image.fromarray(np.array([[[255, 0, 0], [255, 255, 255]]], dtype=np.uint8), mode="RGB").save(p)
    assert load_gray(p).data.tolist() == [[76, 255]]


def test_unsupported_format(tmp_path):
    p = tmp_path / "x.gif"
    Image.fromarray(np.zeros((2, 2), dtype=np.uint8)).save(p)
    with pytest.raises(ImageFormatError):
        load_gray(p)
    q = tmp_path / "junk.png"
    q.write_bytes(b"not an image")
    with pytest.raises(ImageFormatError):
        load_gray(q)


def test_save_roundtrip(tmp_path, rng):
    img = GrayImage(rng.integers(0, 256, (7, 9)).astype(np.uint8))
    for name in ("a.png", "a.pgm"):
        assert load_gray(save_gray(img, tmp_path / name)) == img
    with pytest.raises(ImageFormatError):
        save_gray(img, tmp_path / "a.jpg")


def test_gray_image_is_immutable(rng):
    img = GrayImage(rng.integers(0, 256, (3, 3)).astype(np.uint8))
    with pytest.raises(ValueError):
        img.data[0, 0] = 1
    with pytest.raises(DimensionError):
        GrayImage(np.zeros((2, 2, 2), dtype=np.uint8))


# -- crop / resize -----------------------------------------------------------------------

def test_crop_constant(rng):
    img = GrayImage(np.full((50, 80), 93, dtype=np.uint8))
    for _ in range(10):
        r = random_rect(rng, 80, 50)
        assert np.all(crop_resize(img, r).data == 93)


def test_crop_identity(rng):
    a = rng.integers(0, 256, (100, 100)).astype(np.uint8)
    assert np.array_equal(crop_resize(GrayImage(a), Rect(0, 0, 100, 100)).data, a)


def test_crop_bilinear_oracle():
    a = np.zeros((200, 200), dtype=np.uint8)
    a[:100, 100:] = 200
    a[100:, :100] = 100
    a[100:, 100:] = 50
    out = crop_resize(GrayImage(a), Rect(0, 0, 200, 200)).data
    src = a.astype(float)
    for oy in range(100):
        for ox in range(100):
            cx = min(max((ox + 0.5) * 2 - 0.5, 0), 199)
            cy = min(max((oy + 0.5) * 2 - 0.5, 0), 199)
            x0, y0 = int(np.floor(cx)), int(np.floor(cy))
            x1, y1 = min(x0 + 1, 199), min(y0 + 1, 199)
            fx, fy = cx - x0, cy - y0
            v = ((1 - fy) * ((1 - fx) * src[y0, x0] + fx * src[y0, x1])
                 + fy * ((1 - fx) * src[y1, x0] + fx * src[y1, x1]))
            assert out[oy, ox] == int(np.clip(np.rint(v), 0, 255))


def test_crop_bounds():
    img = GrayImage(np.zeros((10, 10), dtype=np.uint8))
    with pytest.raises(BoundsError):
        crop_resize(img, Rect(5, 5, 6, 2))
    with pytest.raises(GeometryError):
        Rect(0, 0, 0, 3)


# -- integral image ----------------------------------------------------------------------

def test_integral_small():
    ii = integral(GrayImage(np.array([[1, 2], [3, 4]], dtype=np.uint8)))
    assert ii.table.tolist() == [[1, 3], [4, 10]]
    assert ii.at(-1, 0) == 0 and ii.at(1, -1) == 0


def test_integral_zero():
    assert not integral(GrayImage(np.zeros((5, 6), dtype=np.uint8))).table.any()


def test_integral_oracle(rng):
    a = rng.integers(0, 256, (64, 64))
    t = integral(GrayImage(a.astype(np.uint8))).table
    for y in range(0, 64, 7):
        for x in range(0, 64, 5):
            assert t[y, x] == int(a[:y + 1, :x + 1].sum())


def test_integral_squared(rng):
    a = rng.integers(0, 256, (8, 8))
    t = integral(GrayImage(a.astype(np.uint8)), squared=True).table
    assert t[-1, -1] == int((a * a).sum())


def test_rect_sum_examples(rng):
    ii = integral(GrayImage(np.ones((4, 4), dtype=np.uint8)))
    assert rect_sum(ii, Rect(0, 0, 4, 4)) == 16
    a = rng.integers(0, 256, (6, 6)).astype(np.uint8)
    ii = integral(GrayImage(a))
    for y in range(6):
        for x in range(6):
            assert rect_sum(ii, Rect(x, y, 1, 1)) == a[y, x]
    with pytest.raises(BoundsError):
        rect_sum(ii, Rect(3, 3, 4, 1))


def test_rect_sum_oracle(rng):
    a = rng.integers(0, 256, (32, 32)).astype(np.uint8)
    ii = integral(GrayImage(a))
    for _ in range(500):
        r = random_rect(rng, 32, 32)
        assert rect_sum(ii, r) == brute_sum(a, r)


@settings(max_examples=60, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12))), st.data())
def test_rect_sum_property(a, data):
    h, w = a.shape
    x = data.draw(st.integers(0, w - 1))
    y = data.draw(st.integers(0, h - 1))
    rw = data.draw(st.integers(1, w - x))
    rh = data.draw(st.integers(1, h - y))
    r = Rect(x, y, rw, rh)
    assert rect_sum(integral(GrayImage(a)), r) == brute_sum(a, r)


@settings(max_examples=40, deadline=None)
@given(arrays(np.uint8, (6, 6), elements=st.integers(0, 200)), st.integers(0, 5), st.integers(0, 5))
def test_integral_monotone(a, x, y):
    before = integral(GrayImage(a)).table
    b = a.copy()
    b[y, x] += 1
    after = integral(GrayImage(b)).table
    assert np.all(after[y:, x:] >= before[y:, x:])
    assert np.array_equal(after[:y, :], before[:y, :])


# -- face vectors ------------------------------------------------------------------------

def test_flatten_constant():
    v = flatten(GrayImage(np.full((100, 100), 7, dtype=np.uint8)))
    assert v.shape == (10000,) and np.all(v == 7)


def test_flatten_corner():
    a = np.zeros((100, 100), dtype=np.uint8)
    a[0, 0] = 255
    v = flatten(GrayImage(a))
    assert v[0] == 255 and v.sum() == 255


def test_flatten_column_major():
    a = np.zeros((100, 100), dtype=np.uint8)
    a[1, 0] = 9  # second row, first column
    assert flatten(GrayImage(a))[1] == 9


def test_flatten_roundtrip(rng):
    img = GrayImage(rng.integers(0, 256, (100, 100)).astype(np.uint8))
    assert unflatten(flatten(img)) == img
    with pytest.raises(DimensionError):
        flatten(GrayImage(np.zeros((10, 10), dtype=np.uint8)))


def test_equalize_spreads_range(rng):
    a = rng.integers(100, 120, (20, 20)).astype(np.uint8)
    e = equalize(GrayImage(a)).data
    assert e.min() == 0 and e.max() == 255
    flat = GrayImage(np.full((3, 3), 5, dtype=np.uint8))
    assert equalize(flat) == flat
