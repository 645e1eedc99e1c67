"""Grayscale rasters, integral images and the 100x100 face chip.

All coordinates are 0-based with the origin at the top-left corner; ``x``
indexes columns and ``y`` indexes rows.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import BoundsError, DimensionError, GeometryError, ImageFormatError

CHIP_SIZE = 100

# broadcast luma weights (R, G, B)
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass(frozen=True, eq=False)
class GrayImage:
    """8-bit luminance raster stored row-major as a ``(height, width)`` array."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data)
        if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
            raise DimensionError(f"expected a non-empty 2-D raster, got shape {a.shape}")
        if a.dtype != np.uint8:
            if np.any(a < 0) or np.any(a > 255):
                raise ValueError("pixel values must lie in [0, 255]")
            a = a.astype(np.uint8)
        a = np.array(a, dtype=np.uint8, copy=True)
        a.setflags(write=False)
        object.__setattr__(self, "data", a)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self):
        return self.data.shape

    def __eq__(self, other):
        if not isinstance(other, GrayImage):
            return NotImplemented
        return self.data.shape == other.data.shape and bool(np.array_equal(self.data, other.data))

    def __hash__(self):
        return hash((self.data.shape, self.data.tobytes()))


@dataclass(frozen=True)
class Rect:
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.w < 1 or self.h < 1:
            raise GeometryError(f"rect extent must be positive, got {self.w}x{self.h}")

    @property
    def area(self) -> int:
        return self.w * self.h

    @property
    def x2(self) -> int:
        return self.x + self.w

    @property
    def y2(self) -> int:
        return self.y + self.h

    def inside(self, width: int, height: int) -> bool:
        return self.x >= 0 and self.y >= 0 and self.x2 <= width and self.y2 <= height

    def iou(self, other: "Rect") -> float:
        ix = max(0, min(self.x2, other.x2) - max(self.x, other.x))
        iy = max(0, min(self.y2, other.y2) - max(self.y, other.y))
        inter = ix * iy
        return inter / float(self.area + other.area - inter)


@dataclass(frozen=True, eq=False)
class IntegralImage:
    """Summed-area table with the same dimensions as its source.

    ``table[y, x]`` is the sum of all source pixels ``(x', y')`` with
    ``x' <= x`` and ``y' <= y``. Lookups left of column 0 or above row 0
    read as zero.
    """

    table: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.table, dtype=np.int64)
        t.setflags(write=False)
        object.__setattr__(self, "table", t)

    @property
    def width(self) -> int:
        return self.table.shape[1]

    @property
    def height(self) -> int:
        return self.table.shape[0]

    def at(self, x: int, y: int) -> int:
        if x < 0 or y < 0:
            return 0
        return int(self.table[y, x])

    def padded(self) -> np.ndarray:
        """Table with a leading zero row and column, for vectorized lookups."""
        return np.pad(self.table, ((1, 0), (1, 0)))


def _to_luma(rgb: np.ndarray) -> np.ndarray:
    r, g, b = (rgb[..., i].astype(np.float64) for i in range(3))
    wr, wg, wb = LUMA_WEIGHTS
    return np.clip(np.rint(wr * r + wg * g + wb * b), 0, 255).astype(np.uint8)


def to_gray(pixels) -> GrayImage:
    """Wrap a 2-D array, or convert an ``(h, w, 3|4)`` RGB(A) array to luma."""
    a = np.asarray(pixels)
    if a.ndim == 3 and a.shape[2] in (3, 4):
        return GrayImage(_to_luma(a[..., :3]))
    return GrayImage(a)


def load_gray(path) -> GrayImage:
    path = Path(path)
    with path.open("rb") as fh:
        head = fh.read(8)
    if not (head.startswith(b"P5") or head.startswith(b"P2") or head.startswith(b"\x89PNG")
            or head.startswith(b"\xff\xd8")):
        raise ImageFormatError(f"{path}: unsupported raster format")
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("L", "P", "LA", "RGB", "RGBA", "I;16", "I"):
                if im.mode == "P":
                    im = im.convert("RGB")
                arr = np.asarray(im)
            else:
                arr = np.asarray(im.convert("RGB"))
    except UnidentifiedImageError as exc:
        raise ImageFormatError(f"{path}: {exc}") from exc
    if arr.ndim == 3 and arr.shape[2] == 2:  # LA
        arr = arr[..., 0]
    if arr.ndim == 2 and arr.dtype != np.uint8:
        raise ImageFormatError(f"{path}: only 8-bit rasters are supported")
    return to_gray(arr)


def save_gray(img: GrayImage, path) -> Path:
    """Write ``img`` losslessly; the format follows the extension (.png/.pgm)."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix not in (".png", ".pgm"):
        raise ImageFormatError(f"{path}: chips are written as PNG or PGM")
    Image.fromarray(np.ascontiguousarray(img.data), mode="L").save(path)
    return path


def crop_resize(img: GrayImage, r: Rect, size: int = CHIP_SIZE) -> GrayImage:
    """Crop ``r`` and resample it bilinearly to ``size x size``.

    Output pixel centres are mapped onto the rect with half-pixel alignment and
    clamped to its interior, so a same-size rect is copied exactly.
    """
    if not r.inside(img.width, img.height):
        raise BoundsError(f"{r} outside {img.width}x{img.height} image")
    src = img.data[r.y:r.y2, r.x:r.x2].astype(np.float64)

    def axis(n_src):
        c = (np.arange(size) + 0.5) * (n_src / size) - 0.5
        c = np.clip(c, 0, n_src - 1)
        lo = np.floor(c).astype(np.intp)
        hi = np.minimum(lo + 1, n_src - 1)
        return lo, hi, c - lo

    y0, y1, fy = axis(r.h)
    x0, x1, fx = axis(r.w)
    fy = fy[:, None]
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bottom = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    out = top * (1 - fy) + bottom * fy
    return GrayImage(np.clip(np.rint(out), 0, 255).astype(np.uint8))


def integral(img: GrayImage, squared: bool = False) -> IntegralImage:
    """Summed-area table of ``img`` (of its squared pixels when ``squared``)."""
    a = img.data.astype(np.int64)
    if squared:
        a = a * a
    return IntegralImage(a.cumsum(axis=0).cumsum(axis=1))


def rect_sum(ii: IntegralImage, r: Rect) -> int:
    """Pixel sum inside ``r`` from four table lookups."""
    if not r.inside(ii.width, ii.height):
        raise BoundsError(f"{r} outside {ii.width}x{ii.height} integral image")
    x0, y0, x1, y1 = r.x - 1, r.y - 1, r.x2 - 1, r.y2 - 1
    return ii.at(x1, y1) - ii.at(x1, y0) - ii.at(x0, y1) + ii.at(x0, y0)


def flatten(img: GrayImage) -> np.ndarray:
    """Column-major face vector of a 100x100 chip."""
    if img.shape != (CHIP_SIZE, CHIP_SIZE):
        raise DimensionError(f"face chips must be {CHIP_SIZE}x{CHIP_SIZE}, got {img.width}x{img.height}")
    return img.data.ravel(order="F").astype(np.float64)


def unflatten(vec, size: int = CHIP_SIZE) -> GrayImage:
    v = np.asarray(vec)
    if v.shape != (size * size,):
        raise DimensionError(f"expected a vector of length {size * size}, got {v.shape}")
    return GrayImage(np.clip(np.rint(v), 0, 255).astype(np.uint8).reshape((size, size), order="F"))


def equalize(img: GrayImage) -> GrayImage:
    """Histogram equalization (optional illumination normalization)."""
    hist = np.bincount(img.data.ravel(), minlength=256)
    cdf = hist.cumsum()
    nz = cdf[cdf > 0]
    lo = nz[0]
    total = cdf[-1]
    if total == lo:
        return img
    lut = np.clip(np.rint((cdf - lo) * 255.0 / (total - lo)), 0, 255).astype(np.uint8)
    return GrayImage(lut[img.data])
