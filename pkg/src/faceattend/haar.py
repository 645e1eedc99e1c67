"""Upright Haar-like features over a square base window.

A feature is stored in window-relative coordinates at the base scale. Its
black and white sub-rectangles follow from the kind:

==================  ======================  ==============================
kind                split                   black part
==================  ======================  ==============================
edge-horizontal     2 rows (top/bottom)     top half
edge-vertical       2 columns (left/right)  left half
line-horizontal     3 rows                  middle third
line-vertical       3 columns               middle third
four-square         2 x 2 cells             top-left and bottom-right
==================  ======================  ==============================

A feature's value is the black pixel sum minus the white pixel sum.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import GeometryError
from .imagecore import IntegralImage, Rect, rect_sum

EDGE_H = "edge-horizontal"
EDGE_V = "edge-vertical"
LINE_H = "line-horizontal"
LINE_V = "line-vertical"
FOUR = "four-square"

KINDS = (EDGE_H, EDGE_V, LINE_H, LINE_V, FOUR)

# (columns, rows) of the unit grid for each kind
_GRID = {
    EDGE_H: (1, 2),
    EDGE_V: (2, 1),
    LINE_H: (1, 3),
    LINE_V: (3, 1),
    FOUR: (2, 2),
}

# +1 for black cells, -1 for white, in row-major cell order
_SIGNS = {
    EDGE_H: (1, -1),
    EDGE_V: (1, -1),
    LINE_H: (-1, 1, -1),
    LINE_V: (-1, 1, -1),
    FOUR: (1, -1, -1, 1),
}

DEFAULT_BASE = 24


@dataclass(frozen=True)
class HaarFeature:
    kind: str
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.kind not in _GRID:
            raise GeometryError(f"unknown feature kind {self.kind!r}")
        cols, rows = _GRID[self.kind]
        if self.w < cols or self.h < rows or self.w % cols or self.h % rows:
            raise GeometryError(f"{self.kind} needs width divisible by {cols} and height by {rows}, "
                                f"got {self.w}x{self.h}")
        if self.x < 0 or self.y < 0:
            raise GeometryError("feature position must be non-negative")

    @property
    def grid(self):
        return _GRID[self.kind]

    def cells(self, x0=0, y0=0, scale=1.0):
        """Signed sub-rectangles ``[(sign, Rect), ...]`` placed at ``(x0, y0)``.

        At a scale other than 1 the feature origin and the cell size are
        floored separately, so every cell keeps the same size and the scaled
        feature never extends past the floored scaled window.
        """
        cols, rows = _GRID[self.kind]
        if scale == 1.0:
            fx, fy, cw, ch = self.x, self.y, self.w // cols, self.h // rows
        else:
            fx = int(math.floor(self.x * scale))
            fy = int(math.floor(self.y * scale))
            cw = max(1, int(math.floor(self.w // cols * scale)))
            ch = max(1, int(math.floor(self.h // rows * scale)))
        signs = _SIGNS[self.kind]
        out = []
        for r in range(rows):
            for c in range(cols):
                out.append((signs[r * cols + c], Rect(x0 + fx + c * cw, y0 + fy + r * ch, cw, ch)))
        return out

    def extent(self, scale=1.0):
        cells = self.cells(0, 0, scale)
        return max(r.x2 for _, r in cells), max(r.y2 for _, r in cells)

    def fits(self, side: int, scale: float = 1.0) -> bool:
        ex, ey = self.extent(scale)
        return ex <= side and ey <= side


def scaled_side(base: int, scale: float) -> int:
    return int(math.floor(base * scale + 1e-9))


def enumerate_features(base: int = DEFAULT_BASE, kinds=KINDS) -> list[HaarFeature]:
    """Every feature of the requested kinds that fits in ``base x base``.

    Ordered by kind (in ``KINDS`` order), then ``y``, ``x``, ``h``, ``w``.
    """
    if base < 2:
        raise GeometryError("base window must be at least 2 pixels")
    feats = []
    for kind in KINDS:
        if kind not in kinds:
            continue
        cols, rows = _GRID[kind]
        for y in range(base):
            for x in range(base):
                for h in range(rows, base - y + 1, rows):
                    for w in range(cols, base - x + 1, cols):
                        feats.append(HaarFeature(kind, x, y, w, h))
    return feats


def window_std(ii_sq: IntegralImage, ii: IntegralImage, window: Rect) -> float:
    """Pixel standard deviation inside ``window``; 1.0 for flat windows."""
    n = window.area
    s = rect_sum(ii, window)
    sq = rect_sum(ii_sq, window)
    var = (sq - s * s / n) / n
    return math.sqrt(var) if var > 1e-12 else 1.0


def eval_feature(ii: IntegralImage, f: HaarFeature, window: Rect, scale: float = 1.0,
                 *, normalize: bool = True, ii_sq: IntegralImage | None = None) -> float:
    """Black-minus-white sum of ``f`` placed in ``window`` at ``scale``.

    With ``normalize`` the raw value is divided by the window area, and, if
    ``ii_sq`` (integral of squared pixels) is given, by the window's pixel
    standard deviation as well. ``normalize=False`` returns the exact
    integer difference.
    """
    if not window.inside(ii.width, ii.height):
        raise GeometryError(f"window {window} outside {ii.width}x{ii.height} image")
    cells = f.cells(window.x, window.y, scale)
    for _, r in cells:
        if r.x2 > window.x2 or r.y2 > window.y2:
            raise GeometryError(f"{f} at scale {scale} exceeds window {window}")
    raw = sum(sign * rect_sum(ii, r) for sign, r in cells)
    if not normalize:
        return raw
    value = raw / window.area
    if ii_sq is not None:
        value /= window_std(ii_sq, ii, window)
    return value


class FeatureGeometry:
    """Vectorized form of a feature list: up to four signed cells each.

    Arrays have shape ``(n_features, 4)``; unused cells carry sign 0 and a
    1x1 footprint so lookups stay in bounds.
    """

    def __init__(self, features, scale=1.0):
        n = len(features)
        self.features = list(features)
        self.x = np.zeros((n, 4), dtype=np.intp)
        self.y = np.zeros((n, 4), dtype=np.intp)
        self.w = np.ones((n, 4), dtype=np.intp)
        self.h = np.ones((n, 4), dtype=np.intp)
        self.sign = np.zeros((n, 4), dtype=np.float64)
        for i, f in enumerate(features):
            for k, (sgn, r) in enumerate(f.cells(0, 0, scale)):
                self.x[i, k], self.y[i, k], self.w[i, k], self.h[i, k] = r.x, r.y, r.w, r.h
                self.sign[i, k] = sgn

    def __len__(self):
        return len(self.features)

    def raw_values(self, tables: np.ndarray, ox=None, oy=None) -> np.ndarray:
        """Raw feature values over a stack of padded integral tables.

        ``tables`` is ``(m, H+1, W+1)`` with a leading zero row/column. With
        offsets ``ox``/``oy`` (length ``m``) each feature is evaluated in the
        window whose top-left corner is ``(ox[j], oy[j])`` of table ``j``
        (or of the single table when ``tables`` is 2-D). Returns ``(F, m)``.
        """
        if tables.ndim == 2:
            t = tables
            m = len(ox)
            pick = lambda yy, xx: t[yy, xx]  # noqa: E731
        else:
            m = tables.shape[0]
            idx = np.arange(m)
            t = tables
            pick = lambda yy, xx: t[idx, yy, xx]  # noqa: E731
        if ox is None:
            ox = np.zeros(m, dtype=np.intp)
            oy = np.zeros(m, dtype=np.intp)
        out = np.zeros((len(self), m), dtype=np.float64)
        for k in range(4):
            used = self.sign[:, k] != 0
            if not used.any():
                continue
            rows = np.nonzero(used)[0]
            x0 = self.x[rows, k][:, None] + ox[None, :]
            y0 = self.y[rows, k][:, None] + oy[None, :]
            x1 = x0 + self.w[rows, k][:, None]
            y1 = y0 + self.h[rows, k][:, None]
            s = pick(y1, x1) - pick(y0, x1) - pick(y1, x0) + pick(y0, x0)
            out[rows] += self.sign[rows, k][:, None] * s
        return out


def stack_tables(windows: np.ndarray, squared: bool = False) -> np.ndarray:
    """Padded integral tables for a ``(m, s, s)`` stack of windows."""
    a = np.asarray(windows, dtype=np.int64)
    if squared:
        a = a * a
    t = a.cumsum(axis=1).cumsum(axis=2)
    return np.pad(t, ((0, 0), (1, 0), (1, 0)))


def window_norms(windows: np.ndarray, variance: bool) -> np.ndarray:
    """Per-window normalizer: area, times pixel std when ``variance``."""
    a = np.asarray(windows, dtype=np.float64)
    m, h, w = a.shape
    norms = np.full(m, float(h * w))
    if variance:
        n = h * w
        s = a.reshape(m, -1).sum(axis=1)
        sq = (a.reshape(m, -1) ** 2).sum(axis=1)
        var = (sq - s * s / n) / n
        std = np.where(var > 1e-12, np.sqrt(np.maximum(var, 0)), 1.0)
        norms *= std
    return norms


def feature_matrix(features, windows: np.ndarray, variance: bool = True,
                   chunk: int = 4096, window_chunk: int = 8192, dtype=np.float32) -> np.ndarray:
    """Normalized values of every feature on every base window, ``(F, m)``."""
    windows = np.asarray(windows)
    out = np.empty((len(features), len(windows)), dtype=dtype)
    geos = [FeatureGeometry(features[i:i + chunk]) for i in range(0, len(features), chunk)]
    for ws in range(0, len(windows), window_chunk):
        block = windows[ws:ws + window_chunk]
        tables = stack_tables(block)
        norms = window_norms(block, variance)
        for gi, geo in enumerate(geos):
            start = gi * chunk
            out[start:start + len(geo), ws:ws + len(block)] = geo.raw_values(tables) / norms[None, :]
    return out
