"""Shared bilinear sampling core with clamp-to-edge borders.

Samples are taken at continuous ``(x, y)`` positions. Integer neighbour
indices are clamped to the array bounds, which extends edge values
outward; a sample far outside the array therefore returns the nearest
edge value and has zero derivative with respect to position.

Interpolation uses the lerp form ``v0 + f * (v1 - v0)`` and the result is
clamped to the hull of the four corner samples. Both choices are about
floating point, not geometry: they make interpolating a constant array
exact and keep outputs inside the range spanned by the inputs even when
rounding would otherwise overshoot by an ulp.

Derivatives with respect to the sample position are those of the
unclamped lerp. At integer positions ``floor`` selects the cell to the
right/below, so the reported derivative is the right-sided one.
"""

from __future__ import annotations

import numpy as np


def _corners(arr: np.ndarray, xs: np.ndarray, ys: np.ndarray):
    h, w = arr.shape
    x0 = np.floor(xs)
    y0 = np.floor(ys)
    fx = xs - x0
    fy = ys - y0
    ix0 = x0.astype(np.int64)
    iy0 = y0.astype(np.int64)
    ix1 = np.clip(ix0 + 1, 0, w - 1)
    iy1 = np.clip(iy0 + 1, 0, h - 1)
    ix0 = np.clip(ix0, 0, w - 1)
    iy0 = np.clip(iy0, 0, h - 1)
    v00 = arr[iy0, ix0]
    v01 = arr[iy0, ix1]
    v10 = arr[iy1, ix0]
    v11 = arr[iy1, ix1]
    return v00, v01, v10, v11, fx, fy


def sample_bilinear(arr: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Bilinear sample of a 2D array at continuous positions."""
    v00, v01, v10, v11, fx, fy = _corners(arr, xs, ys)
    top = v00 + fx * (v01 - v00)
    bot = v10 + fx * (v11 - v10)
    val = top + fy * (bot - top)
    lo = np.minimum(np.minimum(v00, v01), np.minimum(v10, v11))
    hi = np.maximum(np.maximum(v00, v01), np.maximum(v10, v11))
    return np.clip(val, lo, hi)


def sample_bilinear_with_grad(arr: np.ndarray, xs: np.ndarray, ys: np.ndarray):
    """Sample values plus derivatives with respect to x and y position."""
    v00, v01, v10, v11, fx, fy = _corners(arr, xs, ys)
    top = v00 + fx * (v01 - v00)
    bot = v10 + fx * (v11 - v10)
    val = top + fy * (bot - top)
    lo = np.minimum(np.minimum(v00, v01), np.minimum(v10, v11))
    hi = np.maximum(np.maximum(v00, v01), np.maximum(v10, v11))
    d_dx = (1.0 - fy) * (v01 - v00) + fy * (v11 - v10)
    d_dy = bot - top
    return np.clip(val, lo, hi), d_dx, d_dy
