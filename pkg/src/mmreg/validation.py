"""Validation helpers for the array conventions used package-wide.

Images and fields are plain numpy arrays:

* grayscale image: ``(H, W)`` float array with values in ``[0, 1]``
* RGB image: ``(H, W, 3)`` float array with values in ``[0, 1]``
* displacement field: ``(H, W, 2)`` float array; ``[..., 0]`` holds the
  horizontal offset dx and ``[..., 1]`` the vertical offset dy, both in
  pixel units

The helpers return float64 copies/views so downstream arithmetic runs in
double precision regardless of what the caller passed in.
"""

from __future__ import annotations

import numpy as np

from .errors import ParameterError


def check_gray(img, name: str = "image") -> np.ndarray:
    """Validate a grayscale image and return it as a float64 array."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise ParameterError(f"{name}: expected a 2D (H, W) array, got shape {arr.shape}")
    if arr.size == 0:
        raise ParameterError(f"{name}: empty array")
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{name}: contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ParameterError(
            f"{name}: values outside [0, 1] (min {arr.min():g}, max {arr.max():g})"
        )
    return arr


def check_rgb(img, name: str = "image") -> np.ndarray:
    """Validate an RGB image and return it as a float64 array."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ParameterError(f"{name}: expected an (H, W, 3) array, got shape {arr.shape}")
    if arr.size == 0:
        raise ParameterError(f"{name}: empty array")
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{name}: contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ParameterError(
            f"{name}: values outside [0, 1] (min {arr.min():g}, max {arr.max():g})"
        )
    return arr


def check_plane(arr, name: str = "array") -> np.ndarray:
    """Validate a finite 2D array without range constraints."""
    out = np.asarray(arr, dtype=np.float64)
    if out.ndim != 2:
        raise ParameterError(f"{name}: expected a 2D array, got shape {out.shape}")
    if out.size == 0:
        raise ParameterError(f"{name}: empty array")
    if not np.all(np.isfinite(out)):
        raise ParameterError(f"{name}: contains non-finite values")
    return out


def check_field(field, name: str = "field") -> np.ndarray:
    """Validate a displacement field and return it as a float64 array."""
    arr = np.asarray(field, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 2:
        raise ParameterError(f"{name}: expected an (H, W, 2) array, got shape {arr.shape}")
    if arr.size == 0:
        raise ParameterError(f"{name}: empty array")
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{name}: contains non-finite values")
    return arr


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "inputs") -> None:
    if a.shape[:2] != b.shape[:2]:
        raise ParameterError(f"{what}: dimension mismatch {a.shape[:2]} vs {b.shape[:2]}")


def check_dims(width: int, height: int, minimum: int = 1, name: str = "dimensions") -> None:
    if int(width) != width or int(height) != height:
        raise ParameterError(f"{name}: width and height must be integers")
    if width < minimum or height < minimum:
        raise ParameterError(f"{name}: must be at least {minimum}, got {width}x{height}")
