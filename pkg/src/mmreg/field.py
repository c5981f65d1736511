"""Dense displacement fields: warping, composition, resampling, file IO.

A displacement field is an ``(H, W, 2)`` float array; ``field[y, x]``
holds the offset ``(dx, dy)`` in pixels. Warping pulls values from the
source image: ``out[y, x] = img sampled at (x + dx, y + dy)``, bilinear
with clamp-to-edge borders. A zero field is therefore the identity.

The warp is differentiable with respect to the field, which is what
gradient-based registration needs: :func:`warp_backward` chains an
upstream per-pixel loss gradient through the sampler analytically. At
integer sample positions the derivative is the right-sided one (both
one-sided derivatives exist everywhere; they differ only on the measure-
zero set of integer crossings).

The on-disk format (extension ``.ddf``) is: magic ``DDF1``, width and
height as little-endian uint32, then the dx raster and the dy raster,
row-major little-endian float32.
"""

from __future__ import annotations

import struct

import numpy as np

from ._interp import sample_bilinear, sample_bilinear_with_grad
from .errors import DecodeError, ParameterError
from .imagecore import resize_bilinear
from .validation import check_field, check_plane, check_same_shape

_DDF_MAGIC = b"DDF1"


def identity_field(width: int, height: int) -> np.ndarray:
    """All-zero field of the given size."""
    if int(width) != width or int(height) != height or width < 1 or height < 1:
        raise ParameterError(f"field dimensions must be integers >= 1, got {width}x{height}")
    return np.zeros((int(height), int(width), 2), dtype=np.float64)


def _sample_grid(field: np.ndarray):
    h, w = field.shape[:2]
    gx, gy = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    return gx + field[..., 0], gy + field[..., 1]


def warp_bilinear(img, field) -> np.ndarray:
    """Warp an image by a displacement field of the same spatial size."""
    arr = check_plane(img, "image")
    fld = check_field(field, "field")
    check_same_shape(arr, fld, "warp inputs")
    xs, ys = _sample_grid(fld)
    return sample_bilinear(arr, xs, ys)


def warp_backward(img, field, upstream) -> np.ndarray:
    """Gradient of a warp with respect to the field.

    ``upstream`` is dL/d(warped image), shape (H, W). Returns
    dL/d(field), shape (H, W, 2): the upstream value at each pixel times
    the image-space derivative of the sampled value in x and in y.
    A constant image yields a zero gradient everywhere.
    """
    arr = check_plane(img, "image")
    fld = check_field(field, "field")
    up = check_plane(upstream, "upstream")
    check_same_shape(arr, fld, "warp inputs")
    check_same_shape(arr, up, "upstream gradient")
    xs, ys = _sample_grid(fld)
    _, d_dx, d_dy = sample_bilinear_with_grad(arr, xs, ys)
    grad = np.empty_like(fld)
    grad[..., 0] = up * d_dx
    grad[..., 1] = up * d_dy
    return grad


def upsample_field(field, out_w: int, out_h: int) -> np.ndarray:
    """Resample a field to a new size, rescaling displacements to pixels.

    Components are resized with align-corners bilinear interpolation and
    then scaled by the grid-spacing ratio ``(out - 1) / (in - 1)`` per
    axis, so a displacement spanning a fixed fraction of the image keeps
    spanning it at the new resolution. Degenerate one-pixel axes scale
    by 1.
    """
    fld = check_field(field, "field")
    in_h, in_w = fld.shape[:2]
    sx = 1.0 if in_w == 1 else (out_w - 1) / (in_w - 1)
    sy = 1.0 if in_h == 1 else (out_h - 1) / (in_h - 1)
    out = np.empty((int(out_h), int(out_w), 2), dtype=np.float64)
    out[..., 0] = resize_bilinear(fld[..., 0], out_w, out_h) * sx
    out[..., 1] = resize_bilinear(fld[..., 1], out_w, out_h) * sy
    return out


def compose_fields(outer, inner) -> np.ndarray:
    """Field equivalent to applying ``outer`` first, then ``inner``.

    ``warp(img, compose_fields(outer, inner)) == warp(warp(img, outer), inner)``
    up to border effects: ``out(p) = inner(p) + outer(p + inner(p))`` with
    the outer field sampled bilinearly.
    """
    fo = check_field(outer, "outer")
    fi = check_field(inner, "inner")
    check_same_shape(fo, fi, "compose inputs")
    xs, ys = _sample_grid(fi)
    out = np.empty_like(fi)
    out[..., 0] = fi[..., 0] + sample_bilinear(fo[..., 0], xs, ys)
    out[..., 1] = fi[..., 1] + sample_bilinear(fo[..., 1], xs, ys)
    return out


def save_ddf(field, path) -> None:
    """Write a field in the DDF1 binary format."""
    fld = check_field(field, "field")
    h, w = fld.shape[:2]
    with open(path, "wb") as f:
        f.write(_DDF_MAGIC)
        f.write(struct.pack("<II", w, h))
        f.write(fld[..., 0].astype("<f4").tobytes())
        f.write(fld[..., 1].astype("<f4").tobytes())


def load_ddf(path) -> np.ndarray:
    """Read a DDF1 field; rejects bad magic and truncated payloads."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except FileNotFoundError as exc:
        raise DecodeError(f"{path}: file not found") from exc
    if len(data) < 12 or data[:4] != _DDF_MAGIC:
        raise DecodeError(f"{path}: not a DDF1 field file")
    w, h = struct.unpack("<II", data[4:12])
    if w < 1 or h < 1:
        raise DecodeError(f"{path}: bad field dimensions {w}x{h}")
    need = 12 + 2 * 4 * w * h
    if len(data) != need:
        raise DecodeError(f"{path}: truncated field payload ({len(data)} of {need} bytes)")
    raster = np.frombuffer(data[12:], dtype="<f4")
    out = np.empty((h, w, 2), dtype=np.float64)
    out[..., 0] = raster[: w * h].reshape(h, w)
    out[..., 1] = raster[w * h :].reshape(h, w)
    return out
