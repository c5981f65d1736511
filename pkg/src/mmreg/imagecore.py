"""Image IO, grayscale conversion, and resizing.

Grayscale conversion offers two views of an RGB image: a weighted channel
average (suited to stains and darkfield content, default weights are the
Rec. 601 luma coefficients) and pure saturation, which isolates coloured
tissue from a bright neutral background regardless of lighting.

8-bit integers exist only at the file boundary; everything in memory is
float in [0, 1].
"""

from __future__ import annotations

import numpy as np
from PIL import Image, UnidentifiedImageError

from ._interp import sample_bilinear
from .errors import DecodeError, ParameterError
from .validation import check_gray, check_plane, check_rgb

#: Rec. 601 luma weights, the default for weighted gray conversion.
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def load_png(path) -> np.ndarray:
    """Load an 8-bit RGB or RGBA PNG as an (H, W, 3) float array in [0, 1].

    The alpha channel, if present, is dropped. Anything else (missing
    file, other formats, palette or grayscale PNGs) raises
    :class:`DecodeError` naming the path.
    """
    try:
        with Image.open(path) as im:
            if im.format != "PNG":
                raise DecodeError(f"{path}: not a PNG file (detected {im.format})")
            if im.mode not in ("RGB", "RGBA"):
                raise DecodeError(
                    f"{path}: unsupported PNG color type {im.mode!r}; need 8-bit RGB or RGBA"
                )
            arr = np.asarray(im, dtype=np.uint8)
    except FileNotFoundError as exc:
        raise DecodeError(f"{path}: file not found") from exc
    except UnidentifiedImageError as exc:
        raise DecodeError(f"{path}: not a decodable image") from exc
    return arr[..., :3].astype(np.float64) / 255.0


def save_pgm(img, path) -> None:
    """Write a grayscale image as binary PGM (P5, maxval 255).

    Intensities are scaled by 255 and rounded half-to-even, so 0.5 maps
    to byte 128.
    """
    arr = check_gray(img, "image")
    h, w = arr.shape
    payload = np.rint(arr * 255.0).astype(np.uint8)
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload.tobytes())


def _pgm_tokens(data: bytes, path) -> tuple[list[bytes], int]:
    """First four header tokens of a PGM plus the payload offset."""
    tokens: list[bytes] = []
    i = 0
    n = len(data)
    while len(tokens) < 4:
        while i < n and data[i : i + 1].isspace():
            i += 1
        if i < n and data[i : i + 1] == b"#":
            while i < n and data[i] not in (0x0A, 0x0D):
                i += 1
            continue
        start = i
        while i < n and not data[i : i + 1].isspace():
            i += 1
        if start == i:
            raise DecodeError(f"{path}: truncated PGM header")
        tokens.append(data[start:i])
    # exactly one whitespace byte separates the header from the raster
    return tokens, i + 1


def load_pgm(path) -> np.ndarray:
    """Load a binary PGM (P5, maxval 255) as an (H, W) float array."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except FileNotFoundError as exc:
        raise DecodeError(f"{path}: file not found") from exc
    if not data.startswith(b"P5"):
        raise DecodeError(f"{path}: not a binary PGM (missing P5 magic)")
    tokens, offset = _pgm_tokens(data, path)
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as exc:
        raise DecodeError(f"{path}: malformed PGM header") from exc
    if maxval != 255:
        raise DecodeError(f"{path}: unsupported PGM maxval {maxval}; need 255")
    if w < 1 or h < 1:
        raise DecodeError(f"{path}: bad PGM dimensions {w}x{h}")
    payload = data[offset : offset + w * h]
    if len(payload) != w * h:
        raise DecodeError(f"{path}: truncated PGM payload ({len(payload)} of {w * h} bytes)")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0


def to_gray_weighted(img, weights=LUMA_WEIGHTS) -> np.ndarray:
    """Weighted channel average of an RGB image.

    ``weights`` must be three nonnegative numbers summing to 1 within
    1e-9; the output is then automatically within [0, 1].
    """
    arr = check_rgb(img, "image")
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (3,):
        raise ParameterError(f"weights: expected 3 values, got shape {w.shape}")
    if np.any(w < 0.0) or abs(w.sum() - 1.0) > 1e-9:
        raise ParameterError(
            f"weights: must be nonnegative and sum to 1 within 1e-9 (sum {w.sum()!r})"
        )
    return arr @ w


def to_gray_saturation(img) -> np.ndarray:
    """HSV-style saturation channel: (max - min) / max, 0 at black."""
    arr = check_rgb(img, "image")
    mx = arr.max(axis=2)
    mn = arr.min(axis=2)
    with np.errstate(invalid="ignore", divide="ignore"):
        sat = np.where(mx > 0.0, (mx - mn) / np.where(mx > 0.0, mx, 1.0), 0.0)
    return sat


def _align_corners_coords(src: int, dst: int) -> np.ndarray:
    """Source coordinates for each target index, align-corners convention."""
    if dst == 1:
        return np.array([(src - 1) / 2.0])
    return np.arange(dst, dtype=np.float64) * ((src - 1) / (dst - 1))


def resize_bilinear(img, out_w: int, out_h: int) -> np.ndarray:
    """Resize a 2D array with align-corners bilinear sampling.

    Target index ``i`` samples source coordinate ``i * (src - 1) / (dst - 1)``
    (the centre of the source when the target axis has length 1), so corner
    pixels map exactly onto corner pixels. Works on any finite 2D array,
    not just [0, 1] images; constant arrays are reproduced exactly.
    """
    arr = check_plane(img, "image")
    if int(out_w) != out_w or int(out_h) != out_h or out_w < 1 or out_h < 1:
        raise ParameterError(f"target dimensions must be integers >= 1, got {out_w}x{out_h}")
    h, w = arr.shape
    xs = _align_corners_coords(w, int(out_w))
    ys = _align_corners_coords(h, int(out_h))
    gx, gy = np.meshgrid(xs, ys)
    return sample_bilinear(arr, gx, gy)
