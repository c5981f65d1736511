"""Elastic deformation and dataset augmentation.

A deformation is built in three pinned steps: draw a per-pixel field with
both components i.i.d. uniform on [-1, 1), smooth each component with a
truncated, normalised Gaussian kernel (odd width ``filter_size``, standard
deviation ``sigma``, clamp-to-edge borders), then scale by ``alpha``.
Because the smoothing kernel is normalised and the raw values lie in
[-1, 1], the final field's infinity norm never exceeds ``alpha``.

Smoothing happens before scaling; the two orders are algebraically equal
but this one keeps intermediate values in [-1, 1] regardless of alpha.

Deformation strength is organised in named levels, each giving sampling
ranges for sigma and alpha and a set of admissible filter sizes. The
defaults below are calibrated for roughly 256x192 images; everything is
overridable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .field import warp_bilinear
from .rng import Xoshiro256pp, derive_seed
from .validation import check_field, check_plane

__all__ = [
    "DeformParams",
    "IntensityLevel",
    "DEFAULT_LEVELS",
    "random_unit_field",
    "gaussian_kernel1d",
    "gaussian_smooth_field",
    "elastic_deform",
    "sample_deform_params",
    "build_augmented_set",
]


@dataclass(frozen=True)
class DeformParams:
    """Concrete parameters for one elastic deformation."""

    sigma: float
    alpha: float
    filter_size: int
    seed: int

    def __post_init__(self):
        if not (self.sigma > 0.0):
            raise ParameterError(f"sigma must be > 0, got {self.sigma}")
        if self.alpha < 0.0:
            raise ParameterError(f"alpha must be >= 0, got {self.alpha}")
        f = self.filter_size
        if int(f) != f or f < 1 or f % 2 == 0:
            raise ParameterError(f"filter_size must be an odd integer >= 1, got {f}")


@dataclass(frozen=True)
class IntensityLevel:
    """Sampling ranges for one named deformation strength."""

    name: str
    sigma_range: tuple[float, float]
    alpha_range: tuple[float, float]
    filter_sizes: tuple[int, ...]

    def __post_init__(self):
        if not (0.0 < self.sigma_range[0] <= self.sigma_range[1]):
            raise ParameterError(f"{self.name}: bad sigma_range {self.sigma_range}")
        if not (0.0 <= self.alpha_range[0] <= self.alpha_range[1]):
            raise ParameterError(f"{self.name}: bad alpha_range {self.alpha_range}")
        if not self.filter_sizes:
            raise ParameterError(f"{self.name}: filter_sizes must be nonempty")
        for f in self.filter_sizes:
            if int(f) != f or f < 1 or f % 2 == 0:
                raise ParameterError(f"{self.name}: filter sizes must be odd integers >= 1")


#: Default levels: wider kernels and smaller amplitudes produce gentle,
#: large-scale deformations; "high" is tighter and stronger.
DEFAULT_LEVELS: dict[str, IntensityLevel] = {
    "low": IntensityLevel("low", (8.0, 12.0), (4.0, 8.0), (21,)),
    "medium": IntensityLevel("medium", (6.0, 10.0), (8.0, 16.0), (21, 31)),
    "high": IntensityLevel("high", (4.0, 8.0), (16.0, 32.0), (31, 41)),
}


def random_unit_field(width: int, height: int, seed: int) -> np.ndarray:
    """Per-pixel field with dx, dy i.i.d. uniform on [-1, 1).

    Draw order is pinned: one xoshiro256++ stream seeded with ``seed``,
    consumed row-major with dx then dy at each pixel. Same seed, same
    field, bit for bit, on every platform.
    """
    if width < 1 or height < 1:
        raise ParameterError(f"field dimensions must be >= 1, got {width}x{height}")
    rng = Xoshiro256pp(seed)
    vals = rng.uniform_signed_array(2 * int(width) * int(height))
    return vals.reshape(int(height), int(width), 2)


def gaussian_kernel1d(filter_size: int, sigma: float) -> np.ndarray:
    """Truncated Gaussian taps, normalised to sum to 1."""
    if int(filter_size) != filter_size or filter_size < 1 or filter_size % 2 == 0:
        raise ParameterError(f"filter_size must be an odd integer >= 1, got {filter_size}")
    if not (sigma > 0.0):
        raise ParameterError(f"sigma must be > 0, got {sigma}")
    r = (int(filter_size) - 1) // 2
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _smooth_plane(arr: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable correlation with clamp-to-edge padding."""
    r = (kernel.size - 1) // 2
    if r == 0:
        return arr.copy()
    padded = np.pad(arr, ((0, 0), (r, r)), mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(padded, kernel.size, axis=1)
    out = win @ kernel
    padded = np.pad(out, ((r, r), (0, 0)), mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(padded, kernel.size, axis=0)
    return win @ kernel


def gaussian_smooth_field(field, params: DeformParams) -> np.ndarray:
    """Smooth both field components with the params' Gaussian kernel.

    The 2D kernel is the outer product of the normalised 1D taps, so its
    weights sum to 1 (within 1e-12) and smoothing preserves constants;
    ``filter_size == 1`` is the identity.
    """
    fld = check_field(field, "field")
    kernel = gaussian_kernel1d(params.filter_size, params.sigma)
    out = np.empty_like(fld)
    out[..., 0] = _smooth_plane(fld[..., 0], kernel)
    out[..., 1] = _smooth_plane(fld[..., 1], kernel)
    return out


def elastic_deform(img, params: DeformParams) -> tuple[np.ndarray, np.ndarray]:
    """Random smooth deformation of an image.

    Returns ``(warped, field)`` where ``field`` is alpha times the
    smoothed unit field; ``alpha == 0`` returns the image unchanged with
    an exactly zero field.
    """
    arr = check_plane(img, "image")
    h, w = arr.shape
    unit = random_unit_field(w, h, params.seed)
    fld = params.alpha * gaussian_smooth_field(unit, params)
    if params.alpha == 0.0:
        return arr.copy(), fld
    return warp_bilinear(arr, fld), fld


def sample_deform_params(level: IntensityLevel, seed: int) -> DeformParams:
    """Draw concrete deformation parameters from a level's ranges.

    Pinned draw order from one derived stream: sigma, alpha, filter
    size; the unit-field seed is derived separately so parameter draws
    and pixel draws never share a stream.
    """
    rng = Xoshiro256pp(derive_seed(seed, 0))
    sigma = rng.uniform_in(*level.sigma_range)
    alpha = rng.uniform_in(*level.alpha_range)
    filter_size = level.filter_sizes[rng.next_below(len(level.filter_sizes))]
    return DeformParams(sigma=sigma, alpha=alpha, filter_size=filter_size, seed=derive_seed(seed, 1))


def _normalise_levels(levels) -> list[tuple[IntensityLevel, float]]:
    out = []
    for item in levels:
        lvl, weight = item
        if isinstance(lvl, str):
            try:
                lvl = DEFAULT_LEVELS[lvl]
            except KeyError:
                raise ParameterError(f"unknown level {lvl!r}; known: {sorted(DEFAULT_LEVELS)}")
        if weight < 0:
            raise ParameterError(f"level weight must be >= 0, got {weight}")
        out.append((lvl, float(weight)))
    if not out or sum(w for _, w in out) <= 0:
        raise ParameterError("level mix needs at least one positive weight")
    return out


def build_augmented_set(pairs, per_pair: int, levels, seed: int, mode: str = "unsupervised"):
    """Expand image pairs into deformed training records.

    ``levels`` is a sequence of ``(level, weight)`` items (levels given
    by name or as :class:`IntensityLevel`). Each of the ``per_pair``
    output records draws its level and deformation from a seed derived
    from ``seed`` and the flat record index, so any record can be
    regenerated independently.

    In unsupervised mode the fixed image is deformed and the moving
    image passed through; in supervised mode the moving image is
    deformed and the original moving image becomes the label. The
    generating field is stored as ``truth_field`` in both modes.
    """
    from .pipeline import PairRecord  # local import to avoid a cycle

    if mode not in ("unsupervised", "supervised"):
        raise ParameterError(f"mode must be 'unsupervised' or 'supervised', got {mode!r}")
    if per_pair < 1:
        raise ParameterError(f"per_pair must be >= 1, got {per_pair}")
    mix = _normalise_levels(levels)
    weights = [w for _, w in mix]

    records = []
    for i, pair in enumerate(pairs):
        for k in range(per_pair):
            rec_seed = derive_seed(seed, i * per_pair + k)
            lvl = mix[Xoshiro256pp(derive_seed(rec_seed, 0)).weighted_choice(weights)][0]
            params = sample_deform_params(lvl, derive_seed(rec_seed, 1))
            meta = {
                "level": lvl.name,
                "sigma": params.sigma,
                "alpha": params.alpha,
                "filter_size": params.filter_size,
                "field_seed": params.seed,
            }
            rec_id = f"{pair.id}-aug{k:02d}"
            if mode == "unsupervised":
                deformed, fld = elastic_deform(pair.fixed, params)
                records.append(
                    PairRecord(
                        id=rec_id,
                        fixed=deformed,
                        moving=pair.moving,
                        label=None,
                        truth_field=fld,
                        source=pair.source,
                        meta=meta,
                    )
                )
            else:
                deformed, fld = elastic_deform(pair.moving, params)
                records.append(
                    PairRecord(
                        id=rec_id,
                        fixed=pair.fixed,
                        moving=deformed,
                        label=pair.moving,
                        truth_field=fld,
                        source=pair.source,
                        meta=meta,
                    )
                )
    return records
