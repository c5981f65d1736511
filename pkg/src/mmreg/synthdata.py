"""Synthetic two-modality phantoms with known ground-truth deformations.

Real specimen/section pairs come without ground truth, so correctness is
demonstrated on generated pairs instead. A phantom starts from a base
image of smooth random blobs (sums of Gaussian bumps) plus band-limited
texture, normalised to [0, 1]. Modality A is the base itself. Modality B
applies a monotone piecewise-linear intensity remap and adds its own
mild, independently drawn texture: structures still correspond between A
and B, intensities do not, which keeps mutual information informative
while defeating direct intensity comparison across modalities.

The stored record plays the roles of a registration pair: ``fixed`` is
modality A pushed through a random elastic deformation (with optional
tear/hole artifacts zeroed in afterwards), ``moving`` is modality B, the
label is the undeformed A, and the generating field is kept as
``truth_field`` so predictions can be scored in pixels. Artifacts only
ever remove information, they never move it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .augment import DeformParams, elastic_deform, gaussian_kernel1d, sample_deform_params, _normalise_levels, _smooth_plane
from .errors import ParameterError
from .rng import Xoshiro256pp, derive_seed
from .validation import check_field

__all__ = [
    "Artifact",
    "PhantomParams",
    "EndpointError",
    "generate_phantom_pair",
    "generate_translation_pair",
    "endpoint_error",
    "generate_benchmark_set",
    "DEFAULT_MODALITY_MAP",
    "DEFAULT_BENCHMARK_MIX",
]

#: Default monotone remap: an S-curve that darkens the lower mid-range
#: and brightens the upper one while fixing black, mid-grey, and white.
#: Fixing the mid-level keeps threshold masks of the two modalities cut
#: along the same physical boundary, so overlap scores measure
#: alignment rather than the intensity transfer itself.
DEFAULT_MODALITY_MAP: tuple[tuple[float, float], ...] = (
    (0.0, 0.0),
    (0.25, 0.12),
    (0.5, 0.5),
    (0.8, 0.92),
    (1.0, 1.0),
)

#: Benchmark deformation-level mix (level name, weight).
DEFAULT_BENCHMARK_MIX: tuple[tuple[str, float], ...] = (
    ("low", 40.0),
    ("medium", 40.0),
    ("high", 20.0),
)

# pinned child-stream indices of a phantom seed
_STREAM_BLOBS = 0
_STREAM_TEXTURE_A = 1
_STREAM_TEXTURE_B = 2
_STREAM_ARTIFACT = 3

_TEXTURE_SIGMA = 1.0  # px, correlation length of the band-limited texture
_TEXTURE_FILTER = 9


@dataclass(frozen=True)
class Artifact:
    """Tissue defects burned into the fixed image: none, tears, or holes.

    ``size`` is the streak width for tears and the disc radius for holes,
    in pixels.
    """

    kind: str = "none"
    count: int = 0
    size: float = 0.0

    def __post_init__(self):
        if self.kind not in ("none", "tears", "holes"):
            raise ParameterError(f"artifact kind must be none/tears/holes, got {self.kind!r}")
        if self.kind != "none" and (self.count < 1 or self.size <= 0.0):
            raise ParameterError(f"{self.kind}: need count >= 1 and size > 0")


@dataclass(frozen=True)
class PhantomParams:
    """Everything that determines one phantom pair."""

    width: int
    height: int
    deform: DeformParams
    seed: int
    blob_count: int = 6
    texture_scale: float = 0.4
    edge_sharpness: float = 8.0
    cross_texture: float = 0.05
    modality_map: tuple[tuple[float, float], ...] = DEFAULT_MODALITY_MAP
    artifact: Artifact = Artifact()

    def __post_init__(self):
        if self.width < 32 or self.height < 32:
            raise ParameterError(f"phantom dims must be >= 32, got {self.width}x{self.height}")
        if self.blob_count < 1:
            raise ParameterError(f"blob_count must be >= 1, got {self.blob_count}")
        if self.texture_scale < 0.0 or self.cross_texture < 0.0:
            raise ParameterError("texture amplitudes must be >= 0")
        if self.edge_sharpness < 0.0:
            raise ParameterError(f"edge_sharpness must be >= 0, got {self.edge_sharpness}")
        knots = tuple(self.modality_map)
        if len(knots) < 2 or knots[0][0] != 0.0 or knots[-1][0] != 1.0:
            raise ParameterError("modality_map knots must span x = 0 .. 1")
        xs = [k[0] for k in knots]
        ys = [k[1] for k in knots]
        if any(b <= a for a, b in zip(xs, xs[1:])):
            raise ParameterError("modality_map knot x values must be strictly increasing")
        if any(b < a for a, b in zip(ys, ys[1:])):
            raise ParameterError("modality_map must be monotone (nondecreasing y)")
        if min(ys) < 0.0 or max(ys) > 1.0:
            raise ParameterError("modality_map y values must lie in [0, 1]")


def _band_limited_texture(width: int, height: int, seed: int) -> np.ndarray:
    """Low-pass filtered noise, peak-normalised to [-1, 1]."""
    rng = Xoshiro256pp(seed)
    noise = rng.uniform_signed_array(width * height).reshape(height, width)
    kernel = gaussian_kernel1d(_TEXTURE_FILTER, _TEXTURE_SIGMA)
    tex = _smooth_plane(noise, kernel)
    peak = np.abs(tex).max()
    return tex / peak if peak > 0 else tex


def _blob_base(params: PhantomParams) -> np.ndarray:
    """Sum of Gaussian bumps pushed through a logistic contrast curve.

    The curve (slope ``edge_sharpness``) flattens bump interiors and
    background into plateaus separated by a rim a couple of pixels wide,
    so thresholding either modality picks out the same physical
    boundary. With ``edge_sharpness == 0`` the raw bump sum is kept.
    """
    rng = Xoshiro256pp(derive_seed(params.seed, _STREAM_BLOBS))
    w, h = params.width, params.height
    gx, gy = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    base = np.zeros((h, w), dtype=np.float64)
    scale = min(w, h)
    for _ in range(params.blob_count):
        cx = rng.uniform_in(0.2 * w, 0.8 * w)
        cy = rng.uniform_in(0.2 * h, 0.8 * h)
        r = rng.uniform_in(0.10, 0.22) * scale
        amp = rng.uniform_in(0.6, 1.0)
        base += amp * np.exp(-((gx - cx) ** 2 + (gy - cy) ** 2) / (2.0 * r * r))
    lo, hi = base.min(), base.max()
    if hi > lo:
        base = (base - lo) / (hi - lo)
    k = params.edge_sharpness
    if k > 0.0:
        curved = 1.0 / (1.0 + np.exp(-k * (base - 0.5)))
        lo_c = 1.0 / (1.0 + np.exp(0.5 * k))
        hi_c = 1.0 / (1.0 + np.exp(-0.5 * k))
        base = (curved - lo_c) / (hi_c - lo_c)
    return base


def _remap(img: np.ndarray, knots) -> np.ndarray:
    xs = np.array([k[0] for k in knots], dtype=np.float64)
    ys = np.array([k[1] for k in knots], dtype=np.float64)
    return np.interp(img, xs, ys)


def _tear_mask(params: PhantomParams, rng: Xoshiro256pp) -> np.ndarray:
    w, h = params.width, params.height
    gx, gy = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    mask = np.zeros((h, w), dtype=bool)
    half = params.artifact.size / 2.0
    segments = 5
    for _ in range(params.artifact.count):
        x = rng.uniform_in(0.15 * w, 0.85 * w)
        pts = [(x, 0.0)]
        for s in range(1, segments + 1):
            x = min(max(x + rng.uniform_in(-0.12 * w, 0.12 * w), 0.0), w - 1.0)
            pts.append((x, h * s / segments))
        for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
            vx, vy = x1 - x0, y1 - y0
            denom = vx * vx + vy * vy
            t = np.clip(((gx - x0) * vx + (gy - y0) * vy) / denom, 0.0, 1.0)
            d2 = (gx - (x0 + t * vx)) ** 2 + (gy - (y0 + t * vy)) ** 2
            mask |= d2 <= half * half
    return mask


def _hole_mask(params: PhantomParams, rng: Xoshiro256pp) -> np.ndarray:
    w, h = params.width, params.height
    gx, gy = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    mask = np.zeros((h, w), dtype=bool)
    r = params.artifact.size
    for _ in range(params.artifact.count):
        cx = rng.uniform_in(r, max(r, w - 1.0 - r))
        cy = rng.uniform_in(r, max(r, h - 1.0 - r))
        mask |= (gx - cx) ** 2 + (gy - cy) ** 2 <= r * r
    return mask


def artifact_mask(params: PhantomParams) -> np.ndarray:
    """Boolean mask of the pixels an artifact setting zeroes out."""
    rng = Xoshiro256pp(derive_seed(params.seed, _STREAM_ARTIFACT))
    if params.artifact.kind == "tears":
        return _tear_mask(params, rng)
    if params.artifact.kind == "holes":
        return _hole_mask(params, rng)
    return np.zeros((params.height, params.width), dtype=bool)


def generate_phantom_pair(params: PhantomParams, id: str = "phantom"):
    """Build one phantom registration record (see module docstring).

    With ``alpha == 0``, no artifacts, and an identity remap with zero
    cross-modality texture, fixed and moving come out exactly equal.
    """
    from .pipeline import PairRecord  # local import to avoid a cycle

    base = _blob_base(params)
    tex_a = _band_limited_texture(params.width, params.height, derive_seed(params.seed, _STREAM_TEXTURE_A))
    raw = base + params.texture_scale * tex_a
    lo, hi = raw.min(), raw.max()
    a = (raw - lo) / (hi - lo) if hi > lo else np.zeros_like(raw)

    b = _remap(a, params.modality_map)
    if params.cross_texture > 0.0:
        tex_b = _band_limited_texture(
            params.width, params.height, derive_seed(params.seed, _STREAM_TEXTURE_B)
        )
        b = np.clip(b + params.cross_texture * tex_b, 0.0, 1.0)

    fixed, fld = elastic_deform(a, params.deform)
    mask = artifact_mask(params)
    if mask.any():
        fixed = fixed.copy()
        fixed[mask] = 0.0

    meta = {
        "sigma": params.deform.sigma,
        "alpha": params.deform.alpha,
        "filter_size": params.deform.filter_size,
        "field_seed": params.deform.seed,
        "artifact": params.artifact.kind,
        "phantom_seed": params.seed,
    }
    return PairRecord(
        id=id, fixed=fixed, moving=b, label=a, truth_field=fld, source=id, meta=meta
    )


def generate_translation_pair(seed: int, width: int = 128, height: int = 96, shift: int = 3):
    """Cross-modal pair whose ground truth is a uniform (+shift, 0) field.

    One undeformed phantom is rendered ``shift`` pixels wider than
    requested, then the two modalities are cropped at offsets ``shift``
    (fixed, histology side) and ``0`` (moving, snapshot side). Sampling
    the moving image at ``x + shift`` therefore lands on the same tissue
    as the fixed image at ``x``.
    """
    from .pipeline import PairRecord  # local import to avoid a cycle

    if shift < 0 or width - shift < 32:
        raise ParameterError(f"need 0 <= shift and width - shift >= 32, got shift {shift}, width {width}")
    dp = DeformParams(sigma=6.0, alpha=0.0, filter_size=21, seed=derive_seed(seed, 1))
    rec = generate_phantom_pair(
        PhantomParams(width=width + shift, height=height, deform=dp, seed=derive_seed(seed, 0))
    )
    fixed = rec.fixed[:, shift : shift + width].copy()
    moving = np.asarray(rec.moving)[:, :width].copy()
    label = rec.label[:, :width].copy()
    truth = np.zeros((height, width, 2), dtype=np.float64)
    truth[..., 0] = float(shift)
    return PairRecord(
        id=f"shift{seed:03d}",
        fixed=fixed,
        moving=moving,
        label=label,
        truth_field=truth,
        source=f"shift{seed:03d}",
        meta={"shift": shift, "phantom_seed": seed},
    )


@dataclass(frozen=True)
class EndpointError:
    """Per-pixel Euclidean error statistics between two fields."""

    mean: float
    median: float
    p95: float


def endpoint_error(pred, truth) -> EndpointError:
    """Mean / median / 95th-percentile endpoint error in pixels."""
    fp = check_field(pred, "pred")
    ft = check_field(truth, "truth")
    if fp.shape != ft.shape:
        raise ParameterError(f"field shape mismatch {fp.shape} vs {ft.shape}")
    diff = fp - ft
    norms = np.sqrt(diff[..., 0] ** 2 + diff[..., 1] ** 2)
    return EndpointError(
        mean=float(norms.mean()),
        median=float(np.median(norms)),
        p95=float(np.percentile(norms, 95)),
    )


def generate_benchmark_set(
    n: int = 40,
    levels=DEFAULT_BENCHMARK_MIX,
    seed: int = 0,
    width: int = 128,
    height: int = 96,
    artifact: Artifact = Artifact(),
    out_dir=None,
):
    """Generate ``n`` phantom records with per-record derived seeds.

    Each record draws its deformation level from the weighted mix, then
    its concrete parameters, then its phantom content, all from streams
    derived from ``seed`` and the record index, so the set regenerates
    byte-identically. When ``out_dir`` is given the records are also
    written there as a dataset directory (images, truth fields,
    manifest).
    """
    if n < 1:
        raise ParameterError(f"n must be >= 1, got {n}")
    mix = _normalise_levels(levels)
    weights = [wgt for _, wgt in mix]
    records = []
    for i in range(n):
        rec_seed = derive_seed(seed, i)
        lvl = mix[Xoshiro256pp(derive_seed(rec_seed, 0)).weighted_choice(weights)][0]
        dp = sample_deform_params(lvl, derive_seed(rec_seed, 1))
        pp = PhantomParams(
            width=width,
            height=height,
            deform=dp,
            seed=derive_seed(rec_seed, 2),
            artifact=artifact,
        )
        rec = generate_phantom_pair(pp, id=f"{i:03d}")
        rec.meta["level"] = lvl.name
        records.append(rec)
    if out_dir is not None:
        from .dataio import save_dataset

        save_dataset(out_dir, records)
    return records
