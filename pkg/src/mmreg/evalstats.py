"""Registration quality metrics and nonparametric statistics.

Alignment of a pair is summarised two ways: overlap of binarised
foregrounds (Dice) and hard-histogram mutual information, reported both
raw (nats) and normalised by the mean marginal entropy so values are
comparable across images. Before/after-registration columns are compared
with the two-sided Mann-Whitney U test.

The U test follows standard statistical-package behaviour: midranks for
ties, and the exact null distribution (no ties, smaller sample <= 8) or
the normal approximation with tie-corrected variance and a 0.5
continuity correction otherwise. Being rank-based, it is invariant under
strictly increasing transformations of the values.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .field import warp_bilinear
from .losses import hmi_hard, joint_histogram_hard
from .validation import check_plane

__all__ = [
    "EvalConfig",
    "EvalReport",
    "MannWhitneyResult",
    "MiMetric",
    "binarize",
    "dice",
    "mi_metric",
    "mann_whitney_u",
    "evaluate_pairs",
]


@dataclass(frozen=True)
class EvalConfig:
    """Metric settings: histogram bins and the binarisation rule."""

    bins: int = 32
    method: str = "otsu"
    threshold: float | None = None

    def __post_init__(self):
        if int(self.bins) != self.bins or self.bins < 2:
            raise ParameterError(f"bins must be an integer >= 2, got {self.bins}")
        if self.method not in ("otsu", "fixed"):
            raise ParameterError(f"binarisation method must be 'otsu' or 'fixed', got {self.method!r}")
        if self.method == "fixed" and self.threshold is None:
            raise ParameterError("fixed binarisation needs a threshold")


def binarize(img, method: str = "otsu", threshold: float | None = None) -> np.ndarray:
    """Foreground mask of a grayscale image.

    ``otsu`` maximises between-class variance over the 256 split points
    of a 256-bin histogram (ties take the lowest split; a constant image
    has no split and comes back all background). ``fixed`` marks values
    strictly above the given threshold.
    """
    arr = check_plane(img, "image")
    if method == "fixed":
        if threshold is None:
            raise ParameterError("fixed binarisation needs a threshold")
        return arr > threshold
    if method != "otsu":
        raise ParameterError(f"binarisation method must be 'otsu' or 'fixed', got {method!r}")

    idx = np.clip(np.floor(arr * 256.0).astype(np.int64), 0, 255)
    counts = np.bincount(idx.ravel(), minlength=256).astype(np.float64)
    total = counts.sum()
    p = counts / total
    centers = (np.arange(256) + 0.5) / 256.0
    omega0 = np.cumsum(p)[:-1]  # class probabilities for split k = 1..255
    mu_cum = np.cumsum(p * centers)
    mu_total = mu_cum[-1]
    omega1 = 1.0 - omega0
    with np.errstate(invalid="ignore", divide="ignore"):
        mu0 = np.where(omega0 > 0, mu_cum[:-1] / omega0, 0.0)
        mu1 = np.where(omega1 > 0, (mu_total - mu_cum[:-1]) / omega1, 0.0)
    var_between = omega0 * omega1 * (mu0 - mu1) ** 2
    best = float(var_between.max())
    if best <= 0.0:
        return np.zeros_like(arr, dtype=bool)
    k = int(np.argmax(var_between)) + 1  # lowest maximising split
    return idx >= k


def dice(a, b) -> float:
    """Dice overlap of two boolean masks; both empty counts as 1."""
    ma = np.asarray(a)
    mb = np.asarray(b)
    if ma.shape != mb.shape:
        raise ParameterError(f"mask shape mismatch {ma.shape} vs {mb.shape}")
    if ma.dtype != bool or mb.dtype != bool:
        raise ParameterError("dice expects boolean masks")
    na = int(ma.sum())
    nb = int(mb.sum())
    if na + nb == 0:
        return 1.0
    inter = int(np.logical_and(ma, mb).sum())
    return 2.0 * inter / (na + nb)


def _marginal_entropy(counts: np.ndarray) -> float:
    p = counts / counts.sum()
    nz = p[p > 0.0]
    return float(-(nz * np.log(nz)).sum())


@dataclass(frozen=True)
class MiMetric:
    raw: float
    normalized: float


def mi_metric(a, b, bins: int = 32) -> MiMetric:
    """Raw MI in nats plus the symmetric normalisation 2 MI / (H(a) + H(b)).

    The normalised value is defined as 0 when either marginal entropy is
    zero (constant image); identical non-constant images score 1.
    """
    raw = hmi_hard(a, b, bins)
    hist = joint_histogram_hard(a, b, bins)
    ha = _marginal_entropy(hist.marginal_a)
    hb = _marginal_entropy(hist.marginal_b)
    if ha <= 0.0 or hb <= 0.0:
        return MiMetric(raw=raw, normalized=0.0)
    return MiMetric(raw=raw, normalized=2.0 * raw / (ha + hb))


# --- Mann-Whitney U -------------------------------------------------------


@dataclass(frozen=True)
class MannWhitneyResult:
    u: float  # U statistic of the first sample
    p: float  # two-sided p-value
    method: str  # "exact" or "normal"


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _exact_u_counts(n: int, m: int) -> np.ndarray:
    """Null distribution of U as arrangement counts, u = 0..n*m.

    Built with the q-Pascal recurrence for Gaussian binomials, which is
    the generating function of the lattice-path count behind U.
    """
    rows: list[np.ndarray | None] = [None] * (n + 1)
    rows[0] = np.array([1.0])
    for total in range(1, n + m + 1):
        top = min(n, total)
        for k in range(top, 0, -1):
            if k == total:
                rows[k] = np.array([1.0])
                continue
            left = rows[k - 1]
            right = rows[k]
            size = k * (total - k) + 1
            out = np.zeros(size)
            out[: left.size] += left
            out[k : k + right.size] += right
            rows[k] = out
    return rows[n]


def mann_whitney_u(x, y) -> MannWhitneyResult:
    """Two-sided Mann-Whitney U test; returns the first sample's U.

    Exact enumeration of the null distribution when there are no ties
    and the smaller sample has at most 8 values, otherwise the normal
    approximation with tie-corrected variance and continuity correction.
    All-tied data degenerates to p = 1.
    """
    xa = np.asarray(x, dtype=np.float64).ravel()
    ya = np.asarray(y, dtype=np.float64).ravel()
    if xa.size == 0 or ya.size == 0:
        raise ParameterError("mann_whitney_u needs nonempty samples")
    if not (np.all(np.isfinite(xa)) and np.all(np.isfinite(ya))):
        raise ParameterError("mann_whitney_u: samples contain non-finite values")
    n, m = xa.size, ya.size
    combined = np.concatenate([xa, ya])
    ranks = _midranks(combined)
    u_x = float(ranks[:n].sum() - n * (n + 1) / 2.0)

    _, tie_counts = np.unique(combined, return_counts=True)
    has_ties = bool(np.any(tie_counts > 1))

    if not has_ties and min(n, m) <= 8:
        counts = _exact_u_counts(n, m)
        total = counts.sum()
        u_int = int(round(u_x))
        cdf_lo = counts[: u_int + 1].sum() / total
        cdf_hi = counts[u_int:].sum() / total
        p = min(1.0, 2.0 * min(cdf_lo, cdf_hi))
        return MannWhitneyResult(u=u_x, p=p, method="exact")

    big_n = n + m
    mu = n * m / 2.0
    tie_term = float(((tie_counts**3) - tie_counts).sum())
    var = n * m / 12.0 * ((big_n + 1) - tie_term / (big_n * (big_n - 1)))
    if var <= 0.0:
        return MannWhitneyResult(u=u_x, p=1.0, method="normal")
    z = (max(u_x, n * m - u_x) - mu - 0.5) / math.sqrt(var)
    p = min(1.0, 2.0 * 0.5 * math.erfc(z / math.sqrt(2.0)))
    return MannWhitneyResult(u=u_x, p=p, method="normal")


# --- pairwise evaluation --------------------------------------------------

_COLUMNS = ("dice_before", "dice_after", "mi_before", "mi_after", "nmi_before", "nmi_after")
_FAMILIES = {"dice": ("dice_before", "dice_after"), "mi": ("mi_before", "mi_after"), "nmi": ("nmi_before", "nmi_after")}


@dataclass
class EvalReport:
    """Per-pair metric rows plus aggregates and significance tests."""

    rows: list[dict]
    aggregates: dict[str, dict[str, float]]
    tests: dict[str, dict[str, float]]
    config: dict

    def to_json(self, path) -> None:
        doc = {
            "rows": self.rows,
            "aggregates": self.aggregates,
            "tests": self.tests,
            "config": self.config,
        }
        with open(path, "w", encoding="ascii") as f:
            json.dump(doc, f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def from_json(cls, path) -> "EvalReport":
        with open(path, "r", encoding="ascii") as f:
            doc = json.load(f)
        return cls(
            rows=doc["rows"],
            aggregates=doc["aggregates"],
            tests=doc["tests"],
            config=doc.get("config", {}),
        )

    def to_csv(self, path) -> None:
        lines = ["id," + ",".join(_COLUMNS)]
        for row in self.rows:
            lines.append(row["id"] + "," + ",".join(repr(float(row[c])) for c in _COLUMNS))
        for stat in ("median", "q1", "q3", "iqr"):
            lines.append(stat + "," + ",".join(repr(self.aggregates[c][stat]) for c in _COLUMNS))
        with open(path, "w", encoding="ascii") as f:
            f.write("\n".join(lines) + "\n")

    def violin_csv(self, path) -> None:
        """Raw metric columns, one row per pair, for distribution plots."""
        lines = [",".join(_COLUMNS)]
        for row in self.rows:
            lines.append(",".join(repr(float(row[c])) for c in _COLUMNS))
        with open(path, "w", encoding="ascii") as f:
            f.write("\n".join(lines) + "\n")


def _quartiles(values: list[float]) -> dict[str, float]:
    arr = np.asarray(values, dtype=np.float64)
    q1, med, q3 = (float(np.percentile(arr, q)) for q in (25, 50, 75))
    return {"median": med, "q1": q1, "q3": q3, "iqr": q3 - q1}


def evaluate_pairs(pairs, fields, cfg: EvalConfig = EvalConfig()) -> EvalReport:
    """Before/after metrics for records and their predicted fields.

    ``fields`` aligns with ``pairs``; "before" compares fixed against the
    raw moving image, "after" against the moving image warped by the
    field. A zero field therefore reproduces the before columns exactly.
    """
    pairs = list(pairs)
    fields = list(fields)
    if len(pairs) != len(fields):
        raise ParameterError(f"{len(pairs)} pairs but {len(fields)} fields")
    rows = []
    for rec, fld in zip(pairs, fields):
        mask_f = binarize(rec.fixed, cfg.method, cfg.threshold)
        mask_m = binarize(rec.moving, cfg.method, cfg.threshold)
        warped = warp_bilinear(rec.moving, fld)
        mask_w = binarize(warped, cfg.method, cfg.threshold)
        before = mi_metric(rec.fixed, rec.moving, cfg.bins)
        after = mi_metric(rec.fixed, warped, cfg.bins)
        rows.append(
            {
                "id": rec.id,
                "dice_before": dice(mask_f, mask_m),
                "dice_after": dice(mask_f, mask_w),
                "mi_before": before.raw,
                "mi_after": after.raw,
                "nmi_before": before.normalized,
                "nmi_after": after.normalized,
            }
        )
    aggregates = {c: _quartiles([r[c] for r in rows]) for c in _COLUMNS}
    tests = {}
    for family, (col_b, col_a) in _FAMILIES.items():
        res = mann_whitney_u([r[col_b] for r in rows], [r[col_a] for r in rows])
        tests[family] = {"u": res.u, "p": res.p, "method": res.method}
    config = {"bins": cfg.bins, "method": cfg.method, "threshold": cfg.threshold}
    return EvalReport(rows=rows, aggregates=aggregates, tests=tests, config=config)
