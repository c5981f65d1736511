"""Similarity and regularisation losses with analytic gradients.

Mutual information comes in two forms sharing one binning convention
(intensity v falls in bin ``floor(v * bins)``, clamped to the last bin):

* :func:`hmi_hard` counts pixels into a joint histogram and evaluates
  ``sum p(i,j) * log(p(i,j) / (p(i) p(j)))`` in nats. Exact, fast, and
  what the evaluation metrics use, but piecewise constant in the inputs.
* :func:`hmi_soft` spreads each pixel over nearby bins with a Gaussian
  window (std ``parzen_width`` in bin units, truncated at 3 std,
  renormalised per pixel), making the value differentiable in the second
  image. Its ``grad_image`` drives unsupervised registration.

The smoothness term penalises mean squared forward differences of the
field. Total losses combine similarity and smoothness as
``L = L_sim + reg_weight * L_smooth`` with the similarity gradient
chained through the warp, so optimisers only ever see dL/d(field).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .field import warp_backward, warp_bilinear
from .validation import check_field, check_plane, check_same_shape

__all__ = [
    "LossConfig",
    "LossValue",
    "JointHistogram",
    "joint_histogram_hard",
    "hmi_hard",
    "hmi_soft",
    "mse",
    "smoothness",
    "total_loss_unsupervised",
    "total_loss_supervised",
]


@dataclass(frozen=True)
class LossConfig:
    """Knobs shared by the loss functions.

    reg_weight is the smoothness multiplier (the lambda of the combined
    loss), bins the histogram resolution, parzen_width the soft-window
    std in bins.
    """

    reg_weight: float = 1.0
    bins: int = 32
    parzen_width: float = 1.0

    def __post_init__(self):
        if self.reg_weight < 0.0:
            raise ParameterError(f"reg_weight must be >= 0, got {self.reg_weight}")
        if int(self.bins) != self.bins or self.bins < 2:
            raise ParameterError(f"bins must be an integer >= 2, got {self.bins}")
        if not (self.parzen_width > 0.0):
            raise ParameterError(f"parzen_width must be > 0, got {self.parzen_width}")


@dataclass
class LossValue:
    """A scalar loss plus whichever gradients the producing op defines."""

    value: float
    grad_image: np.ndarray | None = None
    grad_field: np.ndarray | None = None


@dataclass
class JointHistogram:
    """Hard joint histogram of two equally binned images."""

    bins: int
    counts: np.ndarray  # (bins, bins) float64, rows index image a

    @property
    def n(self) -> float:
        return float(self.counts.sum())

    @property
    def marginal_a(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def marginal_b(self) -> np.ndarray:
        return self.counts.sum(axis=0)


def _bin_indices(img: np.ndarray, bins: int) -> np.ndarray:
    idx = np.floor(img * bins).astype(np.int64)
    return np.clip(idx, 0, bins - 1)


def joint_histogram_hard(a, b, bins: int = 32) -> JointHistogram:
    """Count pixel pairs into a (bins, bins) joint histogram."""
    ia = check_plane(a, "a")
    ib = check_plane(b, "b")
    check_same_shape(ia, ib, "histogram inputs")
    if int(bins) != bins or bins < 2:
        raise ParameterError(f"bins must be an integer >= 2, got {bins}")
    flat = _bin_indices(ia, bins).ravel() * bins + _bin_indices(ib, bins).ravel()
    counts = np.bincount(flat, minlength=bins * bins).astype(np.float64)
    return JointHistogram(bins=int(bins), counts=counts.reshape(bins, bins))


def _entropy_terms_sum(terms: np.ndarray) -> float:
    # Sum in sorted order: invariant under transposing the histogram, so
    # hmi_hard(a, b) == hmi_hard(b, a) exactly, and slightly more accurate.
    return float(np.sort(terms, axis=None).sum())


def hmi_hard(a, b, bins: int = 32) -> float:
    """Histogram mutual information in nats; always >= 0.

    Zero-count cells contribute nothing (0 log 0 = 0). The tiny negative
    values floating point can produce for independent images are clipped
    to zero.
    """
    hist = joint_histogram_hard(a, b, bins)
    # marginals from the integer counts: cell and marginal probabilities
    # then share rounding, so degenerate cases cancel to exactly zero
    p = hist.counts / hist.n
    pa = hist.marginal_a / hist.n
    pb = hist.marginal_b / hist.n
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.log(p) - np.log(pa)[:, None] - np.log(pb)[None, :]
    # zero the ratio first: p * ratio would be 0 * inf at empty cells
    terms = p * np.where(p > 0.0, ratio, 0.0)
    return max(0.0, _entropy_terms_sum(terms))


def _parzen_weights(values: np.ndarray, bins: int, width: float, want_grad: bool = False):
    """Soft bin assignment for flat intensities; rows sum to 1.

    Bin k receives weight proportional to a Gaussian (std ``width`` in
    bin units, truncated at 3 std) of its distance to the continuous bin
    coordinate ``v * bins - 0.5``. If the truncation window is so narrow
    that it contains no bin, the value falls back to a hard assignment
    to the nearest bin, with zero gradient; this is what makes the soft
    MI converge to the hard MI as the width shrinks.
    """
    c = values * bins - 0.5
    k = np.arange(bins, dtype=np.float64)
    d = k[None, :] - c[:, None]
    inside = np.abs(d) <= 3.0 * width
    g = np.where(inside, np.exp(-0.5 * (d / width) ** 2), 0.0)
    z = g.sum(axis=1)
    empty = z == 0.0
    if np.any(empty):
        nearest = np.clip(np.rint(c[empty]).astype(np.int64), 0, bins - 1)
        g[empty, :] = 0.0
        g[empty, nearest] = 1.0
        z = g.sum(axis=1)
    w = g / z[:, None]
    if not want_grad:
        return w, None
    dg = g * d * (bins / (width * width))
    dz = dg.sum(axis=1)
    dw = (dg * z[:, None] - g * dz[:, None]) / (z * z)[:, None]
    if np.any(empty):
        dw[empty, :] = 0.0
    return w, dw


def _safe_log(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return np.where(p > 0.0, np.log(np.where(p > 0.0, p, 1.0)), 0.0)


def hmi_soft(a, b, cfg: LossConfig) -> LossValue:
    """Parzen-window mutual information, differentiable in ``b``.

    Returns the MI value (nats) and ``grad_image`` = dMI/db. Only the
    second image gets a gradient because that is the warped moving image
    in the registration loss; the fixed image is data.
    """
    ia = check_plane(a, "a")
    ib = check_plane(b, "b")
    check_same_shape(ia, ib, "mutual information inputs")
    n = ia.size
    wa, _ = _parzen_weights(ia.ravel(), cfg.bins, cfg.parzen_width)
    wb, dwb = _parzen_weights(ib.ravel(), cfg.bins, cfg.parzen_width, want_grad=True)
    joint = wa.T @ wb / n
    pa = wa.sum(axis=0) / n
    pb = wb.sum(axis=0) / n
    log_joint = _safe_log(joint)
    log_pa = _safe_log(pa)
    log_pb = _safe_log(pb)
    terms = np.where(joint > 0.0, joint * (log_joint - log_pa[:, None] - log_pb[None, :]), 0.0)
    value = float(terms.sum())
    # dMI/db_p = (1/n) sum_j dwb[p,j] * (sum_i wa[p,i] log P[i,j] - log pb[j]);
    # the constant terms cancel because each dwb row sums to zero. Cells with
    # P == 0 only ever meet dwb == 0, so the masked log is safe.
    inner = wa @ log_joint - log_pb[None, :]
    grad = (dwb * inner).sum(axis=1) / n
    return LossValue(value=value, grad_image=grad.reshape(ia.shape))


def mse(gamma, pred) -> LossValue:
    """Mean squared error against a label; grad_image = 2 (pred - gamma) / n."""
    g = check_plane(gamma, "gamma")
    p = check_plane(pred, "pred")
    check_same_shape(g, p, "mse inputs")
    diff = p - g
    return LossValue(value=float(np.mean(diff * diff)), grad_image=2.0 * diff / diff.size)


def smoothness(field) -> LossValue:
    """Mean squared forward difference of the field components.

    One-sided differences, taken as zero at the last row/column; the sum
    is averaged over pixels, both components, and the axes that actually
    admit a difference (a one-pixel-wide field has no x direction).
    Constant fields score exactly zero. ``grad_field`` is exact.
    """
    fld = check_field(field, "field")
    h, w = fld.shape[:2]
    directions = int(w > 1) + int(h > 1)
    denom = fld.shape[0] * fld.shape[1] * 2 * max(directions, 1)
    dx = fld[:, 1:, :] - fld[:, :-1, :]
    dy = fld[1:, :, :] - fld[:-1, :, :]
    value = (np.sum(dx * dx) + np.sum(dy * dy)) / denom
    grad = np.zeros_like(fld)
    grad[:, :-1, :] -= 2.0 * dx
    grad[:, 1:, :] += 2.0 * dx
    grad[:-1, :, :] -= 2.0 * dy
    grad[1:, :, :] += 2.0 * dy
    grad /= denom
    return LossValue(value=float(value), grad_field=grad)


def total_loss_unsupervised(fixed, moving, field, cfg: LossConfig) -> LossValue:
    """Negated soft MI between fixed and warped moving, plus smoothness.

    ``grad_field`` chains the MI image gradient through the warp and adds
    the weighted smoothness gradient.
    """
    fx = check_plane(fixed, "fixed")
    mv = check_plane(moving, "moving")
    fld = check_field(field, "field")
    check_same_shape(fx, mv, "registration pair")
    check_same_shape(fx, fld, "field")
    warped = warp_bilinear(mv, fld)
    mi = hmi_soft(fx, warped, cfg)
    sm = smoothness(fld)
    grad = warp_backward(mv, fld, -mi.grad_image)
    grad += cfg.reg_weight * sm.grad_field
    return LossValue(value=-mi.value + cfg.reg_weight * sm.value, grad_field=grad)


def total_loss_supervised(gamma, moving, field, cfg: LossConfig) -> LossValue:
    """MSE between label and warped moving, plus smoothness."""
    gm = check_plane(gamma, "gamma")
    mv = check_plane(moving, "moving")
    fld = check_field(field, "field")
    check_same_shape(gm, mv, "registration pair")
    check_same_shape(gm, fld, "field")
    warped = warp_bilinear(mv, fld)
    err = mse(gm, warped)
    sm = smoothness(fld)
    grad = warp_backward(mv, fld, err.grad_image)
    grad += cfg.reg_weight * sm.grad_field
    return LossValue(value=err.value + cfg.reg_weight * sm.value, grad_field=grad)
