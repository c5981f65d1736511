"""Training loops, per-pair optimisation, and checkpointing.

Three registration modes share the data model:

* unsupervised: train the network to maximise soft mutual information
  between the fixed image and the warped moving image,
* supervised: train against a same-modality label with MSE,
* direct: no learning at all; optimise one displacement field per pair
  with Adam over a coarse-to-fine pyramid. Slower per pair but needs no
  training set, which makes it a useful reference.

Determinism is structural: parameter init, the split shuffle, and each
epoch's batch order come from separate streams derived from the config
seed, so a run is reproducible bit for bit and training can resume from
a checkpoint mid-run and continue the identical trajectory. Wall-clock
timings are recorded through an injectable clock for the same reason.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import network
from .errors import DataError, NanLossError, ParameterError
from .evalstats import EvalConfig, evaluate_pairs
from .field import identity_field, upsample_field
from .imagecore import resize_bilinear
from .losses import LossConfig, total_loss_supervised, total_loss_unsupervised
from .rng import Xoshiro256pp, derive_seed
from .validation import check_gray

logger = logging.getLogger(__name__)

__all__ = [
    "PairRecord",
    "TrainConfig",
    "DirectConfig",
    "EpochStats",
    "TrainLog",
    "TrainResult",
    "split_dataset",
    "train_unsupervised",
    "train_supervised",
    "predict_fields",
    "register_with_model",
    "register_direct",
    "save_checkpoint",
    "load_checkpoint",
]

# pinned child-stream indices of the config seed
_STREAM_SPLIT = 0
_STREAM_INIT = 1
_STREAM_BATCH = 2


@dataclass
class PairRecord:
    """One registration example: a fixed/moving pair plus optional extras.

    ``label`` is a same-modality target for supervised training,
    ``truth_field`` the generating deformation when one is known, and
    ``source`` identifies the original pair a record was derived from so
    dataset splits can keep siblings together.
    """

    id: str
    fixed: np.ndarray
    moving: np.ndarray
    label: np.ndarray | None = None
    truth_field: np.ndarray | None = None
    source: str | None = None
    meta: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        self.fixed = check_gray(self.fixed, f"{self.id}: fixed")
        self.moving = check_gray(self.moving, f"{self.id}: moving")
        if self.fixed.shape != self.moving.shape:
            raise ParameterError(
                f"{self.id}: fixed {self.fixed.shape} and moving {self.moving.shape} differ"
            )
        if self.label is not None:
            self.label = check_gray(self.label, f"{self.id}: label")
            if self.label.shape != self.fixed.shape:
                raise ParameterError(f"{self.id}: label shape differs from the pair")
        if self.truth_field is not None and self.truth_field.shape[:2] != self.fixed.shape:
            raise ParameterError(f"{self.id}: truth field shape differs from the pair")
        if self.source is None:
            self.source = self.id


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters and bookkeeping for a training run."""

    mode: str
    epochs: int = 200
    steps_per_epoch: int = 100
    batch_size: int = 16
    lr: float = 0.001
    loss: LossConfig = LossConfig()
    split: tuple[int, int, int] = (360, 90, 115)
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("unsupervised", "supervised", "direct"):
            raise ParameterError(f"mode must be unsupervised/supervised/direct, got {self.mode!r}")
        if self.epochs < 0:
            raise ParameterError(f"epochs must be >= 0, got {self.epochs}")
        if self.steps_per_epoch < 1 or self.batch_size < 1:
            raise ParameterError("steps_per_epoch and batch_size must be >= 1")
        if not (self.lr > 0.0):
            raise ParameterError(f"lr must be > 0, got {self.lr}")
        if len(self.split) != 3 or any(int(s) != s or s < 0 for s in self.split):
            raise ParameterError(f"split must be three nonnegative counts, got {self.split}")

    def to_json_dict(self) -> dict:
        return {
            "mode": self.mode,
            "epochs": self.epochs,
            "steps_per_epoch": self.steps_per_epoch,
            "batch_size": self.batch_size,
            "lr": self.lr,
            "lambda": self.loss.reg_weight,
            "bins": self.loss.bins,
            "parzen_width": self.loss.parzen_width,
            "split": list(self.split),
            "seed": self.seed,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "TrainConfig":
        try:
            loss = LossConfig(
                reg_weight=doc.get("lambda", 1.0),
                bins=doc.get("bins", 32),
                parzen_width=doc.get("parzen_width", 1.0),
            )
            return cls(
                mode=doc["mode"],
                epochs=doc.get("epochs", 200),
                steps_per_epoch=doc.get("steps_per_epoch", 100),
                batch_size=doc.get("batch_size", 16),
                lr=doc.get("lr", 0.001),
                loss=loss,
                split=tuple(doc.get("split", (360, 90, 115))),
                seed=doc.get("seed", 0),
            )
        except KeyError as exc:
            raise DataError(f"train config is missing key {exc}") from exc


@dataclass(frozen=True)
class DirectConfig:
    """Settings for per-pair optimisation over a three-level pyramid.

    ``lr`` is either one step size for every stage or three per-stage
    values (coarse, half, full). The defaults anneal: large steps while
    the coarse stages chase gross displacement, small steps at full
    resolution where sub-pixel accuracy is decided.
    """

    loss: LossConfig = LossConfig(reg_weight=7.0, bins=32, parzen_width=0.75)
    lr: float | tuple[float, float, float] = (0.1, 0.03, 0.005)
    iterations: tuple[int, int, int] = (60, 40, 300)

    def __post_init__(self):
        if any(not (l > 0.0) for l in self.stage_lrs()):
            raise ParameterError(f"lr values must be > 0, got {self.lr}")
        if len(self.iterations) != 3 or any(int(i) != i or i < 0 for i in self.iterations):
            raise ParameterError(f"iterations must be three nonnegative counts, got {self.iterations}")

    def stage_lrs(self) -> tuple[float, float, float]:
        if isinstance(self.lr, (int, float)):
            return (float(self.lr),) * 3
        if len(self.lr) != 3:
            raise ParameterError(f"lr must be one value or three per-stage values, got {self.lr}")
        return tuple(float(l) for l in self.lr)


@dataclass
class EpochStats:
    """One training-log row; ``train_loss`` is None for the baseline row."""

    epoch: int
    train_loss: float | None
    val_loss: float
    val_dice_median: float
    val_mi_median: float
    seconds: float


@dataclass
class TrainLog:
    """Pre-training baseline plus one record per completed epoch."""

    baseline: EpochStats | None = None
    epochs: list[EpochStats] = dc_field(default_factory=list)

    def rows(self) -> list[EpochStats]:
        rows = [] if self.baseline is None else [self.baseline]
        return rows + list(self.epochs)

    def to_csv(self, path) -> None:
        lines = ["epoch,train_loss,val_loss,val_dice_median,val_mi_median,seconds"]
        for r in self.rows():
            train = "" if r.train_loss is None else repr(float(r.train_loss))
            lines.append(
                f"{r.epoch},{train},{float(r.val_loss)!r},{float(r.val_dice_median)!r},"
                f"{float(r.val_mi_median)!r},{float(r.seconds)!r}"
            )
        with open(path, "w", encoding="ascii") as f:
            f.write("\n".join(lines) + "\n")


@dataclass
class TrainResult:
    """Final parameters, optimiser state, and the full log of a run."""

    params: network.NetParams
    state: network.AdamState
    log: TrainLog


def split_dataset(records, cfg: TrainConfig):
    """Deterministic grouped train/val/test split.

    Records are grouped by source id (order of first appearance), the
    group order is shuffled from the config seed, groups are laid out in
    that order, and the sequence is cut at the configured counts. Cuts
    must fall on group boundaries, so records derived from the same
    source never straddle subsets.
    """
    records = list(records)
    total = sum(cfg.split)
    if total != len(records):
        raise ParameterError(f"split {cfg.split} sums to {total}, but there are {len(records)} records")
    order: list[str] = []
    groups: dict[str, list] = {}
    for rec in records:
        if rec.source not in groups:
            groups[rec.source] = []
            order.append(rec.source)
        groups[rec.source].append(rec)
    rng = Xoshiro256pp(derive_seed(cfg.seed, _STREAM_SPLIT))
    rng.shuffle(order)
    flat = [rec for src in order for rec in groups[src]]
    cuts = [cfg.split[0], cfg.split[0] + cfg.split[1]]
    sizes = np.cumsum([len(groups[src]) for src in order])
    for cut in cuts:
        if cut not in (0, total) and cut not in sizes:
            raise ParameterError(
                f"split {cfg.split} cuts through a source group; "
                "counts must align with whole groups"
            )
    return flat[: cuts[0]], flat[cuts[0] : cuts[1]], flat[cuts[1] :]


def _loss_fn(mode: str, cfg: LossConfig):
    if mode == "unsupervised":
        return lambda rec, fld: total_loss_unsupervised(rec.fixed, rec.moving, fld, cfg)
    return lambda rec, fld: total_loss_supervised(rec.label, rec.moving, fld, cfg)


def predict_fields(params, records, batch_size: int = 16):
    """Network displacement fields for each record's (fixed, moving) pair."""
    fields = []
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        batch = np.stack([np.stack([r.fixed, r.moving]) for r in chunk])
        out, _ = network.forward_batch(params, batch)
        fields.extend(np.asarray(out[i], dtype=np.float64) for i in range(len(chunk)))
    return fields


def _validate(params, records, mode, cfg: TrainConfig):
    fields = predict_fields(params, records, cfg.batch_size)
    loss = _loss_fn(mode, cfg.loss)
    values = [loss(rec, fld).value for rec, fld in zip(records, fields)]
    report = evaluate_pairs(records, fields, EvalConfig(bins=cfg.loss.bins))
    return (
        float(np.mean(values)),
        report.aggregates["dice_after"]["median"],
        report.aggregates["mi_after"]["median"],
    )


def _check_records(records, mode: str, what: str):
    if not records:
        raise DataError(f"{what} set is empty")
    if mode == "supervised":
        missing = [r.id for r in records if r.label is None]
        if missing:
            raise DataError(f"supervised training needs labels; {what} records missing them: {missing[:5]}")


def _train(train_records, val_records, cfg: TrainConfig, mode: str, init=None, start_epoch=0, clock=None):
    _check_records(train_records, mode, "train")
    _check_records(val_records, mode, "validation")
    clock = clock or time.perf_counter
    if init is None:
        params = network.init_params(derive_seed(cfg.seed, _STREAM_INIT))
        state = network.AdamState.zeros(params)
    else:
        params, state = init
    loss = _loss_fn(mode, cfg.loss)
    log = TrainLog()
    if start_epoch == 0:
        t0 = clock()
        val_loss, val_dice, val_mi = _validate(params, val_records, mode, cfg)
        log.baseline = EpochStats(0, None, val_loss, val_dice, val_mi, clock() - t0)
    n = len(train_records)
    for epoch in range(start_epoch, cfg.epochs):
        t0 = clock()
        erng = Xoshiro256pp(derive_seed(derive_seed(cfg.seed, _STREAM_BATCH), epoch))
        epoch_losses = []
        for step in range(cfg.steps_per_epoch):
            batch = [train_records[erng.next_below(n)] for _ in range(cfg.batch_size)]
            stacked = np.stack([np.stack([r.fixed, r.moving]) for r in batch])
            fields, tape = network.forward_batch(params, stacked)
            grad_fields = np.empty(fields.shape, dtype=np.float64)
            step_values = []
            for i, rec in enumerate(batch):
                lv = loss(rec, np.asarray(fields[i], dtype=np.float64))
                step_values.append(lv.value)
                grad_fields[i] = lv.grad_field
            step_loss = float(np.mean(step_values))
            if not np.isfinite(step_loss):
                raise NanLossError(f"non-finite loss at epoch {epoch + 1}, step {step + 1}")
            grads = network.backward_batch(params, tape, grad_fields / len(batch))
            params, state = network.adam_step(params, grads, state, cfg.lr)
            epoch_losses.append(step_loss)
        val_loss, val_dice, val_mi = _validate(params, val_records, mode, cfg)
        stats = EpochStats(
            epoch + 1, float(np.mean(epoch_losses)), val_loss, val_dice, val_mi, clock() - t0
        )
        log.epochs.append(stats)
        logger.info(
            "epoch %d: train %.5f, val %.5f, dice %.4f, mi %.4f",
            stats.epoch, stats.train_loss, stats.val_loss, stats.val_dice_median, stats.val_mi_median,
        )
    return TrainResult(params=params, state=state, log=log)


def train_unsupervised(train_records, val_records, cfg: TrainConfig, init=None, start_epoch=0, clock=None) -> TrainResult:
    """Train with the negated soft-MI loss (no labels needed).

    With ``epochs == 0`` the initial parameters come back untouched and
    the log holds only the baseline row; the zero-initialised flow head
    makes those baseline metrics equal the unregistered metrics. Pass
    ``init=(params, adam_state)`` and ``start_epoch`` to resume a run:
    batch order is derived per epoch, so the trajectory continues as if
    never interrupted.
    """
    if cfg.mode != "unsupervised":
        raise ParameterError(f"config mode is {cfg.mode!r}, expected 'unsupervised'")
    return _train(train_records, val_records, cfg, "unsupervised", init, start_epoch, clock)


def train_supervised(train_records, val_records, cfg: TrainConfig, init=None, start_epoch=0, clock=None) -> TrainResult:
    """Train against same-modality labels with the MSE loss."""
    if cfg.mode != "supervised":
        raise ParameterError(f"config mode is {cfg.mode!r}, expected 'supervised'")
    return _train(train_records, val_records, cfg, "supervised", init, start_epoch, clock)


def register_with_model(params: network.NetParams, fixed, moving) -> np.ndarray:
    """Predict the displacement field for one pair with a trained network."""
    fields, _ = network.forward(params, fixed, moving)
    return fields


def _stage_sizes(w: int, h: int) -> list[tuple[int, int]]:
    sizes = [(max(2, w // 4), max(2, h // 4)), (max(2, w // 2), max(2, h // 2)), (w, h)]
    out = []
    for s in sizes:
        if not out or s != out[-1]:
            out.append(s)
    return out


def register_direct(fixed, moving, cfg: DirectConfig = DirectConfig()) -> tuple[np.ndarray, list[float]]:
    """Optimise a single pair's field directly, coarse to fine.

    Runs Adam on the unsupervised loss over quarter, half, and full
    resolution, upsampling the field between stages. Returns the final
    field and the per-iteration loss values (all stages concatenated).
    """
    fx = check_gray(fixed, "fixed")
    mv = check_gray(moving, "moving")
    if fx.shape != mv.shape:
        raise ParameterError(f"fixed {fx.shape} and moving {mv.shape} differ")
    h, w = fx.shape
    sizes = _stage_sizes(w, h)
    iters = list(cfg.iterations)[-len(sizes) :]
    lrs = list(cfg.stage_lrs())[-len(sizes) :]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    fld = None
    losses: list[float] = []
    for stage, ((sw, sh), n_iter, lr) in enumerate(zip(sizes, iters, lrs)):
        fs = np.clip(resize_bilinear(fx, sw, sh), 0.0, 1.0)
        ms = np.clip(resize_bilinear(mv, sw, sh), 0.0, 1.0)
        fld = identity_field(sw, sh) if fld is None else upsample_field(fld, sw, sh)
        m = np.zeros_like(fld)
        v = np.zeros_like(fld)
        for it in range(n_iter):
            lv = total_loss_unsupervised(fs, ms, fld, cfg.loss)
            if not np.isfinite(lv.value):
                raise NanLossError(f"register_direct: non-finite loss at stage {stage + 1}, iteration {it + 1}")
            losses.append(lv.value)
            g = lv.grad_field
            t = it + 1
            m = beta1 * m + (1.0 - beta1) * g
            v = beta2 * v + (1.0 - beta2) * (g * g)
            fld = fld - lr * (m / (1.0 - beta1**t)) / (np.sqrt(v / (1.0 - beta2**t)) + eps)
    return fld, losses


def save_checkpoint(path, params: network.NetParams, state: network.AdamState | None = None) -> None:
    """Write parameters (and optimiser state if given) as a NETP file."""
    network.save_params(path, params, state)


def load_checkpoint(path):
    """Read a NETP file back; returns ``(params, state_or_None)``."""
    return network.load_params(path)
