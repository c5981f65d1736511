"""Estimator-style wrappers over the functional training core.

These follow the familiar fit/predict/transform contract so the package
slots into existing experiment harnesses: hyperparameters are
constructor arguments, ``fit`` learns state and stores it on trailing-
underscore attributes, ``get_params``/``set_params`` come from the
scikit-learn base class and make the estimators cloneable and
grid-searchable. The heavy lifting stays in :mod:`mmreg.pipeline`.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from . import network, pipeline
from .errors import ParameterError
from .evalstats import EvalConfig, evaluate_pairs
from .field import warp_bilinear
from .losses import LossConfig

__all__ = [
    "UnsupervisedRegistration",
    "SupervisedRegistration",
    "DirectRegistration",
]


class _NetworkRegistration(BaseEstimator):
    """Shared plumbing for the two learned-model estimators."""

    _mode = ""

    def __init__(self, epochs=200, steps_per_epoch=100, batch_size=16, lr=0.001,
                 reg_weight=1.0, bins=32, parzen_width=1.0, seed=0):
        self.epochs = epochs
        self.steps_per_epoch = steps_per_epoch
        self.batch_size = batch_size
        self.lr = lr
        self.reg_weight = reg_weight
        self.bins = bins
        self.parzen_width = parzen_width
        self.seed = seed

    def _config(self, n_train: int, n_val: int) -> pipeline.TrainConfig:
        return pipeline.TrainConfig(
            mode=self._mode,
            epochs=self.epochs,
            steps_per_epoch=self.steps_per_epoch,
            batch_size=self.batch_size,
            lr=self.lr,
            loss=LossConfig(reg_weight=self.reg_weight, bins=self.bins,
                            parzen_width=self.parzen_width),
            split=(n_train, n_val, 0),
            seed=self.seed,
        )

    def fit(self, records, val_records=None, clock=None):
        """Train on ``records``; validation defaults to the training set."""
        records = list(records)
        val = records if val_records is None else list(val_records)
        cfg = self._config(len(records), len(val))
        train_fn = (pipeline.train_unsupervised if self._mode == "unsupervised"
                    else pipeline.train_supervised)
        result = train_fn(records, val, cfg, clock=clock)
        self.params_ = result.params
        self.state_ = result.state
        self.log_ = result.log
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise ParameterError(f"this {type(self).__name__} instance is not fitted yet")

    def predict(self, records) -> list[np.ndarray]:
        """Displacement field for each record, fixed-image frame."""
        self._check_fitted()
        return pipeline.predict_fields(self.params_, list(records), self.batch_size)

    def transform(self, records) -> list[np.ndarray]:
        """Each record's moving image warped into its fixed frame."""
        records = list(records)
        return [warp_bilinear(rec.moving, fld)
                for rec, fld in zip(records, self.predict(records))]

    def evaluate(self, records, bins=None, method="otsu", threshold=None):
        """Before/after metric report on held-out records."""
        records = list(records)
        cfg = EvalConfig(bins=self.bins if bins is None else bins,
                         method=method, threshold=threshold)
        return evaluate_pairs(records, self.predict(records), cfg)

    def save(self, path):
        self._check_fitted()
        pipeline.save_checkpoint(path, self.params_, self.state_)

    def load(self, path):
        """Load parameters from a checkpoint; marks the estimator fitted."""
        params, state = pipeline.load_checkpoint(path)
        self.params_ = params
        self.state_ = state if state is not None else network.AdamState.zeros(params)
        self.log_ = pipeline.TrainLog()
        return self


class UnsupervisedRegistration(_NetworkRegistration):
    """Learned registration trained with the soft mutual-information loss.

    Needs only fixed/moving pairs, no ground truth, so it applies when
    the two modalities cannot be compared by intensity directly.
    """

    _mode = "unsupervised"


class SupervisedRegistration(_NetworkRegistration):
    """Learned registration trained with MSE against same-modality labels.

    Every training record must carry ``label``: the target image the
    warped moving image should match, in the moving image's modality.
    """

    _mode = "supervised"


class DirectRegistration(BaseEstimator):
    """Per-pair optimisation; ``fit`` is a no-op kept for API symmetry."""

    def __init__(self, iterations=(60, 40, 300), lr=(0.1, 0.03, 0.005),
                 reg_weight=7.0, bins=32, parzen_width=0.75):
        self.iterations = iterations
        self.lr = lr
        self.reg_weight = reg_weight
        self.bins = bins
        self.parzen_width = parzen_width

    def _config(self) -> pipeline.DirectConfig:
        return pipeline.DirectConfig(
            loss=LossConfig(reg_weight=self.reg_weight, bins=self.bins,
                            parzen_width=self.parzen_width),
            lr=self.lr,
            iterations=tuple(self.iterations),
        )

    def fit(self, records=None, y=None):
        return self

    def predict(self, records) -> list[np.ndarray]:
        cfg = self._config()
        return [pipeline.register_direct(rec.fixed, rec.moving, cfg)[0]
                for rec in records]

    def transform(self, records) -> list[np.ndarray]:
        records = list(records)
        return [warp_bilinear(rec.moving, fld)
                for rec, fld in zip(records, self.predict(records))]

    def evaluate(self, records, bins=None, method="otsu", threshold=None):
        records = list(records)
        cfg = EvalConfig(bins=self.bins if bins is None else bins,
                         method=method, threshold=threshold)
        return evaluate_pairs(records, self.predict(records), cfg)
