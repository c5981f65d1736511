"""Deformable registration of multi-modal 2D image pairs.

The package aligns a moving image to a fixed image of a different
modality by predicting a dense per-pixel displacement field, either
with a small trained network (unsupervised mutual-information or
supervised MSE objective) or by optimising a single pair directly.
Everything is deterministic from explicit seeds, including training.
"""

from .augment import (
    DEFAULT_LEVELS,
    DeformParams,
    IntensityLevel,
    build_augmented_set,
    elastic_deform,
    gaussian_kernel1d,
    gaussian_smooth_field,
    random_unit_field,
    sample_deform_params,
)
from .dataio import load_dataset, save_dataset
from .errors import DataError, DecodeError, MmregError, NanLossError, ParameterError
from .experiment import (
    EXPERIMENT_ALPHA_SCALE,
    ExperimentResult,
    build_experiment_set,
    experiment_levels,
    phantom_bases,
    run_experiment,
)
from .estimators import DirectRegistration, SupervisedRegistration, UnsupervisedRegistration
from .evalstats import (
    EvalConfig,
    EvalReport,
    MannWhitneyResult,
    MiMetric,
    binarize,
    dice,
    evaluate_pairs,
    mann_whitney_u,
    mi_metric,
)
from .field import (
    compose_fields,
    identity_field,
    load_ddf,
    save_ddf,
    upsample_field,
    warp_bilinear,
)
from .imagecore import (
    LUMA_WEIGHTS,
    load_pgm,
    load_png,
    resize_bilinear,
    save_pgm,
    to_gray_saturation,
    to_gray_weighted,
)
from .losses import (
    JointHistogram,
    LossConfig,
    LossValue,
    hmi_hard,
    hmi_soft,
    joint_histogram_hard,
    mse,
    smoothness,
    total_loss_supervised,
    total_loss_unsupervised,
)
from .network import AdamState, NetParams, adam_step, init_params, load_params, save_params
from .pipeline import (
    DirectConfig,
    EpochStats,
    PairRecord,
    TrainConfig,
    TrainLog,
    TrainResult,
    load_checkpoint,
    predict_fields,
    register_direct,
    register_with_model,
    save_checkpoint,
    split_dataset,
    train_supervised,
    train_unsupervised,
)
from .rng import Xoshiro256pp, derive_seed, splitmix64
from .synthdata import (
    Artifact,
    EndpointError,
    PhantomParams,
    artifact_mask,
    endpoint_error,
    generate_benchmark_set,
    generate_phantom_pair,
    generate_translation_pair,
)

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_LEVELS",
    "AdamState",
    "Artifact",
    "DataError",
    "DecodeError",
    "DeformParams",
    "DirectConfig",
    "DirectRegistration",
    "EndpointError",
    "EpochStats",
    "EXPERIMENT_ALPHA_SCALE",
    "ExperimentResult",
    "EvalConfig",
    "EvalReport",
    "IntensityLevel",
    "JointHistogram",
    "LUMA_WEIGHTS",
    "LossConfig",
    "LossValue",
    "MannWhitneyResult",
    "MiMetric",
    "MmregError",
    "NanLossError",
    "NetParams",
    "PairRecord",
    "ParameterError",
    "PhantomParams",
    "SupervisedRegistration",
    "TrainConfig",
    "TrainLog",
    "TrainResult",
    "UnsupervisedRegistration",
    "Xoshiro256pp",
    "adam_step",
    "artifact_mask",
    "binarize",
    "build_augmented_set",
    "build_experiment_set",
    "compose_fields",
    "derive_seed",
    "dice",
    "elastic_deform",
    "endpoint_error",
    "evaluate_pairs",
    "experiment_levels",
    "gaussian_kernel1d",
    "gaussian_smooth_field",
    "generate_benchmark_set",
    "generate_phantom_pair",
    "generate_translation_pair",
    "hmi_hard",
    "hmi_soft",
    "identity_field",
    "init_params",
    "joint_histogram_hard",
    "load_checkpoint",
    "load_dataset",
    "load_ddf",
    "load_params",
    "load_pgm",
    "load_png",
    "mann_whitney_u",
    "mi_metric",
    "mse",
    "phantom_bases",
    "predict_fields",
    "random_unit_field",
    "register_direct",
    "register_with_model",
    "run_experiment",
    "resize_bilinear",
    "sample_deform_params",
    "save_checkpoint",
    "save_dataset",
    "save_ddf",
    "save_params",
    "save_pgm",
    "smoothness",
    "split_dataset",
    "splitmix64",
    "to_gray_saturation",
    "to_gray_weighted",
    "total_loss_supervised",
    "total_loss_unsupervised",
    "train_supervised",
    "train_unsupervised",
    "upsample_field",
    "warp_bilinear",
]
