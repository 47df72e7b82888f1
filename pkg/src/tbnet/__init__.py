"""Three-stream boundary-aware segmentation for gray-scale pavement inspection."""

__version__ = "0.1.0"

from .core import (
    ClassTaxonomy,
    ConfigError,
    DataLoadError,
    Dataset,
    NumericError,
    Sample,
    ShapeError,
    TrainConfig,
    config_from_text,
    config_to_text,
    validate_config,
)
from .data import (
    ClassWeights,
    GeneratorSpec,
    compute_class_weights,
    extract_boundary,
    generate_dataset,
    load_dataset,
    resize_sample,
    save_dataset,
)
from .losses import LossReport, boundary_bce, dual_task_loss, weighted_cross_entropy
from .metrics import ConfusionMatrix, MetricsReport, accumulate, compute_metrics
from .network import NetworkOutput, TBNet, init_parameters
from .training import (
    AblationFlags,
    RMSProp,
    TrainState,
    build_model,
    evaluate,
    load_checkpoint,
    predict,
    save_checkpoint,
    train,
)

__all__ = [
    "AblationFlags",
    "ClassTaxonomy",
    "ClassWeights",
    "ConfigError",
    "ConfusionMatrix",
    "DataLoadError",
    "Dataset",
    "GeneratorSpec",
    "LossReport",
    "MetricsReport",
    "NetworkOutput",
    "NumericError",
    "RMSProp",
    "Sample",
    "ShapeError",
    "TBNet",
    "TrainConfig",
    "TrainState",
    "accumulate",
    "boundary_bce",
    "build_model",
    "compute_class_weights",
    "compute_metrics",
    "config_from_text",
    "config_to_text",
    "dual_task_loss",
    "evaluate",
    "extract_boundary",
    "generate_dataset",
    "init_parameters",
    "load_checkpoint",
    "load_dataset",
    "predict",
    "resize_sample",
    "save_checkpoint",
    "save_dataset",
    "train",
    "validate_config",
    "weighted_cross_entropy",
]
