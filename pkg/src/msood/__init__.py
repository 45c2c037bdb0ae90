"""Hierarchical vision-language out-of-distribution detection.

Trains a lightweight residual adapter and per-scale text biases over frozen
multi-scale image embeddings, mines pseudo-outliers from entropy-gain
statistics, and scores images with entropy-filtered multi-scale alignment.
"""

from .alignment import AlignmentConfig, PredictionSet, predict
from .bundle import Bundle, BundleManifest, SyntheticSpec, generate_synthetic, load_bundle, write_bundle
from .config import AblationFlags, TrainConfig, config_hash
from .detector import EvalReport, ScoredItem, evaluate, score_bundle
from .errors import (
    ConfigError,
    ContractViolation,
    DataError,
    FormatError,
    MsoodError,
    NumericalError,
    TruncationError,
)
from .hierarchy import HierarchyState, ModelParams, fuse
from .objective import LossBreakdown, batch_loss, batch_loss_and_grads, finite_difference_check
from .pseudo_ood import PseudoOodSet, mine
from .trainer import TrainResult, TrainState, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "AblationFlags",
    "AlignmentConfig",
    "Bundle",
    "BundleManifest",
    "ConfigError",
    "ContractViolation",
    "DataError",
    "EvalReport",
    "FormatError",
    "HierarchyState",
    "LossBreakdown",
    "ModelParams",
    "MsoodError",
    "NumericalError",
    "PredictionSet",
    "PseudoOodSet",
    "ScoredItem",
    "SyntheticSpec",
    "TrainConfig",
    "TrainResult",
    "TrainState",
    "TruncationError",
    "__version__",
    "batch_loss",
    "batch_loss_and_grads",
    "config_hash",
    "evaluate",
    "finite_difference_check",
    "fuse",
    "generate_synthetic",
    "load_bundle",
    "load_checkpoint",
    "mine",
    "predict",
    "save_checkpoint",
    "score_bundle",
    "train",
    "write_bundle",
]
