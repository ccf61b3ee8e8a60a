"""Gradient-boosted trees with first-order, Newton, and gradient-regularized
Newton training, plus the diagnostics that make their convergence behaviour
observable."""

__version__ = "0.1.0"

from .boosting import (
    BoostConfig,
    Ensemble,
    IterationRecord,
    TrainResult,
    audit_iteration,
    initial_prediction,
    load_ensemble,
    newton_1d_lab,
    predict_ensemble,
    save_ensemble,
    train,
)
from .data_io import Dataset, load_csv, split, synthesize
from .losses import (
    DriftVariant,
    LossModel,
    bce,
    boosting_space_constant,
    cce,
    charbonnier,
    drift_loss,
    mse,
    newton_drift,
    regularity_constants,
)
from .trees import Tree, fit_tree, predict, scale

__all__ = [
    "BoostConfig",
    "Dataset",
    "DriftVariant",
    "Ensemble",
    "IterationRecord",
    "LossModel",
    "TrainResult",
    "Tree",
    "audit_iteration",
    "bce",
    "boosting_space_constant",
    "cce",
    "charbonnier",
    "drift_loss",
    "fit_tree",
    "initial_prediction",
    "load_csv",
    "load_ensemble",
    "mse",
    "newton_1d_lab",
    "newton_drift",
    "predict",
    "predict_ensemble",
    "regularity_constants",
    "save_ensemble",
    "scale",
    "split",
    "synthesize",
    "train",
]
