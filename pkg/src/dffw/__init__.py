"""Disjunctive factored four-way conditional RBMs and the single-tensor
baseline, with a spinning-ball trajectory simulator and evaluation harness."""
from .model import (
    FactorBank, LayerDims, LayerState, ModelParams, energy, factor_projection, hidden_input,
    hidden_probs, init_params, label_input, label_probs, visible_input, visible_mean,
)
from .training import TrainConfig, train, train_ffw
from .inference import classify, dataset_energy, estimate_present, predict_multistep
from .data import BallSimConfig, VisiblePartition, build_samples, generate_dataset

__version__ = "0.1.0"

__all__ = [
    "BallSimConfig", "FactorBank", "LayerDims", "LayerState", "ModelParams", "TrainConfig",
    "VisiblePartition", "build_samples", "classify", "dataset_energy", "energy",
    "estimate_present", "factor_projection", "generate_dataset", "hidden_input", "hidden_probs",
    "init_params", "label_input", "label_probs", "predict_multistep", "train", "train_ffw",
    "visible_input", "visible_mean",
]
