"""Weakly supervised multiple-instance learning with built-in heatmaps.

A bag of patch embeddings is mapped to per-pixel class evidence by a
detection stack, damped by a context-suppression stack, masked at an Otsu
threshold and pooled with SmoothMax into bag-level predictions.  Only bag
labels are needed for training; the heatmaps localise the evidence.
"""
from .bags import BagOfPatches
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .evaluation import EvalOptions, EvalReport, evaluate_dataset
from .losses import LossConfig
from .model import ModelConfig, ModelParams, backward_bag, forward_bag
from .synthetic import SynthConfig, generate_synthetic, preset
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "BagOfPatches",
    "EvalOptions",
    "EvalReport",
    "LossConfig",
    "ModelConfig",
    "ModelParams",
    "RunConfig",
    "SynthConfig",
    "TrainConfig",
    "backward_bag",
    "evaluate_dataset",
    "forward_bag",
    "generate_synthetic",
    "load_checkpoint",
    "load_config",
    "preset",
    "save_checkpoint",
    "train",
]
