"""Supervised pixel-wise contrastive learning for semantic segmentation."""

from __future__ import annotations

from .config import TrainConfig, load_config
from .data import Dataset, SynthSpec, generate
from .trainer import TrainReport, ablate, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "SynthSpec",
    "TrainConfig",
    "TrainReport",
    "ablate",
    "evaluate",
    "generate",
    "load_config",
    "train",
]
