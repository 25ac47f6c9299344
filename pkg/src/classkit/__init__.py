"""Desk-scale salient object detection with cross-level attention and supervision."""

from .losses import RegionConfig, combined_loss, multi_level_loss
from .metrics import evaluate_dataset
from .model import ClassMini, ModelConfig, build
from .tensor import Tensor, no_grad
from .train import TrainConfig, train_loop

__version__ = "0.1.0"

__all__ = ["ClassMini", "ModelConfig", "RegionConfig", "Tensor", "TrainConfig", "build", "combined_loss",
           "evaluate_dataset", "multi_level_loss", "no_grad", "train_loop"]
