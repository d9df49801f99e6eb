"""stemvit: a desk-scale lab for ViT stem ablations and scaled-ReLU analysis."""

from .tensor import Tensor, Tape, backward, finite_diff_grad
from .model import ModelConfig, Model, build_model, cross_entropy_loss
from .train import TrainConfig, run_training, load_dataset

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "finite_diff_grad",
    "ModelConfig",
    "Model",
    "build_model",
    "cross_entropy_loss",
    "TrainConfig",
    "run_training",
    "load_dataset",
]

__version__ = "0.1.0"
