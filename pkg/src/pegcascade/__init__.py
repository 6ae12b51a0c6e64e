"""Cascade-size prediction from topic-aware user preferences and a gated
graph-attention influence network, on a small numpy autodiff engine."""

from .autodiff import Tape, Tensor, finite_difference_check
from .data import Dataset, load_dataset
from .metrics import MetricReport, compute_metrics
from .model import VARIANTS, ModelConfig, PEGModel
from .synth import SynthConfig, generate, simulate_world
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "MetricReport",
    "ModelConfig",
    "PEGModel",
    "SynthConfig",
    "Tape",
    "Tensor",
    "TrainConfig",
    "VARIANTS",
    "compute_metrics",
    "finite_difference_check",
    "generate",
    "load_checkpoint",
    "load_dataset",
    "save_checkpoint",
    "simulate_world",
    "train",
]
