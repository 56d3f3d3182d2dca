"""Word-level multimodal fusion with dynamically shifted word embeddings."""

__version__ = "0.1.0"

from .data import AlignedUtterance, EmbeddingTable
from .model import ModelConfig, RavenModel, ShiftRecord
from .synthetic import SyntheticSpec, generate_synthetic
from .training import MetricsReport, TrainConfig, evaluate, train

__all__ = [
    "__version__",
    "AlignedUtterance",
    "EmbeddingTable",
    "ModelConfig",
    "RavenModel",
    "ShiftRecord",
    "SyntheticSpec",
    "generate_synthetic",
    "MetricsReport",
    "TrainConfig",
    "evaluate",
    "train",
]
