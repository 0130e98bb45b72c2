"""Occlusion-aware attention for masked face recognition, on a small numpy autodiff core."""
from .model import FaceModel, ModelConfig, Variant
from .training import TrainConfig, train

__all__ = ["FaceModel", "ModelConfig", "Variant", "TrainConfig", "train"]
__version__ = "0.1.0"
