"""Toy flow-matching transformers with additive, U-Net and softmax depth routing."""
from .backbone import ModelConfig
from .router import Model, RouterConfig
from .train import TrainConfig

__version__ = "0.1.0"

__all__ = ["Model", "ModelConfig", "RouterConfig", "TrainConfig", "__version__"]
