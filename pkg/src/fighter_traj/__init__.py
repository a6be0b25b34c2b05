"""CNN-LSTM fighter trajectory prediction with input attention and 3-D social pooling."""

from .model import ModelConfig, SceneWindow, TrajNet
from .train import TrainConfig, fit

__all__ = ["ModelConfig", "SceneWindow", "TrajNet", "TrainConfig", "fit"]
__version__ = "0.1.0"
