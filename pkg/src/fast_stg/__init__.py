"""Long-horizon spatial-temporal graph forecasting with agent attention and GLU experts."""

from .model import FaST, ForwardTrace, ModelConfig, NonFiniteError
from .tensor import Tensor
from .training import TrainConfig, evaluate, train

__all__ = [
    "FaST",
    "ForwardTrace",
    "ModelConfig",
    "NonFiniteError",
    "Tensor",
    "TrainConfig",
    "evaluate",
    "train",
]
__version__ = "0.1.0"
