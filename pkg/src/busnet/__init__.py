"""UNet++ segmentation with LSTM channel attention and a distance-class
auxiliary task, built on a small NumPy reverse-mode autodiff core."""

from .tensor import Tape, Tensor, backward, precision
from .unetpp import ModelConfig
from .model import UNetPPLSTM

__all__ = ["Tape", "Tensor", "backward", "precision", "ModelConfig", "UNetPPLSTM"]
__version__ = "0.1.0"
