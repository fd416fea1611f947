"""U-Net segmentation with channel-wise cross-attention skip connections,
built on a small numpy reverse-mode autodiff core."""

from .config import ConfigError, ModelConfig
from .tensor import Tensor
from .training import TrainConfig, combined_loss, fit
from .unet import SegmentationNet, build_model

__all__ = [
    "ConfigError",
    "ModelConfig",
    "SegmentationNet",
    "Tensor",
    "TrainConfig",
    "build_model",
    "combined_loss",
    "fit",
]
__version__ = "0.1.0"
