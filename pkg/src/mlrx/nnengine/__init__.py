"""Minimal reverse-mode autodiff engine with the layers the receiver CNNs use."""

from .checkpoint import load_arrays, save_arrays
from .functional import batch_norm, conv2d, depthwise_conv2d
from .layers import (
    Activation,
    BatchNorm,
    ChannelScale,
    Conv2D,
    Dense,
    LayerSpec,
    Module,
    ResNetBlock,
    SeparableConv2D,
    Sequential,
    SpatialMean,
)
from .optim import Adam
from .tensor import Tensor, bce_with_logits, no_grad

DiffTensor = Tensor

__all__ = [
    "Activation",
    "Adam",
    "BatchNorm",
    "ChannelScale",
    "Conv2D",
    "Dense",
    "DiffTensor",
    "LayerSpec",
    "Module",
    "ResNetBlock",
    "SeparableConv2D",
    "Sequential",
    "SpatialMean",
    "Tensor",
    "batch_norm",
    "bce_with_logits",
    "conv2d",
    "depthwise_conv2d",
    "load_arrays",
    "no_grad",
    "save_arrays",
]
