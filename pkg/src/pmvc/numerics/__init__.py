"""Minimal float32 tensor library with reverse-mode autodiff (NHWC layout)."""

from . import ops
from .layers import (
    BatchNorm,
    Conv2d,
    ConvBlock,
    ConvLSTMCell,
    ConvLstmState,
    Deconv2d,
    Module,
    ResBlock,
    Sequential,
    conv_lstm_step,
)
from .optim import adam_step, kaiming_init, step_decay
from .rng import make_rng
from .tensor import NonFiniteError, Parameter, ShapeError, Tensor, backward, no_grad, zero_grad

__all__ = [
    "BatchNorm",
    "Conv2d",
    "ConvBlock",
    "ConvLSTMCell",
    "ConvLstmState",
    "Deconv2d",
    "Module",
    "NonFiniteError",
    "Parameter",
    "ResBlock",
    "Sequential",
    "ShapeError",
    "Tensor",
    "adam_step",
    "backward",
    "conv_lstm_step",
    "kaiming_init",
    "make_rng",
    "no_grad",
    "ops",
    "step_decay",
    "zero_grad",
]
