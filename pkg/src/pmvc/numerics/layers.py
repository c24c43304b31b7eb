"""Layer modules built on :mod:`pmvc.numerics.ops`."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import ops
from .optim import kaiming_init
from .tensor import Parameter, ShapeError, Tensor


class Module:
    """Container of parameters, buffers and child modules.

    Children are discovered from instance attributes: a :class:`Parameter`,
    a :class:`Module`, or a list of modules. Buffers (non-trainable state such
    as batch-norm running statistics) are registered in ``self.buffers``.
    """

    def __init__(self):
        self.training = True
        self.buffers: dict[str, np.ndarray] = {}

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield key, value
            elif isinstance(value, list) and value and isinstance(value[0], Module):
                for i, child in enumerate(value):
                    yield f"{key}.{i}", child

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + key, value
        for key, child in self.children():
            yield from child.named_parameters(f"{prefix}{key}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, value in self.buffers.items():
            yield prefix + key, value
        for key, child in self.children():
            yield from child.named_buffers(f"{prefix}{key}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5, dtype=np.float32):
        super().__init__()
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.buffers["running_mean"] = np.zeros(channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.batch_norm(
            x, self.gamma, self.beta, self.buffers["running_mean"], self.buffers["running_var"],
            self.training, self.momentum, self.eps,
        )


class Conv2d(Module):
    """Convolution, optional batch norm, optional activation (one table row)."""

    def __init__(self, cin: int, cout: int, kernel: int, stride: int = 1, dilation: int = 1,
                 batchnorm: bool = False, act: str | None = None, rng: np.random.Generator | None = None,
                 name: str = "conv", dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.name = name
        self.stride, self.dilation, self.act = stride, dilation, act
        self.weight = Parameter(kaiming_init((kernel, kernel, cin, cout), kernel * kernel * cin, rng, dtype))
        self.bias = None if batchnorm else Parameter(np.zeros(cout, dtype=dtype))
        self.bn = BatchNorm(cout, dtype=dtype) if batchnorm else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.conv2d(x, self.weight, self.bias, self.stride, self.dilation, name=self.name)
        if self.bn is not None:
            y = self.bn(y)
        return ops.activation(y, self.act)


class Deconv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, stride: int = 2, batchnorm: bool = False,
                 act: str | None = None, rng: np.random.Generator | None = None, name: str = "deconv",
                 dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.name = name
        self.stride, self.act = stride, act
        fan_in = kernel * kernel * cin // (stride * stride) or 1
        self.weight = Parameter(kaiming_init((kernel, kernel, cout, cin), fan_in, rng, dtype))
        self.bias = None if batchnorm else Parameter(np.zeros(cout, dtype=dtype))
        self.bn = BatchNorm(cout, dtype=dtype) if batchnorm else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.conv_transpose2d(x, self.weight, self.bias, self.stride, name=self.name)
        if self.bn is not None:
            y = self.bn(y)
        return ops.activation(y, self.act)


@dataclass
class ConvLstmState:
    hidden: Tensor
    cell: Tensor

    def __post_init__(self):
        if self.hidden.shape != self.cell.shape:
            raise ShapeError(f"ConvLSTM state: hidden {self.hidden.shape} != cell {self.cell.shape}")

    @classmethod
    def zeros(cls, n: int, h: int, w: int, channels: int, dtype=np.float32) -> "ConvLstmState":
        z = np.zeros((n, h, w, channels), dtype=dtype)
        return cls(Tensor(z), Tensor(z.copy()))


def conv_lstm_step(x: Tensor, state: ConvLstmState, weight: Tensor, bias: Tensor | None,
                   name: str = "convlstm") -> tuple[Tensor, ConvLstmState]:
    """One convolutional LSTM update.

    ``weight`` maps concat(x, h) to the four gates stacked on the channel axis
    in the order input, forget, output, candidate.
    """
    if x.shape[:3] != state.hidden.shape[:3]:
        raise ShapeError(f"{name}: input {x.shape} and state {state.hidden.shape} differ spatially")
    ch = state.hidden.shape[-1]
    if weight.shape[-1] != 4 * ch:
        raise ShapeError(f"{name}: weights produce {weight.shape[-1]} gate channels, state has {ch}")
    z = ops.conv2d(ops.concat_channels([x, state.hidden]), weight, bias, name=name)
    i = ops.sigmoid(z[..., 0 * ch : 1 * ch])
    f = ops.sigmoid(z[..., 1 * ch : 2 * ch])
    o = ops.sigmoid(z[..., 2 * ch : 3 * ch])
    g = ops.tanh(z[..., 3 * ch : 4 * ch])
    cell = ops.add(ops.mul(f, state.cell), ops.mul(i, g))
    hidden = ops.mul(o, ops.tanh(cell))
    return hidden, ConvLstmState(hidden, cell)


class ConvLSTMCell(Module):
    def __init__(self, cin: int, channels: int, kernel: int = 3, rng: np.random.Generator | None = None,
                 name: str = "convlstm", dtype=np.float32):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.name = name
        self.channels = channels
        fan_in = kernel * kernel * (cin + channels)
        self.weight = Parameter(kaiming_init((kernel, kernel, cin + channels, 4 * channels), fan_in, rng, dtype))
        bias = np.zeros(4 * channels, dtype=dtype)
        bias[channels : 2 * channels] = 1.0  # forget gate starts open
        self.bias = Parameter(bias)

    def zero_state(self, x: Tensor) -> ConvLstmState:
        n, h, w, _ = x.shape
        return ConvLstmState.zeros(n, h, w, self.channels, x.dtype)

    def __call__(self, x: Tensor, state: ConvLstmState | None = None) -> tuple[Tensor, ConvLstmState]:
        if state is None:
            state = self.zero_state(x)
        return conv_lstm_step(x, state, self.weight, self.bias, self.name)


class ResBlock(Module):
    """conv3x3+BN+ReLU -> conv3x3+ReLU -> add input."""

    def __init__(self, channels: int, rng: np.random.Generator | None = None, name: str = "resblock",
                 dtype=np.float32):
        super().__init__()
        self.conv1 = Conv2d(channels, channels, 3, batchnorm=True, act="relu", rng=rng, name=f"{name}.conv1", dtype=dtype)
        self.conv2 = Conv2d(channels, channels, 3, batchnorm=False, act="relu", rng=rng, name=f"{name}.conv2", dtype=dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.add(x, self.conv2(self.conv1(x)))


class ConvBlock(Module):
    """Four parallel dilated 3x3 convs (dilation 1, 2, 4, 8), BN+ReLU each, concatenated."""

    DILATIONS = (1, 2, 4, 8)

    def __init__(self, cin: int, branch_channels: int, rng: np.random.Generator | None = None,
                 name: str = "convblock", dtype=np.float32):
        super().__init__()
        self.branches = [
            Conv2d(cin, branch_channels, 3, dilation=d, batchnorm=True, act="relu", rng=rng,
                   name=f"{name}.dil{d}", dtype=dtype)
            for d in self.DILATIONS
        ]
        self.out_channels = branch_channels * len(self.DILATIONS)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.concat_channels([branch(x) for branch in self.branches])


class Sequential(Module):
    def __init__(self, layers: list[Module]):
        super().__init__()
        self.layers = layers

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x
