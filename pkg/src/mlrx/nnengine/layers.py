"""Layers needed by the receiver CNNs."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .functional import batch_norm, conv2d, depthwise_conv2d
from .tensor import Tensor


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    filters: int = 0
    kernel: tuple[int, int] = (1, 1)
    dilation: tuple[int, int] = (1, 1)
    activation: str | None = None

    def __post_init__(self):
        if min(self.kernel) < 1 or min(self.dilation) < 1:
            raise ValueError("kernel and dilation must be >= 1")


class Module:
    """Base class: parameters are Tensor attributes, sub-modules are walked."""

    def __call__(self, x, training: bool = False):
        return self.forward(x, training)

    def forward(self, x, training: bool = False):
        raise NotImplementedError

    def named_children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def _own_params(self) -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._own_params():
            yield prefix + name, p
        for name, child in self.named_children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in getattr(self, "buffers", {}).items():
            yield prefix + name, value
        for name, child in self.named_children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        for name, p in self.named_parameters(prefix):
            if name not in state:
                raise KeyError(f"missing parameter {name}")
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=p.dtype)
        for name, b in self.named_buffers(prefix):
            if name not in state:
                raise KeyError(f"missing buffer {name}")
            b[...] = state[name]


class Activation(Module):
    FUNCS = {"relu": T.relu, "elu": T.elu, "sigmoid": T.sigmoid}

    def __init__(self, kind: str):
        if kind not in self.FUNCS:
            raise ValueError(f"unknown activation {kind!r}")
        self.kind = kind

    def forward(self, x, training=False):
        return self.FUNCS[self.kind](x)


class Conv2D(Module):
    def __init__(self, c_in, filters, kernel=(1, 1), dilation=(1, 1), activation=None, rng=None, zero_init=False):
        rng = rng or np.random.default_rng()
        kh, kw = kernel
        shape = (kh, kw, c_in, filters)
        w = np.zeros(shape) if zero_init else glorot_uniform(rng, shape, kh * kw * c_in, kh * kw * filters)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(filters), requires_grad=True)
        self.dilation = tuple(dilation)
        self.act = Activation(activation) if activation else None

    def forward(self, x, training=False):
        out = conv2d(x, self.weight, self.bias, self.dilation)
        return self.act(out) if self.act else out


class SeparableConv2D(Module):
    """Depthwise spatial filter per channel, then a biased 1x1 mix."""

    def __init__(self, c_in, filters, kernel=(3, 3), dilation=(1, 1), rng=None):
        rng = rng or np.random.default_rng()
        kh, kw = kernel
        self.depthwise = Tensor(
            glorot_uniform(rng, (kh, kw, c_in), kh * kw * c_in, kh * kw), requires_grad=True
        )
        self.pointwise = Tensor(glorot_uniform(rng, (1, 1, c_in, filters), c_in, filters), requires_grad=True)
        self.bias = Tensor(np.zeros(filters), requires_grad=True)
        self.dilation = tuple(dilation)

    def forward(self, x, training=False):
        return conv2d(depthwise_conv2d(x, self.depthwise, self.dilation), self.pointwise, self.bias)


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.99, eps: float = 1e-3):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.buffers = {"running_mean": np.zeros(channels), "running_var": np.ones(channels)}
        self.momentum, self.eps = momentum, eps

    def forward(self, x, training=False):
        running = [self.buffers["running_mean"], self.buffers["running_var"]]
        return batch_norm(x, self.gamma, self.beta, self.eps, running, self.momentum, training)


class ResNetBlock(Module):
    """``x + sepconv(relu(batchnorm(x)))``."""

    def __init__(self, channels, kernel, dilation, rng=None):
        self.bn = BatchNorm(channels)
        self.conv = SeparableConv2D(channels, channels, kernel, dilation, rng)

    def forward(self, x, training=False):
        return x + self.conv(T.relu(self.bn(x, training)), training)


class Dense(Module):
    """Flatten all but the batch axis, then affine."""

    def __init__(self, n_in, units, rng=None, zero_init=False):
        rng = rng or np.random.default_rng()
        w = np.zeros((n_in, units)) if zero_init else glorot_uniform(rng, (n_in, units), n_in, units)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(units), requires_grad=True)

    def forward(self, x, training=False):
        x = T.as_tensor(x)
        return x.reshape(x.shape[0], -1) @ self.weight + self.bias


class SpatialMean(Module):
    """Average over H and W, keeping (N, C)."""

    def forward(self, x, training=False):
        return T.mean(x, axis=(1, 2))


class ChannelScale(Module):
    """Fixed per-channel input scaling (not trained)."""

    def __init__(self, scale: Sequence[float]):
        self.scale = np.asarray(scale, dtype=float)

    def forward(self, x, training=False):
        return x * self.scale


class Sequential(Module):
    def __init__(self, layers: Sequence[Module]):
        self.layers = list(layers)

    def forward(self, x, training=False):
        for layer in self.layers:
            x = layer(x, training)
        return x
