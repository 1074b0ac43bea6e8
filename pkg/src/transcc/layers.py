"""Parameterized layers and the lightweight module tree they live in.

Modules register children simply by attribute assignment; the tree is
discovered by scanning ``__dict__`` in insertion order, which makes parameter
and checkpoint ordering deterministic for a fixed construction sequence.
Lists/tuples of modules are traversed with ``name.index`` naming.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import functional as F
from .errors import InvalidRateError
from .tensor import Tensor, power

__all__ = [
    "Parameter",
    "Buffer",
    "Module",
    "he_uniform",
    "Linear",
    "Conv2d",
    "ConvTranspose2d",
    "BatchNorm2d",
    "LayerNorm",
    "Dropout",
]


class Parameter(Tensor):
    """A trainable tensor; always participates in gradient tracking."""

    __slots__ = ()

    def __init__(self, data) -> None:
        super().__init__(data, requires_grad=True)


class Buffer:
    """Non-trained named state (running statistics); checkpointed, no grads."""

    __slots__ = ("data",)

    def __init__(self, data) -> None:
        self.data = np.asarray(data)


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Module:
    """Base class: forward logic plus parameter/buffer discovery."""

    def __init__(self) -> None:
        self.training = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in self.__dict__.items():
            if isinstance(value, (Parameter, Buffer, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Buffer, Module)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, child in self._children():
            full = f"{prefix}{name}"
            if isinstance(child, Parameter):
                yield full, child
            elif isinstance(child, Module):
                yield from child.named_parameters(f"{full}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, object]]:
        """Parameters and buffers, in stable construction order (checkpoint order)."""
        for name, child in self._children():
            full = f"{prefix}{name}"
            if isinstance(child, (Parameter, Buffer)):
                yield full, child
            elif isinstance(child, Module):
                yield from child.named_tensors(f"{full}.")

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self._children():
            if isinstance(child, Module):
                child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    """Affine map on the last axis. weight: (D_out, D_in), y = x @ W.T + b."""

    def __init__(
        self,
        in_features: int,
        out_features: int,
        rng: np.random.Generator,
        dtype=np.float32,
    ) -> None:
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(
            he_uniform(rng, (out_features, in_features), in_features, dtype)
        )
        self.bias = Parameter(np.zeros(out_features, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim == 2:
            return F.linear(x, self.weight, self.bias)
        lead = x.shape[:-1]
        flat = x.reshape((-1, self.in_features))
        out = F.linear(flat, self.weight, self.bias)
        return out.reshape(lead + (self.out_features,))


class Conv2d(Module):
    """2-D convolution layer. weight: (C_out, C_in/groups, K, K)."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
        groups: int = 1,
        dtype=np.float32,
    ) -> None:
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.groups = groups
        fan_in = (in_channels // groups) * kernel * kernel
        self.weight = Parameter(
            he_uniform(
                rng,
                (out_channels, in_channels // groups, kernel, kernel),
                fan_in,
                dtype,
            )
        )
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(
            x,
            self.weight,
            self.bias,
            stride=self.stride,
            padding=self.padding,
            groups=self.groups,
        )


class ConvTranspose2d(Module):
    """Transposed convolution. weight: (C_in, C_out, K, K); K=2, s=2 doubles."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int = 2,
        stride: int = 2,
        rng: np.random.Generator | None = None,
        dtype=np.float32,
    ) -> None:
        super().__init__()
        self.stride = stride
        # Per-output fan-in: each output pixel sees (K/s)^2 taps per channel.
        fan_in = max(in_channels * kernel * kernel // (stride * stride), 1)
        self.weight = Parameter(
            he_uniform(rng, (in_channels, out_channels, kernel, kernel), fan_in, dtype)
        )
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return F.conv_transpose2d(x, self.weight, self.bias, stride=self.stride)


class BatchNorm2d(Module):
    """Channel-wise batch normalization over (B, H, W) with running stats."""

    def __init__(
        self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32
    ) -> None:
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.running_mean = Buffer(np.zeros(channels, dtype=dtype))
        self.running_var = Buffer(np.ones(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        c = self.gamma.shape[0]
        if self.training:
            mu = x.mean(axis=(0, 2, 3), keepdims=True)
            centered = x - mu
            var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
            m = self.momentum
            self.running_mean.data = (1 - m) * self.running_mean.data + m * mu.data.reshape(c)
            self.running_var.data = (1 - m) * self.running_var.data + m * var.data.reshape(c)
            normalized = centered * power(var + self.eps, -0.5)
        else:
            mean = self.running_mean.data.reshape(1, c, 1, 1)
            inv = 1.0 / np.sqrt(self.running_var.data.reshape(1, c, 1, 1) + self.eps)
            normalized = (x - Tensor(mean)) * Tensor(inv)
        return normalized * self.gamma.reshape((1, c, 1, 1)) + self.beta.reshape(
            (1, c, 1, 1)
        )


class LayerNorm(Module):
    """Normalization over the last (embedding) axis, per token."""

    def __init__(self, dim: int, eps: float = 1e-6, dtype=np.float32) -> None:
        super().__init__()
        self.eps = eps
        self.gamma = Parameter(np.ones(dim, dtype=dtype))
        self.beta = Parameter(np.zeros(dim, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        normalized = centered * power(var + self.eps, -0.5)
        return normalized * self.gamma + self.beta


class Dropout(Module):
    """Inverted dropout driven by a private generator (reproducible per build)."""

    def __init__(self, rate: float, rng: np.random.Generator) -> None:
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise InvalidRateError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self._rng = np.random.default_rng(int(rng.integers(2**63)))

    def forward(self, x: Tensor) -> Tensor:
        if not self.training or self.rate == 0.0:
            return x
        return F.dropout(x, self.rate, self._rng)
