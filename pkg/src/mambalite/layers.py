"""Parameterised building blocks wrapping the functional primitives."""

from __future__ import annotations

import math

import numpy as np

from . import functional as F
from .tensor import Module, Parameter, Tensor, default_dtype


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(default_dtype())


def _zeros(shape) -> np.ndarray:
    return np.zeros(shape, dtype=default_dtype())


def _ones(shape) -> np.ndarray:
    return np.ones(shape, dtype=default_dtype())


class Conv2d(Module):
    """k×k convolution with "same" padding for odd kernels."""

    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator,
                 groups: int = 1, bias: bool = True):
        super().__init__()
        if cin % groups or cout % groups:
            raise ValueError(f"groups={groups} must divide cin={cin} and cout={cout}")
        self.cin, self.cout, self.k, self.groups = cin, cout, k, groups
        fan_in = cin // groups * k * k
        self.weight = Parameter(_uniform(rng, (cout, cin // groups, k, k), fan_in))
        self.bias = Parameter(_zeros(cout)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, stride=1, padding=self.k // 2, groups=self.groups)

    def macs(self, h: int, w: int) -> int:
        return self.cout * (self.cin // self.groups) * self.k * self.k * h * w


def depthwise(c: int, rng: np.random.Generator, k: int = 3, bias: bool = True) -> Conv2d:
    return Conv2d(c, c, k, rng, groups=c, bias=bias)


class Linear(Module):
    """Token-wise projection ``x @ W + b`` over the last axis."""

    def __init__(self, fin: int, fout: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.fin, self.fout = fin, fout
        self.weight = Parameter(_uniform(rng, (fin, fout), fin))
        self.bias = Parameter(_zeros(fout)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)

    def macs(self, h: int, w: int) -> int:
        return self.fin * self.fout * h * w


class LayerNorm(Module):
    def __init__(self, c: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = Parameter(_ones(c))
        self.beta = Parameter(_zeros(c))

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gamma, self.beta, self.eps)

    def macs(self, h, w):
        return 0


class GroupNorm(Module):
    def __init__(self, groups: int, c: int, eps: float = 1e-5):
        super().__init__()
        self.groups, self.eps = groups, eps
        self.gamma = Parameter(_ones(c))
        self.beta = Parameter(_zeros(c))

    def forward(self, x: Tensor) -> Tensor:
        return F.group_norm(x, self.groups, self.gamma, self.beta, self.eps)

    def macs(self, h, w):
        return 0


class BatchNorm2d(Module):
    """Batch normalisation with running statistics kept as buffers.

    Running mean/var start at 0/1 so a freshly built model is usable in
    inference mode.
    """

    def __init__(self, c: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.eps, self.momentum = eps, momentum
        self.gamma = Parameter(_ones(c))
        self.beta = Parameter(_zeros(c))
        self.register_buffer("running_mean", _zeros(c))
        self.register_buffer("running_var", _ones(c))

    def forward(self, x: Tensor) -> Tensor:
        running = {"mean": self.running_mean, "var": self.running_var}
        return F.batch_norm2d(x, self.gamma, self.beta, running, self.training,
                              self.eps, self.momentum)

    def macs(self, h, w):
        return 0


def tokens_layer_norm(x: Tensor, ln: LayerNorm) -> Tensor:
    """LayerNorm over the channel axis of a ``B×C×H×W`` map."""
    h, w = x.shape[2], x.shape[3]
    return F.from_tokens(ln(F.to_tokens(x)), h, w)
