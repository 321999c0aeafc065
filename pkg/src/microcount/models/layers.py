"""Basic layers."""

from __future__ import annotations

from math import prod

import numpy as np

from ..tensor import ops
from ..tensor import flops as fl
from .module import Module, kaiming_normal, parameter, trunc_normal


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng, bias: bool = True, std: float = 0.02):
        self.in_features, self.out_features = in_features, out_features
        self.weight = parameter(trunc_normal(rng, (in_features, out_features), std))
        self.bias = parameter(np.zeros(out_features)) if bias else None

    def forward(self, x):
        return ops.linear(x, self.weight, self.bias)

    def flops(self, shape, fpm=1.0):
        rows = prod(shape[:-1])
        cost = fl.linear(rows, self.in_features, self.out_features, self.bias is not None, fpm)
        return cost, tuple(shape[:-1]) + (self.out_features,)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = parameter(np.ones(dim))
        self.shift = parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x):
        return ops.layernorm(x, self.gain, self.shift, self.eps)

    def flops(self, shape, fpm=1.0):
        return fl.elementwise(*shape), tuple(shape)


class FeedForward(Module):
    """Pre-norm two-layer MLP with GELU."""

    def __init__(self, dim: int, hidden: int, rng):
        self.norm = LayerNorm(dim)
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def forward(self, x):
        return self.fc2(ops.gelu(self.fc1(self.norm(x))))

    def flops(self, shape, fpm=1.0):
        total, s = self.norm.flops(shape, fpm)
        c, s = self.fc1.flops(s, fpm)
        total += c + fl.elementwise(*s)
        c, s = self.fc2.flops(s, fpm)
        return total + c, s


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, rng, stride: int = 1, padding: int = 0,
                 bias: bool = True):
        self.cin, self.cout, self.kernel, self.stride, self.padding = cin, cout, kernel, stride, padding
        self.weight = parameter(kaiming_normal(rng, (cout, cin, kernel, kernel), cout * kernel * kernel))
        self.bias = parameter(np.zeros(cout)) if bias else None

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def out_hw(self, h, w):
        k, s, p = self.kernel, self.stride, self.padding
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def flops(self, shape, fpm=1.0):
        b, _, h, w = shape
        ho, wo = self.out_hw(h, w)
        cost = fl.conv2d(b, self.cin, self.cout, ho, wo, self.kernel, self.bias is not None, fpm)
        return cost, (b, self.cout, ho, wo)


class BatchNorm2d(Module):
    buffers = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gain = parameter(np.ones(channels))
        self.shift = parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)
        self.momentum, self.eps = momentum, eps

    def forward(self, x):
        return ops.batchnorm2d(x, self.gain, self.shift, self.running_mean, self.running_var,
                               self.training, self.momentum, self.eps)

    def flops(self, shape, fpm=1.0):
        return fl.elementwise(*shape), tuple(shape)


class MaxPool2d(Module):
    def __init__(self, kernel: int, stride: int | None = None, padding: int = 0):
        self.kernel, self.stride, self.padding = kernel, stride or kernel, padding

    def forward(self, x):
        return ops.max_pool2d(x, self.kernel, self.stride, self.padding)

    def flops(self, shape, fpm=1.0):
        b, c, h, w = shape
        k, s, p = self.kernel, self.stride, self.padding
        ho, wo = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
        return fl.max_pool(b * c * ho * wo, k), (b, c, ho, wo)
