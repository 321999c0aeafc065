"""Closed-form op costs, mirroring what the primitives report at runtime.

A multiply-accumulate costs ``fpm`` (flops per MAC); bias adds, activations,
normalisations, softmax and other elementwise work cost one per element.
"""

from math import prod


def linear(rows: int, k: int, n: int, bias: bool = True, fpm: float = 1.0) -> float:
    return rows * k * n * fpm + (rows * n if bias else 0)


def matmul(batch: int, m: int, k: int, n: int, fpm: float = 1.0) -> float:
    return batch * m * k * n * fpm


def conv2d(batch: int, cin: int, cout: int, hout: int, wout: int, k: int,
           bias: bool = True, fpm: float = 1.0) -> float:
    out = batch * cout * hout * wout
    return out * cin * k * k * fpm + (out if bias else 0)


def elementwise(*shape) -> float:
    return prod(shape)


def max_pool(out_elements: int, k: int) -> float:
    return out_elements * k * k
