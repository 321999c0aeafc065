"""Attention variants.

The functional forms take per-head tensors shaped (B, H, N, d) and return
``(output, maps)`` so the maps can be inspected; the modules wrap them with
pre-norm, projections and head splitting.
"""

from __future__ import annotations

import numpy as np

from ..tensor import Tensor, ops
from ..tensor import flops as fl
from .layers import LayerNorm, Linear
from .module import Module, parameter


def attention_maps(q: Tensor, k: Tensor, scale: float | None = None) -> Tensor:
    scale = q.shape[-1] ** -0.5 if scale is None else scale
    return ops.softmax(ops.matmul(q, ops.swap_last(k)) * scale, axis=-1)


def mhsa(q: Tensor, k: Tensor, v: Tensor, scale: float | None = None):
    """Scaled dot-product attention per head. Maps are (B, H, N, N)."""
    maps = attention_maps(q, k, scale)
    return ops.matmul(maps, v), maps


def re_attention(maps: Tensor, mixing: Tensor) -> Tensor:
    """Mix attention maps across heads, new[h] = sum_k mixing[h, k] * maps[k],
    then divide each row by its sum so rows stay stochastic."""
    heads = maps.shape[1]
    if mixing.shape != (heads, heads):
        raise ValueError(f"mixing matrix must be {heads}x{heads}, got {mixing.shape}")
    t = ops.transpose(maps, (0, 2, 3, 1))
    mixed = ops.transpose(ops.matmul(t, ops.swap_last(mixing)), (0, 3, 1, 2))
    return mixed / ops.sum_(mixed, axis=-1, keepdims=True)


def xca(q: Tensor, k: Tensor, v: Tensor, temperature: Tensor):
    """Cross-covariance attention: channels attend to channels.

    q, k, v are (B, H, N, d); maps are (B, H, d, d) whatever N is, and
    ``temperature`` broadcasts against them (typically (H, 1, 1)).
    """
    qt = ops.l2_normalize(ops.swap_last(q), axis=-1)
    kt = ops.l2_normalize(ops.swap_last(k), axis=-1)
    maps = ops.softmax(ops.matmul(qt, ops.swap_last(kt)) * temperature, axis=-1)
    out = ops.matmul(maps, ops.swap_last(v))
    return ops.swap_last(out), maps


def split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, inner = x.shape
    return ops.transpose(ops.reshape(x, (b, n, heads, inner // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    b, h, n, d = x.shape
    return ops.reshape(ops.transpose(x, (0, 2, 1, 3)), (b, n, h * d))


def _split_qkv(qkv: Tensor, heads: int):
    b, n, three_inner = qkv.shape
    d = three_inner // (3 * heads)
    parts = ops.transpose(ops.reshape(qkv, (b, n, 3, heads, d)), (2, 0, 3, 1, 4))
    return parts[0], parts[1], parts[2]


class Attention(Module):
    """Pre-norm multi-head self-attention, optionally with re-attention."""

    def __init__(self, dim: int, heads: int, rng, dim_head: int | None = None, reattention: bool = False):
        if dim_head is None:
            if dim % heads:
                raise ValueError(f"dim {dim} not divisible by heads {heads}")
            dim_head = dim // heads
        self.dim, self.heads, self.dim_head = dim, heads, dim_head
        inner = heads * dim_head
        self.norm = LayerNorm(dim)
        self.to_qkv = Linear(dim, 3 * inner, rng, bias=False)
        self.to_out = Linear(inner, dim, rng)
        self.mixing = parameter(np.eye(heads)) if reattention else None
        self.keep_maps = False
        self.last_maps = None

    def forward(self, x):
        q, k, v = _split_qkv(self.to_qkv(self.norm(x)), self.heads)
        scale = self.dim_head ** -0.5
        if self.mixing is None:
            out, maps = mhsa(q, k, v, scale)
        else:
            maps = re_attention(attention_maps(q, k, scale), self.mixing)
            out = ops.matmul(maps, v)
        if self.keep_maps:
            self.last_maps = maps.data
        return self.to_out(merge_heads(out))

    def flops(self, shape, fpm=1.0):
        b, n, _ = shape
        h, d = self.heads, self.dim_head
        total, s = self.norm.flops(shape, fpm)
        c, s = self.to_qkv.flops(s, fpm)
        total += c
        total += fl.matmul(b * h, n, d, n, fpm) + 2 * fl.elementwise(b, h, n, n)
        if self.mixing is not None:
            total += fl.matmul(b * n * n, 1, h, h, fpm) + 2 * fl.elementwise(b, h, n, n)
        total += fl.matmul(b * h, n, n, d, fpm)
        c, s = self.to_out.flops((b, n, h * d), fpm)
        return total + c, s


class XCAttention(Module):
    """Pre-norm cross-covariance attention with a learnable per-head temperature."""

    def __init__(self, dim: int, heads: int, rng, dim_head: int | None = None):
        dim_head = dim // heads if dim_head is None else dim_head
        self.dim, self.heads, self.dim_head = dim, heads, dim_head
        inner = heads * dim_head
        self.norm = LayerNorm(dim)
        self.to_qkv = Linear(dim, 3 * inner, rng, bias=False)
        self.to_out = Linear(inner, dim, rng)
        self.temperature = parameter(np.ones((heads, 1, 1)))
        self.keep_maps = False
        self.last_maps = None

    def forward(self, x):
        q, k, v = _split_qkv(self.to_qkv(self.norm(x)), self.heads)
        out, maps = xca(q, k, v, self.temperature)
        if self.keep_maps:
            self.last_maps = maps.data
        return self.to_out(merge_heads(out))

    def flops(self, shape, fpm=1.0):
        b, n, _ = shape
        h, d = self.heads, self.dim_head
        total, s = self.norm.flops(shape, fpm)
        c, s = self.to_qkv.flops(s, fpm)
        total += c + 2 * fl.elementwise(b, h, d, n)
        total += fl.matmul(b * h, d, n, d, fpm) + 2 * fl.elementwise(b, h, d, d)
        total += fl.matmul(b * h, d, d, n, fpm)
        c, s = self.to_out.flops((b, n, h * d), fpm)
        return total + c, s


class CrossAttention(Module):
    """Queries from ``query`` tokens; keys and values from ``[query, context]``.

    The concatenated sequence shares one pre-norm. Used for class attention
    and for branch fusion.
    """

    def __init__(self, dim: int, heads: int, rng, dim_head: int | None = None):
        dim_head = dim // heads if dim_head is None else dim_head
        self.dim, self.heads, self.dim_head = dim, heads, dim_head
        inner = heads * dim_head
        self.norm = LayerNorm(dim)
        self.to_q = Linear(dim, inner, rng, bias=False)
        self.to_kv = Linear(dim, 2 * inner, rng, bias=False)
        self.to_out = Linear(inner, dim, rng)

    def forward(self, query, context):
        m = query.shape[1]
        seq = self.norm(ops.concat([query, context], axis=1))
        q = split_heads(self.to_q(seq[:, :m]), self.heads)
        kv = self.to_kv(seq)
        b, n, _ = kv.shape
        kv = ops.transpose(ops.reshape(kv, (b, n, 2, self.heads, self.dim_head)), (2, 0, 3, 1, 4))
        out, _ = mhsa(q, kv[0], kv[1], self.dim_head ** -0.5)
        return self.to_out(merge_heads(out))

    def flops(self, query_shape, context_len, fpm=1.0):
        b, m, dim = query_shape
        n = m + context_len
        h, d = self.heads, self.dim_head
        total = fl.elementwise(b, n, dim)
        total += self.to_q.flops((b, m, dim), fpm)[0] + self.to_kv.flops((b, n, dim), fpm)[0]
        total += fl.matmul(b * h, m, d, n, fpm) + 2 * fl.elementwise(b, h, m, n)
        total += fl.matmul(b * h, m, n, d, fpm)
        c, s = self.to_out.flops((b, m, h * d), fpm)
        return total + c, s
