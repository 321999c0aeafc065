"""Regression heads and the backbone + head model."""

from __future__ import annotations

from ..tensor import ops
from ..tensor import flops as fl
from .layers import Linear
from .module import Module, parameter, trunc_normal


class FCHead(Module):
    kind = "fc"

    def __init__(self, in_features, rng):
        self.fc = Linear(in_features, 1, rng)

    def forward(self, feats):
        return ops.reshape(self.fc(feats), (feats.shape[0],))

    def flops(self, shape, fpm=1.0):
        return self.fc.flops(shape, fpm)[0], (shape[0],)


class GAPHead(Module):
    """Mean over all tokens, optional hidden ReLU layer, then a scalar."""

    kind = "gap"

    def __init__(self, dim, rng, hidden: int = 0):
        self.hidden = Linear(dim, hidden, rng) if hidden else None
        self.fc = Linear(hidden or dim, 1, rng)

    def forward(self, tokens):
        x = ops.mean(tokens, axis=1)
        if self.hidden is not None:
            x = ops.relu(self.hidden(x))
        return ops.reshape(self.fc(x), (tokens.shape[0],))

    def flops(self, shape, fpm=1.0):
        b, _, d = shape
        total = fl.elementwise(*shape)
        s = (b, d)
        if self.hidden is not None:
            c, s = self.hidden.flops(s, fpm)
            total += c + fl.elementwise(*s)
        return total + self.fc.flops(s, fpm)[0], (b,)


class TokenHead(Module):
    """A learnable count token; the encoder prepends it and its output
    embedding is mapped to a scalar."""

    kind = "token"

    def __init__(self, dim, rng):
        self.token = parameter(trunc_normal(rng, (dim,)))
        self.fc = Linear(dim, 1, rng)

    def forward(self, token_out):
        return ops.reshape(self.fc(token_out), (token_out.shape[0],))

    def flops(self, shape, fpm=1.0):
        return self.fc.flops(shape, fpm)[0], (shape[0],)


def regression_head(features, head: Module):
    return head(features)


class CountingModel(Module):
    """Backbone followed by a regression head: (B, 3, S, S) -> (B,) counts."""

    def __init__(self, config, backbone, head):
        self.config, self.backbone, self.head = config, backbone, head

    def forward(self, images):
        if self.head.kind == "token":
            return self.head(self.backbone(images, lead=self.head.token)[:, 0])
        out = self.backbone(images)
        if self.backbone.output == "tokens" and self.head.kind == "fc":
            out = out[:, 0]
        return self.head(out)

    def flops(self, shape, fpm=1.0):
        total, s = self.backbone.flops(shape, fpm, lead=self.head.kind == "token")
        if self.backbone.output == "tokens" and self.head.kind != "gap":
            s = (s[0], s[2])
        return total + self.head.flops(s, fpm)[0], (shape[0],)
