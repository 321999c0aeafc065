"""Tensor type, graph bookkeeping and the reverse pass.

Elements are float32. Every differentiable op builds its output through
``make_result``, which records the parents and a closure mapping the output
gradient to one gradient per parent. Leaf tensors (no parents) that require
gradients accumulate into ``.grad``; intermediate gradients live only for the
duration of one ``backward`` call, so calling it twice on the same graph adds
the gradients twice.
"""

from __future__ import annotations

import contextlib
import hashlib
import threading

import numpy as np

DTYPE = np.float32

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class FlopCounter:
    """Accumulates the cost of every op executed while it is active.

    A multiply-accumulate costs ``flops_per_mac``; every other arithmetic
    element operation costs one.
    """

    def __init__(self, flops_per_mac: float = 1.0):
        self.flops_per_mac = flops_per_mac
        self.total = 0.0

    def __enter__(self):
        stack = getattr(_state, "counters", None)
        if stack is None:
            stack = _state.counters = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.counters.remove(self)
        return False


def count_elementwise(n: int) -> None:
    for c in getattr(_state, "counters", ()):
        c.total += n


def count_macs(n: int) -> None:
    for c in getattr(_state, "counters", ()):
        c.total += n * c.flops_per_mac


class ActivationPattern:
    """Fingerprint of the branch taken by every piecewise op (relu masks,
    max-pool winners, signs) executed inside the block. Two evaluations with
    equal signatures lie on the same smooth piece. ``margin`` is the smallest
    distance of any such op from switching branch."""

    def __init__(self):
        self._hash = hashlib.blake2b(digest_size=16)
        self.margin = float("inf")

    def __enter__(self):
        stack = getattr(_state, "patterns", None)
        if stack is None:
            stack = _state.patterns = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.patterns.remove(self)
        return False

    @property
    def signature(self) -> str:
        return self._hash.hexdigest()


def record_pattern(branch: np.ndarray, margin=None) -> None:
    """``margin`` is a callable returning the distance to the nearest branch
    switch; it is only evaluated while a pattern is being recorded."""
    stack = getattr(_state, "patterns", None)
    if stack:
        data = np.ascontiguousarray(branch).tobytes()
        gap = float(margin()) if margin is not None else float("inf")
        for p in stack:
            p._hash.update(data)
            p.margin = min(p.margin, gap)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "name", "__weakref__")

    # numpy defers binary operators to us when a Tensor is on the right
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = ()
        self.backward_fn = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.backward_fn = backward_fn
    return out


def _topological_order(root: Tensor) -> list:
    order, visited = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into every leaf that requires gradients."""
    if loss.data.size != 1 and grad is None:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires gradients")
    seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=DTYPE)
    grads = {id(loss): seed}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            g = g.astype(DTYPE, copy=False)
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
