"""Parameter containers and initialisers."""

from __future__ import annotations

import numpy as np

from ..tensor import DTYPE, Tensor


def parameter(data) -> Tensor:
    return Tensor(np.asarray(data, dtype=DTYPE), requires_grad=True)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) samples, redrawing any that fall outside +-bound*std."""
    out = rng.standard_normal(shape, dtype=np.float32)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()), dtype=np.float32)
        bad = np.abs(out) > bound
    return out * np.float32(std)


def kaiming_normal(rng: np.random.Generator, shape, fan: int) -> np.ndarray:
    return rng.standard_normal(shape, dtype=np.float32) * np.float32(np.sqrt(2.0 / fan))


class Module:
    """Base class: parameters are Tensor attributes with requires_grad set,
    submodules are Module attributes or lists of them. Names listed in
    ``buffers`` are numpy arrays saved with the state but not trained."""

    buffers: tuple = ()

    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, Module):
                        yield f"{name}.{i}", v

    def modules(self):
        yield self
        for _, child in self.children():
            yield from child.modules()

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, Tensor) and v.requires_grad:
                        yield f"{prefix}{name}.{i}", v
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = ""):
        for name in self.buffers:
            yield prefix + name, getattr(self, name)
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: np.asarray(b, dtype=DTYPE).copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict) -> None:
        params = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        expected = set(params) | set(bufs)
        missing, extra = expected - set(state), set(state) - expected
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for name, value in state.items():
            target = params[name].data if name in params else bufs[name]
            if target.shape != np.shape(value):
                raise ValueError(f"{name}: shape {np.shape(value)} != {target.shape}")
            target[...] = value

    def flops(self, shape: tuple, fpm: float = 1.0):
        """Return (cost, output shape) of a forward pass on ``shape``."""
        raise NotImplementedError
