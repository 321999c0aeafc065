"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import DTYPE, ActivationPattern, backward


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    errors: dict = field(default_factory=dict)
    skipped: int = 0           # probe directions discarded for crossing a kink
    margin: float = float("inf")  # distance of the checked point from the nearest kink

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error < self.tolerance)


def grad_check(fn, params, tolerance: float = 1e-3, step: float = 1e-3, directions: int = 2,
               seed: int = 0, names=None, joint: bool = False, max_redraws: int = 50) -> GradCheckReport:
    """Compare reverse-mode gradients of ``fn`` against central differences.

    ``fn()`` recomputes the output from ``params`` (tensors with
    ``requires_grad``). Non-scalar outputs are contracted with a fixed random
    cotangent. Each probe draws a Gaussian direction v and compares the
    analytic change <grad, delta> with f(p + h v) - f(p - h v), where delta is
    the perturbation actually applied after rounding to float32. The relative
    error is |analytic - numeric| / max(|analytic|, |numeric|, |grad| |delta| / sqrt(n)),
    the last term being the expected size of a random projection, so that
    directions nearly orthogonal to the gradient do not blow up the ratio.

    By default every parameter tensor is probed on its own. With ``joint``
    all tensors move together along one direction per probe, which tests the
    full gradient vector; in 32-bit arithmetic this keeps the signal well
    above rounding noise for models with many weakly coupled tensors.

    Central differences are only meaningful on one smooth piece of the
    function, so a direction whose probes change the branch pattern of a
    piecewise op (relu, max-pool, abs) is redrawn, up to ``max_redraws`` times;
    ``skipped`` counts the discards and a direction that never lands on a
    smooth segment scores an infinite error.
    """
    cot_rng, dir_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    params = list(params)
    names = list(names) if names is not None else [p.name or f"param{i}" for i, p in enumerate(params)]
    with ActivationPattern() as base:
        out = fn()
    cot = np.ones(out.shape) if out.size == 1 else cot_rng.standard_normal(out.shape)
    for p in params:
        p.grad = None
    backward(out, grad=cot.astype(DTYPE))
    grads = [np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64) for p in params]

    def evaluate():
        with ActivationPattern() as pattern:
            value = float((fn().data.astype(np.float64) * cot).sum())
        return value, pattern.signature == base.signature

    def probe(group):
        """Worst relative error over ``directions`` probes moving ``group`` (indices)."""
        nonlocal skipped
        origs = [params[i].data for i in group]
        g = [grads[i] for i in group]
        worst = 0.0
        for _ in range(directions):
            for _attempt in range(max_redraws + 1):
                vs = [dir_rng.standard_normal(o.shape) for o in origs]
                plus = [(o + step * v).astype(DTYPE) for o, v in zip(origs, vs)]
                minus = [(o - step * v).astype(DTYPE) for o, v in zip(origs, vs)]
                try:
                    for i, a in zip(group, plus):
                        params[i].data = a
                    f_plus, same_plus = evaluate()
                    for i, a in zip(group, minus):
                        params[i].data = a
                    f_minus, same_minus = evaluate()
                finally:
                    for i, o in zip(group, origs):
                        params[i].data = o
                if same_plus and same_minus:
                    break
                skipped += 1
            else:
                worst = float("inf")
                continue
            deltas = [a.astype(np.float64) - b.astype(np.float64) for a, b in zip(plus, minus)]
            numeric = f_plus - f_minus
            analytic = float(sum((gi * d).sum() for gi, d in zip(g, deltas)))
            g_norm = np.sqrt(sum((gi * gi).sum() for gi in g))
            d_norm = np.sqrt(sum((d * d).sum() for d in deltas))
            typical = g_norm * d_norm / np.sqrt(sum(gi.size for gi in g))
            scale = max(abs(analytic), abs(numeric), typical)
            err = 0.0 if scale == 0.0 else abs(analytic - numeric) / scale
            worst = max(worst, err)
        return worst

    skipped = 0
    if joint:
        errors = {"joint": probe(list(range(len(params))))} if params else {}
    else:
        errors = {name: probe([i]) for i, name in enumerate(names)}
    max_err = max(errors.values()) if errors else 0.0
    return GradCheckReport(max_rel_error=max_err, tolerance=tolerance, errors=errors,
                           skipped=skipped, margin=base.margin)
