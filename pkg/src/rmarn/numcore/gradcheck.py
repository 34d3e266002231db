"""Finite-difference verification of reverse-mode gradients."""
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, no_grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str | None
    worst_index: tuple | None
    per_param: dict = field(default_factory=dict)
    n_checked: int = 0

    def passed(self, threshold=1e-4):
        return self.max_rel_error < threshold


def _named(params):
    if isinstance(params, dict):
        return list(params.items())
    return [(p.name or f"param{i}", p) for i, p in enumerate(params)]


def relative_error(analytic, numeric, floor=1e-6):
    """|a - n| / max(|a|, |n|, floor); a gradient off by 2x scores 0.5."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def check_gradients(f, params, h=1e-5, max_coords=None, rng=None, floor=1e-6, grad_hook=None):
    """Compare reverse-mode gradients of scalar ``f()`` against central differences.

    ``f`` takes no arguments and must read ``params`` (tensors) through a
    fresh forward pass on each call.  ``max_coords`` samples at most that
    many coordinates per tensor.  ``grad_hook(name, grad)`` may rewrite the
    analytic gradient before comparison (used to prove the checker bites).
    """
    named = _named(params)
    for _, p in named:
        p.grad = None
    loss = f()
    loss.backward()
    analytic = {}
    for name, p in named:
        g = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        if grad_hook is not None:
            g = grad_hook(name, g)
        analytic[name] = g
        p.grad = None

    rng = rng if rng is not None else np.random.default_rng(0)
    report = GradCheckReport(max_rel_error=0.0, worst_param=None, worst_index=None)
    with no_grad():
        for name, p in named:
            if not p.data.flags.c_contiguous:
                p.data = np.ascontiguousarray(p.data)
            flat = p.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            worst = 0.0
            for idx in coords:
                orig = flat[idx]
                flat[idx] = orig + h
                fp = float(f().data)
                flat[idx] = orig - h
                fm = float(f().data)
                flat[idx] = orig
                numeric = (fp - fm) / (2.0 * h)
                a = float(analytic[name].reshape(-1)[idx])
                err = float(relative_error(a, numeric, floor))
                if err > worst:
                    worst = err
                if err > report.max_rel_error:
                    report.max_rel_error = err
                    report.worst_param = name
                    report.worst_index = np.unravel_index(idx, p.shape)
            report.per_param[name] = worst
            report.n_checked += len(coords)
    return report


def scalar_probe(out, rng):
    """Random linear functional of ``out``: a scalar that exercises every entry."""
    weights = rng.standard_normal(out.shape).astype(out.dtype)
    return (out * Tensor(weights)).sum()
