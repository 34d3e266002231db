"""Adam with bias correction."""
from dataclasses import dataclass, field

import numpy as np

from ..errors import ArgumentError, DimensionError, TrainingError
from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 0.008
    beta1: float = 0.91
    beta2: float = 0.9993
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ArgumentError(f"Adam learning rate must be > 0, got {self.lr}")
        for name in ("beta1", "beta2"):
            beta = getattr(self, name)
            if not 0.0 < beta < 1.0:
                raise ArgumentError(f"Adam {name} must lie in (0, 1), got {beta}")
        if self.step_count < 0:
            raise ArgumentError("step_count must be >= 0")


def _array(p):
    return p.data if isinstance(p, Tensor) else p


def adam_step(params, grads, state):
    """One in-place Adam update.

    ``params`` and ``grads`` map names to arrays (or tensors); parameter
    arrays are updated in place.  Raises :class:`TrainingError` naming the
    first parameter whose gradient is not finite, before touching anything.
    """
    for name, g in grads.items():
        g = _array(g)
        if name not in params:
            raise ArgumentError(f"gradient for unknown parameter {name!r}")
        if g.shape != _array(params[name]).shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape for {name!r}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    for name, g in grads.items():
        p = _array(params[name])
        g = _array(g)
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.first_moment[name] = m
        state.second_moment[name] = v
        m_hat = m / corr1
        v_hat = v / corr2
        p -= (state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(p.dtype, copy=False)
    return state


class Adam:
    """Optimizer over a ``name -> Tensor`` mapping."""

    def __init__(self, params, lr=0.008, betas=(0.91, 0.9993), eps=1e-8):
        self.params = dict(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], epsilon=eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        grads = {}
        for name, p in self.params.items():
            grads[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
        adam_step(self.params, grads, self.state)
