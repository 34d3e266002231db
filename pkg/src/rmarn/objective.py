"""Bidirectional temperature-scaled contrastive loss with in-batch negatives."""
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ArgumentError, ConfigError, TrainingError
from .numcore import Tensor, log_softmax


@dataclass
class LossConfig:
    tau1: float = 0.07   # text -> point direction (softmax over points)
    tau2: float = 0.07   # point -> text direction (softmax over texts)
    alpha1: float = 0.5
    alpha2: float = 0.5

    def __post_init__(self):
        if not (self.tau1 > 0 and self.tau2 > 0):
            raise ConfigError(f"temperatures must be positive, got ({self.tau1}, {self.tau2})")
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise ConfigError(f"direction weights must be non-negative, got ({self.alpha1}, {self.alpha2})")

    def to_dict(self):
        return asdict(self)


def contrastive_loss(s, cfg=None):
    """Mean over matched pairs of the weighted row-wise and column-wise cross-entropies.

    ``s[i, j]`` is the similarity of text ``i`` and point ``j``; matches sit on
    the diagonal.
    """
    cfg = cfg or LossConfig()
    s = s if isinstance(s, Tensor) else Tensor(s)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ArgumentError(f"similarity matrix must be square, got {s.shape}")
    b = s.shape[0]
    if b < 2:
        raise ArgumentError("contrastive loss needs a batch of at least 2 pairs")
    if not np.all(np.isfinite(s.data)):
        raise TrainingError("non-finite similarity matrix")
    diag = Tensor(np.eye(b, dtype=s.dtype))
    loss = None
    if cfg.alpha1:
        rows = (log_softmax(s * (1.0 / cfg.tau1), axis=1) * diag).sum()
        loss = rows * (-cfg.alpha1 / b)
    if cfg.alpha2:
        cols = (log_softmax(s * (1.0 / cfg.tau2), axis=0) * diag).sum()
        term = cols * (-cfg.alpha2 / b)
        loss = term if loss is None else loss + term
    if loss is None:
        loss = (s * 0.0).sum()
    return loss
