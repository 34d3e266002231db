"""Recall@k ranking metrics for both retrieval directions."""
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError

log = logging.getLogger(__name__)

STANDARD_KS = (1, 5, 10)
DIRECTIONS = ("text_to_point", "point_to_text")


@dataclass
class RetrievalReport:
    direction: str
    r_at: dict = field(default_factory=dict)   # k -> percentage in [0, 100]
    n_queries: int = 0

    @property
    def rsum(self):
        return sum(self.r_at[k] for k in STANDARD_KS if k in self.r_at)

    def to_dict(self):
        return {
            "direction": self.direction,
            "n_queries": self.n_queries,
            **{f"r{k}": self.r_at[k] for k in sorted(self.r_at)},
            "rsum": self.rsum,
        }


def ranks(s, ground_truth=None):
    """0-based rank of each query's true item; ties go to the lower gallery index."""
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or 0 in s.shape:
        raise ArgumentError(f"similarity matrix must be a non-empty 2-D array, got shape {s.shape}")
    if not np.all(np.isfinite(s)):
        raise ArgumentError("similarity matrix contains NaN/Inf")
    n_q, n_g = s.shape
    if ground_truth is None:
        if n_q != n_g:
            raise ArgumentError("ground truth must be given for a non-square similarity matrix")
        ground_truth = np.arange(n_q)
    gt = np.asarray(ground_truth, dtype=np.int64)
    if gt.shape != (n_q,) or gt.min() < 0 or gt.max() >= n_g:
        raise ArgumentError("ground truth must hold one valid gallery index per query")
    true = s[np.arange(n_q), gt][:, None]
    cols = np.arange(n_g)[None, :]
    ahead = (s > true) | ((s == true) & (cols < gt[:, None]))
    return ahead.sum(axis=1)


def recall_at_k(s, ground_truth=None, ks=STANDARD_KS, direction="text_to_point", clip=False):
    """Percentage of queries whose true item lands in the top k, for each k.

    With ``clip=True`` a k larger than the gallery is evaluated as the whole
    gallery (with a warning) instead of raising.
    """
    ks = tuple(int(k) for k in ks)
    if any(k < 1 for k in ks) or list(ks) != sorted(ks):
        raise ArgumentError(f"ks must be positive and ascending, got {ks}")
    r = ranks(s, ground_truth)
    n_g = np.shape(s)[1]
    if ks[-1] > n_g:
        if not clip:
            raise ArgumentError(f"k={ks[-1]} exceeds gallery size {n_g}")
        log.warning("gallery of %d items is smaller than k=%d; recall saturates at 100", n_g, ks[-1])
    r_at = {k: 100.0 * float(np.mean(r < min(k, n_g))) for k in ks}
    return RetrievalReport(direction, r_at, len(r))


def evaluate_both(s, clip=True):
    """Reports for text->point (rows are texts) and point->text (the transpose)."""
    s = np.asarray(s)
    return {
        "text_to_point": recall_at_k(s, direction="text_to_point", clip=clip),
        "point_to_text": recall_at_k(s.T, direction="point_to_text", clip=clip),
    }


def format_table(reports, title=None):
    lines = [] if title is None else [title]
    lines.append(f"{'direction':<15}{'R@1':>8}{'R@5':>8}{'R@10':>8}{'Rsum':>9}")
    for rep in reports.values():
        r = rep.r_at
        lines.append(f"{rep.direction:<15}{r[1]:>8.2f}{r[5]:>8.2f}{r[10]:>8.2f}{rep.rsum:>9.2f}")
    return "\n".join(lines)
