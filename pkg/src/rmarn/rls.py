"""Riemann local similarity.

For every manifold ``i`` the transported inner product between a text token
``t`` and a point token ``p`` is absorbed into a learned low-rank bilinear
form ``(A_i t) . (B_i p) + e_i(a, b)``.  Stacking the ``k`` manifolds gives
the ``k x s_T x s_P`` Riemann attention map.
"""
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .numcore import Tensor, einsum, parameter

E_MODES = ("off", "learned_bias")


@dataclass
class SimilarityMap:
    """``k x s_T x s_P`` map; channel ``i`` is the manifold-``i`` similarity matrix."""

    values: Tensor

    @property
    def shape(self):
        return self.values.shape

    @property
    def k(self):
        return self.values.shape[-3]


@dataclass
class ManifoldBundle:
    A: Tensor  # (k, r, d), text side
    B: Tensor  # (k, r, d), point side
    e_mode: str = "off"
    e_table: Tensor | None = None  # (k, max s_T, max s_P)

    def __post_init__(self):
        if self.e_mode not in E_MODES:
            raise ConfigError(f"e_mode must be one of {E_MODES}, got {self.e_mode!r}")
        if self.A.shape != self.B.shape or self.A.ndim != 3:
            raise DimensionError(f"factor stacks must share shape (k, r, d): {self.A.shape} vs {self.B.shape}")
        if self.e_mode == "learned_bias" and self.e_table is None:
            raise ConfigError("learned_bias mode needs an e_table")

    @classmethod
    def init(cls, k, rank, d, rng, dtype=np.float32, e_mode="off", e_capacity=(64, 256)):
        std = 1.0 / np.sqrt(d)
        a = (rng.standard_normal((k, rank, d)) * std).astype(dtype)
        b = (rng.standard_normal((k, rank, d)) * std).astype(dtype)
        table = None
        if e_mode == "learned_bias":
            table = parameter(np.zeros((k,) + tuple(e_capacity), dtype))
        return cls(parameter(a), parameter(b), e_mode, table)

    @property
    def k(self):
        return self.A.shape[0]

    @property
    def rank(self):
        return self.A.shape[1]

    @property
    def width(self):
        return self.A.shape[2]

    def named(self, prefix):
        out = {f"{prefix}.A": self.A, f"{prefix}.B": self.B}
        if self.e_table is not None:
            out[f"{prefix}.e_table"] = self.e_table
        return out


def token_similarity(t, p, a_i, b_i, e=0.0):
    """(A_i t) . (B_i p) + e for single d-vectors."""
    t, p, a_i, b_i = (np.asarray(v.data if isinstance(v, Tensor) else v) for v in (t, p, a_i, b_i))
    if t.shape[-1] != a_i.shape[-1] or p.shape[-1] != b_i.shape[-1]:
        raise DimensionError(f"token widths {t.shape}, {p.shape} vs factor widths {a_i.shape}, {b_i.shape}")
    return float((a_i @ t) @ (b_i @ p) + e)


def _position_bias(bundle, s_t, s_p):
    cap_t, cap_p = bundle.e_table.shape[1:]
    if s_t > cap_t or s_p > cap_p:
        raise ConfigError(f"sequence lengths ({s_t}, {s_p}) exceed position-bias capacity ({cap_t}, {cap_p})")
    return bundle.e_table[:, :s_t, :s_p]


def riemann_attention_map(t_feat, p_feat, bundle):
    """Map for one (text, point) pair: ``(s_T, d), (s_P, d) -> SimilarityMap (k, s_T, s_P)``."""
    t_feat = t_feat if isinstance(t_feat, Tensor) else Tensor(t_feat)
    p_feat = p_feat if isinstance(p_feat, Tensor) else Tensor(p_feat)
    if t_feat.ndim != 2 or p_feat.ndim != 2:
        raise DimensionError("riemann_attention_map expects 2-D token matrices")
    grid = riemann_attention_grid(t_feat.reshape((1,) + t_feat.shape), p_feat.reshape((1,) + p_feat.shape), bundle)
    return SimilarityMap(grid.reshape(grid.shape[2:]))


def riemann_attention_grid(t_batch, p_batch, bundle):
    """Maps for every (text, point) combination of two padded batches.

    ``(n_t, S_T, d), (n_p, S_P, d) -> (n_t, n_p, k, S_T, S_P)``, computed
    with two batched projections and one matrix product per manifold.
    """
    n_t, s_t, d = t_batch.shape
    n_p, s_p, d_p = p_batch.shape
    if d != bundle.width or d_p != bundle.width:
        raise DimensionError(f"feature widths ({d}, {d_p}) do not match manifold width {bundle.width}")
    k, r = bundle.k, bundle.rank
    ta = einsum("nsd,krd->knsr", t_batch, bundle.A).reshape(k, n_t * s_t, r)
    pb = einsum("msd,krd->krms", p_batch, bundle.B).reshape(k, r, n_p * s_p)
    m = (ta @ pb).reshape(k, n_t, s_t, n_p, s_p).transpose(1, 3, 0, 2, 4)
    if bundle.e_mode == "learned_bias":
        m = m + _position_bias(bundle, s_t, s_p)
    return m
