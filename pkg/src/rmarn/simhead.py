"""Turn similarity maps into scalar pair scores.

Pipeline per (text, point) pair::

    map --lrf--> filtered map --scp--> fine-grained score --+
    pooled features --gps--> cosine score -----------------+--fuse--> score

``lrf`` is the learned relaxation of the closed-form sparse filter
``D^-1 soft(D M, lam)``: a channel mix, the soft threshold, and a second
channel mix (which absorbs ``D^-1`` together with the conv head's first
linear stage).  ``scp`` (also called the similarity convolution) is a small
conv stack reduced to one scalar by global average pooling.
"""
import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError, ConfigError, DimensionError
from .numcore import (
    Tensor,
    conv2d,
    conv2d_mean,
    einsum,
    gelu,
    l2_normalize,
    masked_max,
    parameter,
    soft_threshold,
    softplus,
)

log = logging.getLogger(__name__)

POOLINGS = ("mean", "max")


def soft(x, lam):
    """Soft threshold of a scalar or array (no tape)."""
    if lam < 0:
        raise ArgumentError(f"soft threshold needs lambda >= 0, got {lam}")
    x = np.asarray(x, dtype=float)
    out = np.where(x > lam, x - lam, np.where(x < -lam, x + lam, 0.0))
    return float(out) if out.ndim == 0 else out


def inverse_softplus(value):
    if value < 0:
        raise ArgumentError(f"lambda must be >= 0, got {value}")
    if value == 0:
        return -math.inf
    return value + math.log(-math.expm1(-value))


@dataclass
class SimHeadParams:
    lrf_D: Tensor          # (k, k) channel mix before thresholding
    lrf_lambda_raw: Tensor  # scalar, lambda = softplus(raw) >= 0
    lrf_out: Tensor        # (k, k) channel mix after thresholding
    lrf_out_bias: Tensor   # (k,)
    conv1_w: Tensor        # (2k, k, 3, 3)
    conv1_b: Tensor
    conv2_w: Tensor        # (k, 2k, 3, 3)
    conv2_b: Tensor
    out_w: Tensor          # (k, 1)
    out_b: Tensor          # (1,)
    fuse_w_scp: Tensor     # (1,)
    fuse_w_gps: Tensor     # (1,)

    @classmethod
    def init(cls, k, rng, dtype=np.float32, lambda_init=0.1, kernel=3):
        def conv_w(c_out, c_in):
            fan_in = c_in * kernel * kernel
            return parameter((rng.standard_normal((c_out, c_in, kernel, kernel)) / np.sqrt(fan_in)).astype(dtype))

        return cls(
            lrf_D=parameter(np.eye(k, dtype=dtype)),
            lrf_lambda_raw=parameter(np.array(inverse_softplus(lambda_init), dtype=dtype)),
            lrf_out=parameter(np.eye(k, dtype=dtype)),
            lrf_out_bias=parameter(np.zeros(k, dtype)),
            conv1_w=conv_w(2 * k, k),
            conv1_b=parameter(np.zeros(2 * k, dtype)),
            conv2_w=conv_w(k, 2 * k),
            conv2_b=parameter(np.zeros(k, dtype)),
            out_w=parameter((rng.standard_normal((k, 1)) / np.sqrt(k)).astype(dtype)),
            out_b=parameter(np.zeros(1, dtype)),
            fuse_w_scp=parameter(np.ones(1, dtype)),
            fuse_w_gps=parameter(np.ones(1, dtype)),
        )

    @property
    def k(self):
        return self.lrf_D.shape[0]

    def lam(self):
        return softplus(self.lrf_lambda_raw)

    @property
    def lambda_value(self):
        return float(softplus(self.lrf_lambda_raw).data)

    def set_lambda(self, value):
        self.lrf_lambda_raw.data = np.array(inverse_softplus(value), dtype=self.lrf_lambda_raw.dtype)

    def named(self, prefix):
        return {f"{prefix}.{k}": v for k, v in vars(self).items()}


def _map_values(m):
    values = m.values if hasattr(m, "values") and not isinstance(m, Tensor) else m
    return values if isinstance(values, Tensor) else Tensor(values)


def _batched_map(m):
    m = _map_values(m)
    if m.ndim == 3:
        return m.reshape((1,) + m.shape), True
    if m.ndim != 4:
        raise DimensionError(f"similarity maps must be (k, s_T, s_P) or (n, k, s_T, s_P), got {m.shape}")
    return m, False


def lrf(m, params):
    """Low-rank filter along the channel axis of every (a, b) cell; shape preserved."""
    x, squeeze = _batched_map(m)
    if x.shape[1] != params.k:
        raise DimensionError(f"map has {x.shape[1]} channels, filter expects {params.k}")
    y = einsum("oc,nchw->nohw", params.lrf_D, x)
    y = soft_threshold(y, params.lam())
    y = einsum("oc,nchw->nohw", params.lrf_out, y) + params.lrf_out_bias.reshape(1, params.k, 1, 1)
    return y.reshape(y.shape[1:]) if squeeze else y


def scp(m, params, extents=None, gelu_eps=0.5, gelu_rho=0.044715):
    """Conv head: conv3x3 (k->2k), GELU, conv3x3 (2k->k), global mean, affine -> scalar per map.

    ``extents`` gives each map's true ``(s_T, s_P)`` inside a padded batch.
    """
    x, squeeze = _batched_map(m)
    n = x.shape[0]
    if extents is None:
        extents = np.tile(np.array(x.shape[2:], dtype=np.int64), (n, 1))
    extents = np.asarray(extents, dtype=np.int64).reshape(n, 2)
    if np.any(extents < 1):
        raise ConfigError("similarity map has a degenerate (empty) spatial extent")
    h = conv2d(x, params.conv1_w, params.conv1_b, padding=1, extents=extents)
    h = gelu(h, gelu_eps, gelu_rho)
    # second conv and the global mean fused: the mean of a conv is linear in its input
    pooled = conv2d_mean(h, params.conv2_w, params.conv2_b, padding=1, extents=extents)
    s = (pooled @ params.out_w).reshape(n) + params.out_b
    return s.reshape(()) if squeeze else s


def pool_sequences(enc, lengths=None, pooling="mean"):
    """``(n, S, d) -> (n, d)`` pooling over each sequence's valid tokens."""
    if pooling not in POOLINGS:
        raise ConfigError(f"pooling must be one of {POOLINGS}, got {pooling!r}")
    enc = enc if isinstance(enc, Tensor) else Tensor(enc)
    n, s, _ = enc.shape
    if lengths is None:
        lengths = np.full(n, s, dtype=np.int64)
    mask = np.arange(s)[None, :] < np.asarray(lengths)[:, None]
    if pooling == "max":
        return masked_max(enc, mask[:, :, None], axis=1)
    weights = (mask / np.asarray(lengths)[:, None]).astype(enc.dtype)[:, :, None]
    return (enc * Tensor(weights)).sum(axis=1)


def cosine_grid(pooled_t, pooled_p):
    """Cosine similarity of every pooled text row with every pooled point row."""
    zero = (np.abs(pooled_t.data).sum(axis=1) == 0).any() or (np.abs(pooled_p.data).sum(axis=1) == 0).any()
    if zero:
        log.warning("zero pooled feature vector; its cosine similarity is defined as 0")
    return l2_normalize(pooled_t, axis=1) @ l2_normalize(pooled_p, axis=1).swapaxes(0, 1)


def gps(t_enc, p_enc, pooling="mean"):
    """Global pooling similarity of one pair: cosine of the pooled ``(s, d)`` sequences."""
    t_enc = t_enc if isinstance(t_enc, Tensor) else Tensor(t_enc)
    p_enc = p_enc if isinstance(p_enc, Tensor) else Tensor(p_enc)
    if t_enc.shape[-1] != p_enc.shape[-1]:
        raise DimensionError(f"feature widths differ: {t_enc.shape[-1]} vs {p_enc.shape[-1]}")
    pt = pool_sequences(t_enc.reshape((1,) + t_enc.shape), pooling=pooling)
    pp = pool_sequences(p_enc.reshape((1,) + p_enc.shape), pooling=pooling)
    return cosine_grid(pt, pp).reshape(())


def fuse(s_scp, s_gps, params):
    """w_scp * s_scp + w_gps * s_gps (weights are learnable scalars)."""
    return params.fuse_w_scp.reshape(()) * s_scp + params.fuse_w_gps.reshape(()) * s_gps
