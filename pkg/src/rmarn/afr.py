"""Adaptive Feature Refiner: per-modality stacks of post-norm self-attention encoders.

All entry points accept either one ``(s, d)`` sequence or a padded batch
``(n, s, d)`` together with per-sample lengths.  Padded keys are masked out
of attention, so a padded batch produces exactly the rows the unpadded
sequences would; padded output rows are zeroed.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .numcore import Tensor, dropout, gelu, layer_norm, parameter, softmax

MODALITIES = ("text", "pointcloud")
MASK_FILL = -1e9


@dataclass
class FeatureSequence:
    """Token features of one sample of one modality."""

    tokens: np.ndarray
    modality: str
    id: str = ""

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens)
        if self.modality not in MODALITIES:
            raise DataError(f"unknown modality {self.modality!r}")
        if self.tokens.ndim != 2 or self.tokens.shape[0] < 1:
            raise DataError(f"feature sequence {self.id!r} must be a non-empty s x h matrix, got {self.tokens.shape}")
        if not np.all(np.isfinite(self.tokens)):
            raise DataError(f"feature sequence {self.id!r} contains NaN/Inf")

    @property
    def length(self):
        return self.tokens.shape[0]

    @property
    def width(self):
        return self.tokens.shape[1]


def _gaussian(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(dtype)


@dataclass
class EncoderLayerParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    w_1: Tensor
    b_1: Tensor
    w_2: Tensor
    b_2: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor

    @classmethod
    def init(cls, d, ffn_dim, rng, dtype=np.float32):
        return cls(
            w_q=parameter(_gaussian(rng, (d, d), d, dtype)),
            w_k=parameter(_gaussian(rng, (d, d), d, dtype)),
            w_v=parameter(_gaussian(rng, (d, d), d, dtype)),
            w_o=parameter(_gaussian(rng, (d, d), d, dtype)),
            w_1=parameter(_gaussian(rng, (d, ffn_dim), d, dtype)),
            b_1=parameter(np.zeros(ffn_dim, dtype)),
            w_2=parameter(_gaussian(rng, (ffn_dim, d), ffn_dim, dtype)),
            b_2=parameter(np.zeros(d, dtype)),
            ln1_gain=parameter(np.ones(d, dtype)),
            ln1_bias=parameter(np.zeros(d, dtype)),
            ln2_gain=parameter(np.ones(d, dtype)),
            ln2_bias=parameter(np.zeros(d, dtype)),
        )

    @property
    def width(self):
        return self.w_q.shape[0]

    def named(self, prefix):
        return {f"{prefix}.{k}": v for k, v in vars(self).items()}


@dataclass
class AFRParams:
    """Input projection (h -> d) plus the encoder stack of one modality."""

    input_w: Tensor
    input_b: Tensor
    layers: list = field(default_factory=list)

    @classmethod
    def init(cls, in_dim, d, n_layers, ffn_dim, rng, dtype=np.float32):
        return cls(
            input_w=parameter(_gaussian(rng, (in_dim, d), in_dim, dtype)),
            input_b=parameter(np.zeros(d, dtype)),
            layers=[EncoderLayerParams.init(d, ffn_dim, rng, dtype) for _ in range(n_layers)],
        )

    def named(self, prefix):
        out = {f"{prefix}.input_w": self.input_w, f"{prefix}.input_b": self.input_b}
        for i, layer in enumerate(self.layers):
            out.update(layer.named(f"{prefix}.layer{i}"))
        return out


def pad_sequences(seqs, dtype=np.float32):
    """Stack ragged ``s_i x h`` matrices into ``(n, max_s, h)`` plus lengths."""
    mats = [s.tokens if isinstance(s, FeatureSequence) else np.asarray(s) for s in seqs]
    if not mats:
        raise DataError("cannot pad an empty list of sequences")
    widths = {m.shape[1] for m in mats}
    if len(widths) != 1:
        raise ConfigError(f"sequences disagree on feature width: {sorted(widths)}")
    lengths = np.array([m.shape[0] for m in mats], dtype=np.int64)
    out = np.zeros((len(mats), int(lengths.max()), widths.pop()), dtype=dtype)
    for i, m in enumerate(mats):
        out[i, : m.shape[0]] = m
    return out, lengths


def token_mask(lengths, max_len):
    return np.arange(max_len)[None, :] < np.asarray(lengths)[:, None]


def _key_bias(lengths, max_len, dtype):
    if lengths is None:
        return None
    bias = np.where(token_mask(lengths, max_len), 0.0, MASK_FILL).astype(dtype)
    return bias[:, None, None, :]


def _batched(x):
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim == 2:
        return x.reshape((1,) + x.shape), True
    return x, False


def self_attention(x, layer, nhead, lengths=None):
    """Multi-head scaled dot-product self-attention followed by the output projection."""
    x, squeeze = _batched(x)
    n, s, d = x.shape
    if d % nhead:
        raise ConfigError(f"model width {d} is not divisible by nhead={nhead}")
    de = d // nhead

    def heads(t):
        return t.reshape(n, s, nhead, de).transpose(0, 2, 1, 3)

    q = heads(x @ layer.w_q)
    k = heads(x @ layer.w_k)
    v = heads(x @ layer.w_v)
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(de))
    att = softmax(scores, axis=-1, bias=_key_bias(lengths, s, x.dtype))
    ctx = (att @ v).transpose(0, 2, 1, 3).reshape(n, s, d)
    out = ctx @ layer.w_o
    return out.reshape(s, d) if squeeze else out


def feed_forward(x, layer, gelu_eps=0.5, gelu_rho=0.044715):
    return gelu(x @ layer.w_1 + layer.b_1, gelu_eps, gelu_rho) @ layer.w_2 + layer.b_2


def encoder_layer(x, layer, nhead, lengths=None, *, dropout_rate=0.0, rng=None, training=False,
                  gelu_eps=0.5, gelu_rho=0.044715, ln_eps=1e-5):
    """S = Norm(X + Att(X)); X' = Norm(S + FFN(S))."""
    att = dropout(self_attention(x, layer, nhead, lengths), dropout_rate, rng, training)
    s = layer_norm(x + att, layer.ln1_gain, layer.ln1_bias, ln_eps)
    ff = dropout(feed_forward(s, layer, gelu_eps, gelu_rho), dropout_rate, rng, training)
    return layer_norm(s + ff, layer.ln2_gain, layer.ln2_bias, ln_eps)


def project_input(x, params):
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape[-1] != params.input_w.shape[0]:
        raise ConfigError(f"input width {x.shape[-1]} does not match configured width {params.input_w.shape[0]}")
    return x @ params.input_w + params.input_b


def encode(seq, params, nhead, lengths=None, *, use_layers=True, **layer_kwargs):
    """Refine token features into the common width ``d``.

    ``seq`` is a :class:`FeatureSequence`, an ``(s, h)`` array, or a padded
    ``(n, s, h)`` batch with ``lengths``.  With ``use_layers=False`` only the
    input projection is applied (the no-refiner ablation).
    """
    tokens = seq.tokens if isinstance(seq, FeatureSequence) else seq
    x = tokens if isinstance(tokens, Tensor) else Tensor(np.asarray(tokens, dtype=params.input_w.dtype))
    x = project_input(x, params)
    if use_layers:
        if not params.layers:
            raise ConfigError("encoder stack is empty")
        for layer in params.layers:
            x = encoder_layer(x, layer, nhead, lengths, **layer_kwargs)
    if lengths is not None:
        keep = token_mask(lengths, x.shape[1]).astype(x.dtype)[:, :, None]
        x = x * keep
    return x
