"""The assembled retrieval model: refiners, local similarity, similarity head."""
import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import afr, rls, simhead
from .errors import ConfigError, DataError
from .numcore import no_grad
from .objective import LossConfig


@dataclass
class ModelConfig:
    text_dim: int = 32
    point_dim: int = 32
    d_model: int = 512
    nhead: int = 32
    sa_layers: int = 8
    ffn_dim: int | None = None      # None -> d_model
    manifolds: int = 8
    rank: int = 256
    use_lrf: bool = True
    use_gps: bool = True
    use_rls: bool = True
    use_afr: bool = True
    e_mode: str = "off"
    e_capacity: tuple = (64, 256)
    pooling: str = "mean"
    dropout: float = 0.1
    gelu_eps: float = 0.5
    gelu_rho: float = 0.044715
    ln_eps: float = 1e-5
    lrf_lambda_init: float = 0.1
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        self.e_capacity = tuple(int(v) for v in self.e_capacity)
        self.validate()

    def validate(self):
        positive = ("text_dim", "point_dim", "d_model", "nhead", "manifolds", "rank")
        for name in positive:
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.nhead:
            raise ConfigError(f"d_model={self.d_model} is not divisible by nhead={self.nhead}")
        if self.use_afr and self.sa_layers < 1:
            raise ConfigError("sa_layers must be >= 1 when the refiner is enabled")
        if self.ffn_dim is not None and self.ffn_dim < 1:
            raise ConfigError("ffn_dim must be >= 1")
        if not (self.use_rls or self.use_gps):
            raise ConfigError("both the local (rls) and global (gps) branches are disabled: no similarity path")
        if self.e_mode not in rls.E_MODES:
            raise ConfigError(f"e_mode must be one of {rls.E_MODES}")
        if self.pooling not in simhead.POOLINGS:
            raise ConfigError(f"pooling must be one of {simhead.POOLINGS}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    @property
    def ffn_width(self):
        return self.ffn_dim or self.d_model

    def to_dict(self):
        d = asdict(self)
        d["e_capacity"] = list(self.e_capacity)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes):
        d = self.to_dict()
        d.update(changes)
        return ModelConfig.from_dict(d)

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class ModelParams:
    text_afr: afr.AFRParams
    point_afr: afr.AFRParams
    bundle: rls.ManifoldBundle | None
    head: simhead.SimHeadParams | None

    @classmethod
    def init(cls, cfg, rng, dtype=np.float32):
        layers = cfg.sa_layers if cfg.use_afr else 0
        text = afr.AFRParams.init(cfg.text_dim, cfg.d_model, layers, cfg.ffn_width, rng, dtype)
        point = afr.AFRParams.init(cfg.point_dim, cfg.d_model, layers, cfg.ffn_width, rng, dtype)
        bundle = head = None
        if cfg.use_rls:
            bundle = rls.ManifoldBundle.init(cfg.manifolds, cfg.rank, cfg.d_model, rng, dtype,
                                             cfg.e_mode, cfg.e_capacity)
            head = simhead.SimHeadParams.init(cfg.manifolds, rng, dtype, cfg.lrf_lambda_init)
        return cls(text, point, bundle, head)

    def named(self):
        out = {}
        out.update(self.text_afr.named("text_afr"))
        out.update(self.point_afr.named("point_afr"))
        if self.bundle is not None:
            out.update(self.bundle.named("rls"))
        if self.head is not None:
            out.update(self.head.named("head"))
        return out


class RMARN:
    """Similarity model over (text, point cloud) feature sequences."""

    def __init__(self, config, params):
        self.config = config
        self.params = params

    @classmethod
    def initialize(cls, config, seed=0, dtype=np.float32):
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        return cls(config, ModelParams.init(config, rng, dtype))

    def named_parameters(self):
        return self.params.named()

    @property
    def dtype(self):
        return self.params.text_afr.input_w.dtype

    def astype(self, dtype):
        """Deep copy with every parameter cast to ``dtype``."""
        clone = copy.deepcopy(self)
        for t in clone.named_parameters().values():
            t.data = t.data.astype(dtype)
            t.grad = None
        return clone

    # -- forward ------------------------------------------------------------

    def _check_modality(self, seqs, modality):
        for s in seqs:
            if isinstance(s, afr.FeatureSequence) and s.modality != modality:
                raise DataError(f"sequence {s.id!r} has modality {s.modality!r}, expected {modality!r}")

    def encode(self, seqs, modality, training=False, rng=None):
        """Pad and refine a list of sequences; returns ``(enc (n, S, d), lengths)``."""
        self._check_modality(seqs, modality)
        cfg = self.config
        tokens, lengths = afr.pad_sequences(seqs, self.dtype)
        params = self.params.text_afr if modality == "text" else self.params.point_afr
        enc = afr.encode(
            tokens, params, cfg.nhead, lengths,
            use_layers=cfg.use_afr, dropout_rate=cfg.dropout, rng=rng, training=training,
            gelu_eps=cfg.gelu_eps, gelu_rho=cfg.gelu_rho, ln_eps=cfg.ln_eps,
        )
        return enc, lengths

    def local_scores(self, t_enc, t_len, p_enc, p_len):
        """SCP scores ``(n_t, n_p)`` from the (optionally filtered) Riemann attention maps."""
        cfg, p = self.config, self.params
        n_t, n_p = t_enc.shape[0], p_enc.shape[0]
        grid = rls.riemann_attention_grid(t_enc, p_enc, p.bundle)
        maps = grid.reshape(n_t * n_p, cfg.manifolds, t_enc.shape[1], p_enc.shape[1])
        if cfg.use_lrf:
            maps = simhead.lrf(maps, p.head)
        extents = np.stack(np.broadcast_arrays(np.asarray(t_len)[:, None], np.asarray(p_len)[None, :]), -1)
        s = simhead.scp(maps, p.head, extents.reshape(-1, 2), cfg.gelu_eps, cfg.gelu_rho)
        return s.reshape(n_t, n_p)

    def global_scores(self, t_enc, t_len, p_enc, p_len):
        pool = self.config.pooling
        return simhead.cosine_grid(simhead.pool_sequences(t_enc, t_len, pool),
                                   simhead.pool_sequences(p_enc, p_len, pool))

    def scores_from_encodings(self, t_enc, t_len, p_enc, p_len):
        cfg = self.config
        s_gps = self.global_scores(t_enc, t_len, p_enc, p_len) if cfg.use_gps else None
        if not cfg.use_rls:
            return s_gps
        s_scp = self.local_scores(t_enc, t_len, p_enc, p_len)
        if not cfg.use_gps:
            return s_scp
        return simhead.fuse(s_scp, s_gps, self.params.head)

    def similarity(self, texts, points, training=False, rng=None):
        """Differentiable ``(len(texts), len(points))`` similarity matrix."""
        if not texts or not points:
            raise DataError("similarity needs non-empty text and point lists")
        if training and rng is None:
            raise ConfigError("training-mode forward needs an rng for dropout")
        t_enc, t_len = self.encode(texts, "text", training, rng)
        p_enc, p_len = self.encode(points, "pointcloud", training, rng)
        return self.scores_from_encodings(t_enc, t_len, p_enc, p_len)

    def batch_similarity(self, texts, points, chunk=32):
        """Evaluation-mode similarity matrix as a numpy array.

        Each sequence is encoded once; the pair grid is processed in
        ``chunk x chunk`` blocks to bound memory.
        """
        if not texts or not points:
            raise DataError("batch_similarity needs non-empty text and point lists")
        with no_grad():
            t_enc, t_len = self.encode(texts, "text")
            p_enc, p_len = self.encode(points, "pointcloud")
            out = np.empty((len(texts), len(points)), dtype=self.dtype)
            for i in range(0, len(texts), chunk):
                ti = slice(i, i + chunk)
                t_part, t_l = _trim(t_enc[ti], t_len[ti])
                for j in range(0, len(points), chunk):
                    pj = slice(j, j + chunk)
                    p_part, p_l = _trim(p_enc[pj], p_len[pj])
                    out[ti, pj] = self.scores_from_encodings(t_part, t_l, p_part, p_l).data
        return out

    def pair_similarity(self, text, point):
        return float(self.batch_similarity([text], [point])[0, 0])


def _trim(enc, lengths):
    """Drop padding columns beyond the longest sequence of a sub-batch."""
    longest = int(np.max(lengths))
    return enc[:, :longest], lengths


def pair_similarity(text, point, model):
    return model.pair_similarity(text, point)


def batch_similarity(texts, points, model, chunk=32):
    return model.batch_similarity(texts, points, chunk)
