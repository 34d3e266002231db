"""Training loop, evaluation, ablation and sweep drivers."""
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import checkpoint
from .data import load_manifest, load_split
from .errors import ConfigError, TrainingError
from .model import RMARN, ModelConfig
from .numcore import Adam, no_grad
from .objective import contrastive_loss
from .retrieval import evaluate_both

FORMAT_VERSION = 1

PRESETS = {
    # the synthetic acceptance profile
    "small": dict(model=dict(d_model=64, nhead=4, sa_layers=2, manifolds=4, rank=16), epochs=30, batch_size=32),
    "fast": dict(model=dict(rank=128, nhead=16, sa_layers=4), epochs=20, batch_size=32),
    "base": dict(model=dict(rank=256, nhead=32, sa_layers=8), epochs=100, batch_size=64),
}

# Reporting order of the variants, full model last.
ABLATIONS = (
    ("w/o GPS", {"use_gps": False}),
    ("w/o AFR+RLS", {"use_afr": False, "use_rls": False}),
    ("w/o RLS", {"use_rls": False}),
    ("w/o AFR", {"use_afr": False}),
    ("full", {}),
)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    lr: float = 0.008
    betas: tuple = (0.91, 0.9993)
    eps: float = 1e-8
    epochs: int = 100
    batch_size: int = 64
    seed: int = 0
    eval_chunk: int = 64

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        self.betas = tuple(float(b) for b in self.betas)
        self.validate()

    def validate(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if len(self.betas) != 2 or not all(0 < b < 1 for b in self.betas):
            raise ConfigError(f"betas must be two values in (0, 1), got {self.betas}")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (in-batch negatives)")
        if self.eval_chunk < 1:
            raise ConfigError("eval_chunk must be >= 1")

    def to_dict(self):
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, model=None, **changes):
        d = self.to_dict()
        if model:
            d["model"] = {**d["model"], **model}
        d.update(changes)
        return RunConfig.from_dict(d)

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def preset(name, **overrides):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    p = PRESETS[name]
    changes = {"epochs": p["epochs"], "batch_size": p["batch_size"], **overrides}
    model = {**p.get("model", {}), **changes.pop("model", {})}
    return RunConfig().replace(model=model, **changes)


def load_run_config(path):
    """JSON file: either ``{"preset": name, ...overrides}`` or a full run config."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    name = raw.pop("preset", None)
    if name is None:
        return RunConfig.from_dict(raw)
    return preset(name, **raw)


class MetricsLog:
    """Line-delimited JSON; every record carries seed, config hash and format version."""

    def __init__(self, path, run):
        self.path = Path(path) if path is not None else None
        self.stamp = {"seed": run.seed, "config_hash": run.config_hash(), "format_version": FORMAT_VERSION}
        self.records = []
        if self.path is not None:
            self.path.write_text("", encoding="utf-8")

    def write(self, record):
        rec = {**record, **self.stamp}
        self.records.append(rec)
        if self.path is not None:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


@dataclass
class TrainResult:
    model: RMARN
    best_model: RMARN
    records: list
    best_epoch: int
    best_val_rsum: float


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    out = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    # a trailing batch of one has no negatives; fold it into the previous batch
    if len(out) > 1 and len(out[-1]) < 2:
        tail = out.pop()
        out[-1] = np.concatenate([out[-1], tail])
    return out


def mean_eval_loss(model, texts, points, batch_size):
    """Evaluation-mode contrastive loss over fixed consecutive batches."""
    losses, weights = [], []
    with no_grad():
        for idx in _fixed_batches(len(texts), batch_size):
            sim = model.similarity([texts[i] for i in idx], [points[i] for i in idx])
            losses.append(contrastive_loss(sim, model.config.loss).item())
            weights.append(len(idx))
    return float(np.average(losses, weights=weights))


def _fixed_batches(n, batch_size):
    out = [np.arange(i, min(i + batch_size, n)) for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) < 2:
        tail = out.pop()
        out[-1] = np.concatenate([out[-1], tail])
    return out


def evaluate(model, texts, points, chunk=64):
    s = model.batch_similarity(texts, points, chunk)
    return evaluate_both(s)


def _report_record(reports, prefix):
    rec = {}
    for name, rep in reports.items():
        for k, v in rep.to_dict().items():
            if k not in ("direction",):
                rec[f"{prefix}{name}.{k}"] = v
    rec[f"{prefix}rsum_total"] = sum(r.rsum for r in reports.values())
    return rec


def train(run, train_data, val_data=None, out_dir=None, log=None, progress=None):
    """Train from scratch; returns a :class:`TrainResult`.

    ``train_data``/``val_data`` are ``(texts, points)`` lists.  With
    ``out_dir`` set, ``metrics.jsonl``, ``best.rmck`` and ``final.rmck``
    are written there.
    """
    texts, points = train_data
    if len(texts) < 2:
        raise ConfigError("training split needs at least 2 pairs")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log = log or MetricsLog(out / "metrics.jsonl" if out else None, run)
    init_ss, shuffle_ss, drop_ss = np.random.SeedSequence(run.seed).spawn(3)
    model = RMARN.initialize(run.model, np.random.default_rng(init_ss))
    shuffle_rng = np.random.default_rng(shuffle_ss)
    drop_rng = np.random.default_rng(drop_ss)
    params = model.named_parameters()
    opt = Adam(params, lr=run.lr, betas=run.betas, eps=run.eps)

    log.write({"event": "start", "config": run.to_dict(), "n_train": len(texts),
               "n_val": 0 if val_data is None else len(val_data[0])})

    best = {"epoch": -1, "rsum": -math.inf, "key": (-math.inf, -math.inf), "bytes": None}

    def end_of_epoch(epoch, train_loss):
        rec = {"event": "epoch", "epoch": epoch, "train_loss": train_loss,
               "eval_loss": mean_eval_loss(model, texts, points, run.batch_size)}
        key = (-rec["eval_loss"], 0.0)
        if val_data is not None:
            reports = evaluate(model, *val_data, chunk=run.eval_chunk)
            rec.update(_report_record(reports, "val."))
            rec["val.loss"] = mean_eval_loss(model, *val_data, run.batch_size) if len(val_data[0]) > 1 else 0.0
            # recall saturates on small validation sets; the loss breaks the ties
            key = (rec["val.rsum_total"], -rec["val.loss"])
        log.write(rec)
        if progress:
            progress(rec)
        if key > best["key"]:
            best.update(epoch=epoch, key=key, rsum=rec.get("val.rsum_total", key[0]),
                        bytes=checkpoint.encode_checkpoint(model, {"epoch": epoch, "seed": run.seed}))

    end_of_epoch(0, None)
    step = 0
    for epoch in range(1, run.epochs + 1):
        losses = []
        for idx in _batches(len(texts), run.batch_size, shuffle_rng):
            step += 1
            try:
                sim = model.similarity([texts[i] for i in idx], [points[i] for i in idx], training=True,
                                       rng=drop_rng)
                loss = contrastive_loss(sim, run.model.loss)
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}, step {step}: {exc}") from exc
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch}, step {step}")
            opt.zero_grad()
            loss.backward()
            try:
                opt.step()
            except TrainingError as exc:
                raise TrainingError(f"epoch {epoch}, step {step}: {exc}") from exc
            for name, t in params.items():
                if not np.all(np.isfinite(t.data)):
                    raise TrainingError(f"parameter {name} became non-finite at epoch {epoch}, step {step}")
            losses.append(value * len(idx))
        end_of_epoch(epoch, float(np.sum(losses) / len(texts)))

    best_model, _ = checkpoint.decode_checkpoint(best["bytes"])
    if out is not None:
        (out / "best.rmck").write_bytes(best["bytes"])
        checkpoint.save_checkpoint(model, out / "final.rmck", {"epoch": run.epochs, "seed": run.seed})
    log.write({"event": "end", "best_epoch": best["epoch"], "steps": step})
    return TrainResult(model, best_model, log.records, best["epoch"], best["rsum"])


def train_from_manifest(run, manifest_path, out_dir=None, progress=None):
    manifest = load_manifest(manifest_path, require_splits=("train",))
    train_data = load_split(manifest, "train")
    val_data = load_split(manifest, "val") if manifest.split("val") else None
    return train(run, train_data, val_data, out_dir, progress=progress)


def ablate(run, train_data, val_data, test_data, variants=ABLATIONS, progress=None):
    """Train each ablation variant from the same seed and data; returns ``[(name, reports)]``."""
    rows = []
    for name, switches in variants:
        result = train(run.replace(model=switches), train_data, val_data, progress=progress)
        rows.append((name, evaluate(result.best_model, *test_data, chunk=run.eval_chunk)))
    return rows


def parse_sweep(spec):
    """``"nhead=8,16,32"`` -> ``("nhead", [8, 16, 32])``."""
    if "=" not in spec:
        raise ConfigError(f"sweep must look like name=v1,v2,...; got {spec!r}")
    name, values = spec.split("=", 1)
    name = name.strip()
    if name not in {f.name for f in fields(ModelConfig)} | {"lr", "batch_size", "epochs"}:
        raise ConfigError(f"cannot sweep unknown setting {name!r}")
    parsed = []
    for v in values.split(","):
        v = v.strip()
        try:
            parsed.append(json.loads(v))
        except json.JSONDecodeError:
            parsed.append(v)
    if not parsed:
        raise ConfigError("sweep needs at least one value")
    return name, parsed

