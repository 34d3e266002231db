"""Feature files, pair manifests, the synthetic pair generator and toy featurizers."""
import hashlib
import json
import re
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .afr import FeatureSequence
from .errors import (
    ArgumentError,
    BadMagicError,
    FeatureFileError,
    ManifestError,
    NonFiniteError,
    ParseError,
    PayloadLengthError,
    VersionMismatchError,
)

FEATURE_MAGIC = b"RMFT"
FEATURE_VERSION = 1
MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")
_HEADER = struct.Struct("<4sIII")


# -- RMFT feature files -----------------------------------------------------------

def encode_features(tokens):
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise FeatureFileError(f"features must be 2-D, got shape {tokens.shape}")
    if not np.all(np.isfinite(tokens)):
        raise NonFiniteError("refusing to write non-finite features")
    rows, cols = tokens.shape
    return _HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, rows, cols) + np.ascontiguousarray(tokens, "<f4").tobytes()


def decode_features(data, source="<bytes>"):
    if len(data) < _HEADER.size:
        raise PayloadLengthError(f"{source}: {len(data)} bytes is shorter than the {_HEADER.size}-byte header")
    magic, version, rows, cols = _HEADER.unpack_from(data)
    if magic != FEATURE_MAGIC:
        raise BadMagicError(f"{source}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise VersionMismatchError(f"{source}: feature format version {version}, expected {FEATURE_VERSION}")
    expected = rows * cols * 4
    if len(data) - _HEADER.size != expected:
        raise PayloadLengthError(f"{source}: payload has {len(data) - _HEADER.size} bytes, header implies {expected}")
    arr = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).astype(np.float32).reshape(rows, cols)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{source}: payload contains NaN/Inf")
    return arr


def write_features(seq, path):
    tokens = seq.tokens if isinstance(seq, FeatureSequence) else seq
    Path(path).write_bytes(encode_features(tokens))


def read_features(path, modality="text", id=None):
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise FeatureFileError(f"cannot read feature file {path}: {exc}") from exc
    tokens = decode_features(data, str(path))
    if tokens.shape[0] < 1:
        raise FeatureFileError(f"{path}: empty feature sequence")
    return FeatureSequence(tokens, modality, id if id is not None else path.stem)


# -- manifests --------------------------------------------------------------------

@dataclass
class PairEntry:
    id: str
    text_feature_path: str
    point_feature_path: str
    split: str
    caption: str | None = None


@dataclass
class PairManifest:
    entries: list
    root: Path = Path(".")
    meta: dict = field(default_factory=dict)

    def validate(self, check_files=True, require_splits=()):
        seen = set()
        for e in self.entries:
            if e.id in seen:
                raise ManifestError(f"duplicate pair id {e.id!r}")
            seen.add(e.id)
            if e.split not in SPLITS:
                raise ManifestError(f"pair {e.id!r}: split must be one of {SPLITS}, got {e.split!r}")
            if check_files:
                for p in (e.text_feature_path, e.point_feature_path):
                    if not (self.root / p).is_file():
                        raise ManifestError(f"pair {e.id!r}: missing feature file {self.root / p}")
        for split in require_splits:
            if not self.split(split):
                raise ManifestError(f"split {split!r} is empty")
        return self

    def split(self, name):
        return [e for e in self.entries if e.split == name]

    def counts(self):
        return {s: len(self.split(s)) for s in SPLITS}

    def to_dict(self):
        return {
            "format_version": MANIFEST_VERSION,
            "meta": self.meta,
            "entries": [asdict(e) for e in self.entries],
        }


def save_manifest(manifest, path):
    text = json.dumps(manifest.to_dict(), sort_keys=True, indent=1) + "\n"
    Path(path).write_text(text, encoding="utf-8")


def load_manifest(path, check_files=True, require_splits=()):
    """Read and validate a manifest; feature paths resolve relative to its directory."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict) or raw.get("format_version") != MANIFEST_VERSION:
        raise ManifestError(f"{path}: unsupported manifest format {raw.get('format_version') if isinstance(raw, dict) else raw!r}")
    try:
        entries = [PairEntry(**e) for e in raw["entries"]]
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"{path}: malformed entries ({exc})") from exc
    manifest = PairManifest(entries, path.parent, raw.get("meta", {}))
    return manifest.validate(check_files, require_splits)


def load_split(manifest, split):
    """Read the ``(texts, points)`` feature sequences of one split, in manifest order."""
    entries = manifest.split(split)
    if not entries:
        raise ManifestError(f"split {split!r} is empty")
    texts = [read_features(manifest.root / e.text_feature_path, "text", e.id) for e in entries]
    points = [read_features(manifest.root / e.point_feature_path, "pointcloud", e.id) for e in entries]
    return texts, points


def split_assignment(n, rng):
    """80/10/10 by a seeded permutation; val and test get ``max(1, n // 10)`` each once n >= 3."""
    n_eval = max(1, n // 10) if n >= 3 else 0
    labels = np.array(["train"] * (n - 2 * n_eval) + ["val"] * n_eval + ["test"] * n_eval)
    return labels[rng.permutation(n)].tolist()


# -- synthetic pairs --------------------------------------------------------------

@dataclass
class SyntheticSpec:
    n_pairs: int = 200
    s_t: tuple = (8, 16)
    s_p: tuple = (32, 64)
    h_t: int = 32
    h_p: int = 32
    latent_dim: int = 8
    noise: float = 0.1
    seed: int = 0
    shared: float = 0.8   # weight of the map component common to both modalities

    def validate(self):
        if self.n_pairs < 2:
            raise ArgumentError(f"n_pairs must be >= 2, got {self.n_pairs}")
        if self.noise < 0:
            raise ArgumentError(f"noise must be >= 0, got {self.noise}")
        for name in ("s_t", "s_p"):
            lo, hi = getattr(self, name)
            if lo < 1 or hi < lo:
                raise ArgumentError(f"{name} range must satisfy 1 <= lo <= hi, got ({lo}, {hi})")
        for name in ("h_t", "h_p", "latent_dim"):
            if getattr(self, name) < 1:
                raise ArgumentError(f"{name} must be >= 1")
        if not 0.0 <= self.shared <= 1.0:
            raise ArgumentError("shared must lie in [0, 1]")


def synthesize(spec):
    """Draw the pairs in memory: ``(texts, points, splits)``.

    Each pair has a latent ``z``; every token is ``W z`` plus Gaussian noise.
    The two mixing maps share a common component so that pooled matched
    features are already more aligned than mismatched ones.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    own = np.sqrt(1.0 - spec.shared ** 2)
    h = max(spec.h_t, spec.h_p)
    common = rng.standard_normal((h, spec.latent_dim))
    w_t = (spec.shared * common[: spec.h_t] + own * rng.standard_normal((spec.h_t, spec.latent_dim)))
    w_p = (spec.shared * common[: spec.h_p] + own * rng.standard_normal((spec.h_p, spec.latent_dim)))
    w_t /= np.sqrt(spec.latent_dim)
    w_p /= np.sqrt(spec.latent_dim)
    texts, points = [], []
    for i in range(spec.n_pairs):
        z = rng.standard_normal(spec.latent_dim)
        n_t = int(rng.integers(spec.s_t[0], spec.s_t[1] + 1))
        n_p = int(rng.integers(spec.s_p[0], spec.s_p[1] + 1))
        t = w_t @ z + spec.noise * rng.standard_normal((n_t, spec.h_t))
        p = w_p @ z + spec.noise * rng.standard_normal((n_p, spec.h_p))
        pid = f"pair-{i:05d}"
        texts.append(FeatureSequence(t.astype(np.float32), "text", pid))
        points.append(FeatureSequence(p.astype(np.float32), "pointcloud", pid))
    return texts, points, split_assignment(spec.n_pairs, rng)


def generate_synthetic(out_dir, spec=None, **kwargs):
    """Write a synthetic archive (manifest.json + features/) and return its manifest."""
    spec = spec or SyntheticSpec(**kwargs)
    texts, points, splits = synthesize(spec)
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    entries = []
    for t, p, split in zip(texts, points, splits):
        tp, pp = f"features/{t.id}.text.rmft", f"features/{p.id}.point.rmft"
        write_features(t, out / tp)
        write_features(p, out / pp)
        entries.append(PairEntry(t.id, tp, pp, split))
    meta = {"generator": "synthetic", **asdict(spec)}
    meta["s_t"], meta["s_p"] = list(spec.s_t), list(spec.s_p)
    manifest = PairManifest(entries, out, meta)
    save_manifest(manifest, out / "manifest.json")
    return manifest


def pooled_cosines(texts, points):
    """Mean pooled-feature cosine of matched pairs and of all mismatched pairs."""
    def unit(seqs):
        m = np.stack([s.tokens.astype(np.float64).mean(0) for s in seqs])
        return m / np.linalg.norm(m, axis=1, keepdims=True)

    c = unit(texts) @ unit(points).T
    n = len(texts)
    off = ~np.eye(n, dtype=bool)
    return float(np.trace(c) / n), float(c[off].mean())


# -- toy featurizers --------------------------------------------------------------

TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


def tokenize(text):
    return TOKEN_RE.findall(text.lower())


def _token_row(token, h, seed):
    """Row of a seeded Gaussian embedding table addressed by a stable token hash."""
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    index = int.from_bytes(digest, "little")
    return np.random.default_rng([seed, index]).standard_normal(h) / np.sqrt(h)


def featurize_text(text, h_t=32, seed=0, id=""):
    tokens = tokenize(text or "")
    if not tokens:
        raise ArgumentError("cannot featurize empty text")
    rows = np.stack([_token_row(tok, h_t, seed) for tok in tokens]).astype(np.float32)
    return FeatureSequence(rows, "text", id)


def featurize_pointcloud(points, h_p=32, n_sample=64, seed=0, id=""):
    """Subsample to ``n_sample`` points, then project each (x,y,z[,r,g,b]) row linearly to ``h_p``."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] < 1 or pts.shape[1] not in (3, 6):
        raise ArgumentError(f"point cloud must be N x 3 or N x 6 with N >= 1, got {pts.shape}")
    if n_sample < 1:
        raise ArgumentError("n_sample must be >= 1")
    sample_rng = np.random.default_rng([seed, 2])
    replace = pts.shape[0] < n_sample
    idx = sample_rng.choice(pts.shape[0], size=n_sample, replace=replace)
    proj = np.random.default_rng([seed, 1, pts.shape[1]]).standard_normal((pts.shape[1], h_p))
    proj /= np.sqrt(pts.shape[1])
    return FeatureSequence((pts[idx] @ proj).astype(np.float32), "pointcloud", id)


def _floats(fields, lineno, path):
    try:
        return [float(v) for v in fields]
    except ValueError:
        raise ParseError(f"expected numbers, got {' '.join(fields)!r}", lineno, path) from None


def parse_xyz(text, path=None):
    """ASCII XYZ: one point per line, 3 or 6 numbers (whitespace or comma separated); '#' comments."""
    rows, width = [], None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.replace(",", " ").split()
        if len(fields) not in (3, 6):
            raise ParseError(f"expected 3 or 6 values, got {len(fields)}", lineno, path)
        if width is not None and len(fields) != width:
            raise ParseError(f"row width {len(fields)} differs from earlier rows ({width})", lineno, path)
        width = len(fields)
        rows.append(_floats(fields, lineno, path))
    if not rows:
        raise ParseError("no points found", None, path)
    return np.array(rows)


def parse_ply(text, path=None):
    """ASCII PLY; vertices' x, y, z and (if present) red, green, blue scaled to [0, 1]."""
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing 'ply' signature", 1, path)
    elements, current, body = [], None, None
    for lineno, line in enumerate(lines[1:], 2):
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "format":
            if len(parts) < 2 or parts[1] != "ascii":
                raise ParseError(f"only ASCII PLY is supported, got {' '.join(parts[1:])!r}", lineno, path)
        elif parts[0] == "element":
            if len(parts) != 3 or not parts[2].isdigit():
                raise ParseError("malformed element line", lineno, path)
            current = {"name": parts[1], "count": int(parts[2]), "props": []}
            elements.append(current)
        elif parts[0] == "property":
            if current is None or len(parts) < 3:
                raise ParseError("property outside an element", lineno, path)
            current["props"].append((parts[-1], parts[1]))
        elif parts[0] == "end_header":
            body = lineno
            break
        else:
            raise ParseError(f"unexpected header keyword {parts[0]!r}", lineno, path)
    if body is None:
        raise ParseError("missing end_header", len(lines), path)

    cursor = body
    for el in elements:
        if el["name"] != "vertex":
            cursor += el["count"]
            continue
        names = [p[0] for p in el["props"]]
        if not {"x", "y", "z"} <= set(names):
            raise ParseError("vertex element lacks x/y/z properties", body, path)
        color = [c for c in ("red", "green", "blue") if c in names]
        cols = [names.index(c) for c in ("x", "y", "z")] + [names.index(c) for c in color]
        scale = np.ones(len(cols))
        if len(color) == 3:
            types = dict(el["props"])
            scale[3:] = [255.0 if types[c] in ("uchar", "uint8") else 1.0 for c in color]
        else:
            cols = cols[:3]
            scale = scale[:3]
        rows = []
        for k in range(el["count"]):
            lineno = cursor + k + 1
            if lineno > len(lines):
                raise ParseError(f"file ends after {k} of {el['count']} vertices", lineno, path)
            fields = lines[lineno - 1].split()
            if len(fields) < len(names):
                raise ParseError(f"vertex has {len(fields)} values, header declares {len(names)}", lineno, path)
            vals = _floats(fields[: len(names)], lineno, path)
            rows.append([vals[c] for c in cols])
        if not rows:
            raise ParseError("PLY declares zero vertices", body, path)
        return np.array(rows) / scale
    raise ParseError("no vertex element", body, path)


def load_point_cloud(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ParseError(f"cannot read point cloud: {exc}", None, str(path)) from exc
    if path.suffix.lower() == ".ply" or text.startswith("ply"):
        return parse_ply(text, str(path))
    return parse_xyz(text, str(path))
