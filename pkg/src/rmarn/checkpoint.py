"""Binary checkpoint format.

Layout (little-endian)::

    b"RMCK" | u32 version | u64 header_len | header (UTF-8 JSON) | payload

The header holds the model config, free-form metadata and a manifest of
named tensors with shapes and byte offsets into the float32 payload.
"""
import json
import os
import struct

import numpy as np

from .errors import CheckpointError, CheckpointShapeError, CheckpointVersionError, ConfigError, CorruptCheckpointError
from .model import RMARN, ModelConfig

MAGIC = b"RMCK"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


def encode_checkpoint(model, meta=None):
    tensors, chunks, offset = [], [], 0
    for name, t in model.named_parameters().items():
        raw = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        tensors.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format_version": VERSION,
        "dtype": "float32",
        "config": model.config.to_dict(),
        "meta": meta or {},
        "tensors": tensors,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(blob)) + blob + b"".join(chunks)


def save_checkpoint(model, path, meta=None):
    """Write atomically (temp file + rename) so a crash never leaves half a checkpoint."""
    data = encode_checkpoint(model, meta)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def decode_checkpoint(data):
    """Parse bytes into ``(model, meta)``."""
    if len(data) < _PREFIX.size:
        raise CorruptCheckpointError(f"checkpoint truncated: {len(data)} bytes, prefix needs {_PREFIX.size}")
    magic, version, header_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CorruptCheckpointError(f"not a checkpoint (magic {magic!r})")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, this build reads {VERSION}")
    start = _PREFIX.size + header_len
    if len(data) < start:
        raise CorruptCheckpointError("checkpoint truncated inside the header")
    try:
        header = json.loads(data[_PREFIX.size:start].decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        manifest = header["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        if isinstance(exc, ConfigError):
            raise CheckpointError(f"checkpoint config rejected: {exc}") from exc
        raise CorruptCheckpointError(f"unreadable checkpoint header: {exc}") from exc
    payload = memoryview(data)[start:]
    expected = sum(entry["nbytes"] for entry in manifest)
    if len(payload) != expected:
        raise CorruptCheckpointError(f"payload is {len(payload)} bytes, manifest describes {expected}")

    model = RMARN.initialize(config, seed=0, dtype=np.float32)
    params = model.named_parameters()
    names = [entry["name"] for entry in manifest]
    if set(names) != set(params):
        missing, extra = sorted(set(params) - set(names)), sorted(set(names) - set(params))
        raise CheckpointShapeError(f"tensor set mismatch: missing {missing}, unexpected {extra}")
    for entry in manifest:
        target = params[entry["name"]]
        shape = tuple(entry["shape"])
        if shape != target.shape:
            raise CheckpointShapeError(f"{entry['name']}: stored shape {shape}, config implies {target.shape}")
        if entry["nbytes"] != 4 * int(np.prod(shape, dtype=np.int64)):
            raise CorruptCheckpointError(f"{entry['name']}: byte count disagrees with shape")
        chunk = payload[entry["offset"]: entry["offset"] + entry["nbytes"]]
        target.data = np.frombuffer(chunk, dtype="<f4").astype(np.float32).reshape(shape)
    return model, header.get("meta", {})


def load_checkpoint(path):
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return decode_checkpoint(data)
