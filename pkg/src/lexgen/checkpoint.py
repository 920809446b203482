"""Checkpoint directory: ``manifest.json`` plus a raw little-endian tensor payload.

The manifest lists every tensor with its name, shape, dtype, byte offset and
length. Records tile ``payload.bin`` exactly, and a sha256 of the payload is
stored so corruption is caught before any tensor is built.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Vocab
from .errors import CheckpointError, ConfigError
from .transformer import ModelConfig, Transformer

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
PAYLOAD = "payload.bin"
_DTYPES = {"float32": "<f4", "float64": "<f8"}


@dataclass
class Checkpoint:
    model: Transformer
    vocab: Vocab
    meta: dict = field(default_factory=dict)


def save_checkpoint(model: Transformer, vocab: Vocab, path, meta: dict | None = None) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    chunks = []
    offset = 0
    for name, t in model.named_parameters().items():
        dtype = str(t.data.dtype)
        raw = np.ascontiguousarray(t.data, dtype=_DTYPES[dtype]).tobytes()
        records.append({"name": name, "shape": list(t.shape), "dtype": dtype, "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "model_config": model.config.to_dict(),
        "tensors": records,
        "vocab": vocab.to_json(),
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "meta": dict(meta or {}),
    }
    (out / PAYLOAD).write_bytes(payload)
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    return out


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> Checkpoint:
    """Load and verify a checkpoint.

    ``expected_config`` (when given) must describe the same parameter set,
    e.g. loading a shared-only checkpoint as an after-SAN model is refused.
    """
    root = Path(path)
    try:
        manifest = json.loads((root / MANIFEST).read_text(encoding="utf-8"))
        payload = (root / PAYLOAD).read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(f"incomplete checkpoint at {root}: {exc.filename} missing") from None
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"manifest is not valid JSON: {exc}") from None

    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version!r} (expected {FORMAT_VERSION})")
    if len(payload) != manifest.get("payload_bytes"):
        raise CheckpointError(f"payload is {len(payload)} bytes, manifest says {manifest.get('payload_bytes')}")
    if hashlib.sha256(payload).hexdigest() != manifest.get("payload_sha256"):
        raise CheckpointError("payload hash mismatch; refusing to load a corrupt checkpoint")

    tensors: dict[str, np.ndarray] = {}
    offset = 0
    for rec in manifest["tensors"]:
        if rec["offset"] != offset:
            raise CheckpointError(f"tensor {rec['name']} does not start where the previous one ended")
        dt = np.dtype(_DTYPES[rec["dtype"]])
        count = int(np.prod(rec["shape"], dtype=np.int64))
        if count * dt.itemsize != rec["nbytes"]:
            raise CheckpointError(f"tensor {rec['name']}: byte length disagrees with its shape")
        arr = np.frombuffer(payload, dtype=dt, count=count, offset=offset).reshape(rec["shape"])
        tensors[rec["name"]] = arr.astype(rec["dtype"])
        offset += rec["nbytes"]
    if offset != len(payload):
        raise CheckpointError("tensor records do not cover the whole payload")

    config = ModelConfig.from_dict(manifest["model_config"])
    if expected_config is not None:
        config = expected_config
    try:
        model = Transformer.from_tensors(config, tensors)
    except ConfigError as exc:
        raise CheckpointError(str(exc)) from None
    return Checkpoint(model, Vocab.from_json(manifest["vocab"]), manifest.get("meta", {}))
