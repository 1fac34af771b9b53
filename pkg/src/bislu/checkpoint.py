"""Single-file model checkpoints.

Layout::

    b"BISLUCKP"                      8-byte magic
    uint64 little-endian             manifest length in bytes
    manifest                         UTF-8 JSON, sorted keys, no whitespace
    blob                             little-endian float32 tensors, back to back

The manifest carries the format version, the full config snapshot, both label
inventories, the vocabulary (inline, with its SHA-256), the metric recorded at
save time and a tensor table of (name, shape, byte offset).
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from . import compute as C
from .compute import RngState
from .config import config_from_dict, config_to_dict
from .data import LabelSets
from .encoder import Vocab
from .model import BiSLU
from .training import TrainConfig

MAGIC = b"BISLUCKP"
FORMAT_VERSION = 1
_LE_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    model: BiSLU
    vocab: Vocab
    config: TrainConfig
    metric: dict[str, Any]
    manifest: dict[str, Any]

    @property
    def labels(self) -> LabelSets:
        return self.model.labels


def vocab_digest(vocab: Vocab) -> str:
    return hashlib.sha256("\n".join(vocab.tokens).encode("utf-8")).hexdigest()


def encode_checkpoint(model: BiSLU, vocab: Vocab, cfg: TrainConfig, metric: dict | None = None) -> bytes:
    table, chunks, offset = [], [], 0
    seen = set()
    for name, p in model.named_parameters():
        if name in seen:
            raise CheckpointError(f"duplicate parameter name {name!r}")
        seen.add(name)
        raw = np.ascontiguousarray(p.data, dtype=_LE_F32).tobytes()
        table.append({"name": name, "shape": list(p.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": config_to_dict(cfg),
        "labels": {"intents": list(model.labels.intents), "slots": list(model.labels.slots)},
        "vocab": {"tokens": list(vocab.tokens), "sha256": vocab_digest(vocab), "lowercase": vocab.lowercase,
                  "pieces": {w: list(p) for w, p in sorted(vocab.pieces.items())}},
        "metric": metric or {},
        "tensors": table,
        "blob_bytes": offset,
    }
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(chunks)


def save_checkpoint(path, model: BiSLU, vocab: Vocab, cfg: TrainConfig, metric: dict | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(model, vocab, cfg, metric))


def decode_checkpoint(data: bytes, source: str = "<bytes>") -> Checkpoint:
    if data[:8] != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    if len(data) < 16:
        raise CheckpointError(f"{source}: truncated header")
    (n,) = struct.unpack("<Q", data[8:16])
    try:
        manifest = json.loads(data[16:16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: corrupt manifest: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{source}: unsupported format version {manifest.get('format_version')}")
    blob = data[16 + n:]
    if len(blob) != manifest["blob_bytes"]:
        raise CheckpointError(f"{source}: blob has {len(blob)} bytes, manifest says {manifest['blob_bytes']}")
    v = manifest["vocab"]
    vocab = Vocab(v["tokens"], {w: tuple(p) for w, p in v["pieces"].items()}, v["lowercase"])
    if vocab_digest(vocab) != v["sha256"]:
        raise CheckpointError(f"{source}: vocabulary digest mismatch")
    cfg = config_from_dict(manifest["config"])
    labels = LabelSets(tuple(manifest["labels"]["intents"]), tuple(manifest["labels"]["slots"]))
    model = BiSLU(cfg.model, labels, len(vocab), RngState(cfg.seed, 0))
    state = {}
    for entry in manifest["tensors"]:
        if entry["name"] in state:
            raise CheckpointError(f"{source}: tensor {entry['name']!r} listed twice")
        count = int(np.prod(entry["shape"], dtype=np.int64))
        if entry["offset"] < 0 or entry["offset"] + 4 * count > len(blob):
            raise CheckpointError(f"{source}: tensor {entry['name']!r} runs past the blob")
        arr = np.frombuffer(blob, dtype=_LE_F32, count=count, offset=entry["offset"])
        state[entry["name"]] = arr.astype(np.float32).reshape(entry["shape"])
    try:
        model.load_state_dict(state)
    except (KeyError, C.DimensionError) as exc:
        raise CheckpointError(f"{source}: tensors do not fit the configured model: {exc}") from exc
    model.eval()
    return Checkpoint(model, vocab, cfg, manifest["metric"], manifest)


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes(), str(path))
