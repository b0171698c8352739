"""Binary checkpoint format.

Layout::

    b"ASGR" | u32 version | u64 header length | UTF-8 JSON header | payload

The payload is the little-endian float64 parameter arrays concatenated in
the header's manifest order. Headers are written with sorted keys so equal
checkpoints are equal byte for byte.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError
from .graph import ClassLabelSet, Vocabulary
from .model import ModelConfig
from .numerics import ParameterStore

log = logging.getLogger(__name__)

MAGIC = b"ASGR"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: dict
    class_names: list[str]
    params: ParameterStore
    object_vocab_hash: str = ""
    relation_vocab_hash: str = ""
    history: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    optimizer: dict = field(default_factory=dict)
    version: int = VERSION
    # wall-clock seconds per epoch; kept out of the file so reruns stay byte-identical
    timings: list[float] = field(default_factory=list, compare=False, repr=False)

    @property
    def class_set(self) -> ClassLabelSet:
        return ClassLabelSet(tuple(self.class_names))

    def check_vocabulary(self, vocab: Vocabulary, override: bool = False) -> None:
        ok = (vocab.object_hash(), vocab.relation_hash()) == (self.object_vocab_hash, self.relation_vocab_hash)
        if ok:
            return
        if not override:
            raise CheckpointError("vocabulary hash mismatch: checkpoint was trained with a different label space")
        log.warning("vocabulary hash mismatch overridden; label indices may not mean the same thing")


def _header(ckpt: Checkpoint) -> tuple[dict, list[np.ndarray]]:
    manifest, arrays, offset = [], [], 0
    for name, value in ckpt.params.items():
        arr = np.ascontiguousarray(value, dtype="<f8")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset,
                         "trainable": ckpt.params.is_trainable(name)})
        offset += arr.nbytes
        arrays.append(arr)
    header = {
        "format_version": ckpt.version,
        "model_config": ckpt.model_config.to_dict(),
        "train_config": ckpt.train_config,
        "class_names": list(ckpt.class_names),
        "vocabulary": {"objects_sha256": ckpt.object_vocab_hash, "relations_sha256": ckpt.relation_vocab_hash},
        "history": ckpt.history,
        "best_epoch": ckpt.best_epoch,
        "optimizer": ckpt.optimizer,
        "parameters": manifest,
        "payload_bytes": offset,
    }
    return header, arrays


def to_bytes(ckpt: Checkpoint) -> bytes:
    header, arrays = _header(ckpt)
    blob = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(blob)) + blob + b"".join(a.tobytes() for a in arrays)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def from_bytes(data: bytes) -> Checkpoint:
    if len(data) < _PREFIX.size:
        raise CheckpointError("truncated checkpoint: header prefix incomplete")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic bytes)")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    start = _PREFIX.size
    if len(data) < start + hlen:
        raise CheckpointError("truncated checkpoint: header incomplete")
    try:
        header = json.loads(data[start : start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    payload = memoryview(data)[start + hlen :]
    expected = header["payload_bytes"]
    if len(payload) != expected:
        raise CheckpointError(f"payload error: {len(payload)} bytes present, manifest describes {expected}")
    params = ParameterStore()
    for entry in header["parameters"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        off = entry["offset"]
        if off + 8 * count > expected:
            raise CheckpointError(f"payload error: parameter {entry['name']!r} overruns the payload")
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=off).reshape(shape)
        params.add(entry["name"], arr, trainable=entry.get("trainable", True))
    vocab = header.get("vocabulary", {})
    return Checkpoint(
        model_config=ModelConfig.from_dict(header["model_config"]),
        train_config=header["train_config"],
        class_names=header["class_names"],
        params=params,
        object_vocab_hash=vocab.get("objects_sha256", ""),
        relation_vocab_hash=vocab.get("relations_sha256", ""),
        history=header["history"],
        best_epoch=header["best_epoch"],
        optimizer=header.get("optimizer", {}),
        version=header["format_version"],
    )


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return from_bytes(data)
