"""Binary checkpoint files.

Layout (all integers little-endian)::

    b"BSPT"  u32 version  u64 header_len  header (UTF-8 JSON)  payload

The header holds the model config, the tensor directory (name, shape, byte
offset into the payload), and optional vocabulary, preprocessing config and
free-form metadata. The payload is the float32 tensors in directory order.
JSON is written with sorted keys and fixed separators, so a file that is
loaded and saved again is reproduced byte for byte.
"""
from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ConfigError, ModelConfig, ModelParams, param_shapes

MAGIC = b"BSPT"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    """Unreadable or inconsistent checkpoint file."""


@dataclass
class Checkpoint:
    params: ModelParams
    vocab: list | None = None
    preprocess: dict | None = None
    meta: dict = field(default_factory=dict)

    @property
    def config(self) -> ModelConfig:
        return self.params.config


def _header(ckpt: Checkpoint) -> bytes:
    directory, offset = [], 0
    for name, t in ckpt.params.items():
        nbytes = t.size * 4
        directory.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    head = {
        "config": ckpt.config.to_dict(),
        "tensors": directory,
        "vocab": list(ckpt.vocab) if ckpt.vocab is not None else None,
        "preprocess": ckpt.preprocess,
        "meta": ckpt.meta,
    }
    return json.dumps(head, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    ckpt.params.validate()
    head = _header(ckpt)
    parts = [_PREFIX.pack(MAGIC, VERSION, len(head)), head]
    parts += [np.ascontiguousarray(t, dtype=_F32).tobytes() for t in ckpt.params.values()]
    return b"".join(parts)


def save_checkpoint(path, params: ModelParams, vocab=None, preprocess=None, meta=None) -> None:
    """Write atomically (temp file then rename)."""
    if isinstance(params, Checkpoint):
        ckpt = params
    else:
        ckpt = Checkpoint(params, vocab, preprocess, dict(meta or {}))
    data = checkpoint_bytes(ckpt)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def parse_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < _PREFIX.size:
        raise CheckpointError("file too short for a checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = _PREFIX.size + hlen
    if start > len(data):
        raise CheckpointError("truncated header")
    try:
        head = json.loads(data[_PREFIX.size:start].decode("utf-8"))
        cfg = ModelConfig.from_dict(head["config"])
        directory = head["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"bad header: {exc}") from None
    expected = param_shapes(cfg)
    if [(e["name"], tuple(e["shape"])) for e in directory] != expected:
        raise CheckpointError("tensor directory does not match the stored config")
    payload = memoryview(data)[start:]
    params = ModelParams(cfg)
    pos = 0
    for e in directory:
        n = math.prod(e["shape"])
        if e["offset"] != pos or e["nbytes"] != 4 * n:
            raise CheckpointError(f"{e['name']}: inconsistent offset or size")
        if pos + 4 * n > len(payload):
            raise CheckpointError(f"{e['name']}: payload truncated")
        arr = np.frombuffer(payload, dtype=_F32, count=n, offset=pos)
        params[e["name"]] = arr.astype(np.float32).reshape(e["shape"])
        pos += 4 * n
    if pos != len(payload):
        raise CheckpointError(f"{len(payload) - pos} trailing bytes after payload")
    try:
        params.validate()
    except ConfigError as exc:
        raise CheckpointError(str(exc)) from None
    return Checkpoint(params, head.get("vocab"), head.get("preprocess"), head.get("meta") or {})


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())
