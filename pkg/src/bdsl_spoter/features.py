"""Flat binary shards of preprocessed feature sequences.

Shard layout (little-endian)::

    b"BFTS"  u32 version  u64 count  u32 T  u32 dim  count*T*dim float32

Each shard has a tab-separated sidecar manifest with columns
``row, video_id, label, signer_id, offset``. ``offset`` is the byte offset
of the row's first value in the shard.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .pose_data import DataError

MAGIC = b"BFTS"
VERSION = 1
_HEAD = struct.Struct("<4sIQII")
_F32 = np.dtype("<f4")
MANIFEST_COLUMNS = ("row", "video_id", "label", "signer_id", "offset")


@dataclass(frozen=True)
class ShardEntry:
    video_id: str
    label: str
    signer_id: str


def manifest_path(shard_path) -> Path:
    p = Path(shard_path)
    return p.with_name(p.name + ".tsv")


def write_shard(path, features: np.ndarray, entries) -> None:
    feats = np.ascontiguousarray(features, dtype=_F32)
    if feats.ndim != 3:
        raise ValueError(f"features must be (N, T, dim), got {feats.shape}")
    entries = list(entries)
    n, T, dim = feats.shape
    if len(entries) != n:
        raise ValueError(f"{len(entries)} manifest entries for {n} rows")
    with open(path, "wb") as fh:
        fh.write(_HEAD.pack(MAGIC, VERSION, n, T, dim))
        fh.write(feats.tobytes())
    row_bytes = T * dim * 4
    with open(manifest_path(path), "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for i, e in enumerate(entries):
            w.writerow((i, e.video_id, e.label, e.signer_id, _HEAD.size + i * row_bytes))


def read_shard(path, mmap: bool = False):
    """Return ``(features (N, T, dim) float32, entries)``."""
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read(_HEAD.size)
    if len(raw) < _HEAD.size:
        raise DataError(f"{path}: too short for a feature shard")
    magic, version, n, T, dim = _HEAD.unpack(raw)
    if magic != MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise DataError(f"{path}: unsupported shard version {version}")
    expected = _HEAD.size + n * T * dim * 4
    if path.stat().st_size != expected:
        raise DataError(f"{path}: size {path.stat().st_size} != expected {expected}")
    if mmap and n:
        feats = np.memmap(path, dtype=_F32, mode="r", offset=_HEAD.size, shape=(n, T, dim))
    else:
        feats = np.fromfile(path, dtype=_F32, offset=_HEAD.size).reshape(n, T, dim)
    entries = []
    mpath = manifest_path(path)
    if mpath.exists():
        with open(mpath, encoding="utf-8", newline="") as fh:
            rows = list(csv.reader(fh, delimiter="\t"))
        if not rows or tuple(rows[0]) != MANIFEST_COLUMNS:
            raise DataError(f"{mpath}: bad manifest header")
        for i, r in enumerate(rows[1:]):
            if len(r) != len(MANIFEST_COLUMNS) or int(r[0]) != i:
                raise DataError(f"{mpath}: malformed row {i}")
            entries.append(ShardEntry(r[1], r[2], r[3]))
        if len(entries) != n:
            raise DataError(f"{mpath}: {len(entries)} rows for {n} shard records")
    return feats, entries
