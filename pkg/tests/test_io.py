import struct

import numpy as np
import pytest

from bdsl_spoter.features import ShardEntry, read_shard, write_shard
from bdsl_spoter.nn.checkpoint import (
    CheckpointError,
    checkpoint_bytes,
    load_checkpoint,
    parse_checkpoint,
    save_checkpoint,
)
from bdsl_spoter.nn.model import ModelConfig, init_params, model_forward
from bdsl_spoter.pose_data import DataError


def test_checkpoint_layout(tmp_path, tiny_config):
    p = init_params(tiny_config, 3)
    save_checkpoint(tmp_path / "m.bspt", p, vocab=["a", "b", "c"], meta={"k": 1})
    raw = (tmp_path / "m.bspt").read_bytes()
    magic, version, hlen = struct.unpack_from("<4sIQ", raw)
    assert magic == b"BSPT" and version == 1
    payload = raw[16 + hlen:]
    assert len(payload) == 4 * p.n_elements()
    first = np.frombuffer(payload[:4 * p["pos_table"].size], "<f4")
    assert np.array_equal(first, p["pos_table"].reshape(-1))


def test_checkpoint_roundtrip_bytes_and_logits(tmp_path, tiny_config, rng):
    p = init_params(tiny_config, 5)
    save_checkpoint(tmp_path / "a.bspt", p, vocab=["x", "y", "z"], preprocess={"alpha": 0.85})
    ck = load_checkpoint(tmp_path / "a.bspt")
    save_checkpoint(tmp_path / "b.bspt", ck)
    assert (tmp_path / "a.bspt").read_bytes() == (tmp_path / "b.bspt").read_bytes()
    P = rng.normal(size=(2, 8, 18)).astype(np.float32)
    assert np.array_equal(model_forward(P, p), model_forward(P, ck.params))
    assert ck.vocab == ["x", "y", "z"] and ck.config == tiny_config


@pytest.mark.parametrize("mutate", [
    lambda b: b"XXXX" + b[4:],
    lambda b: b[:4] + struct.pack("<I", 9) + b[8:],
    lambda b: b[:-4],
    lambda b: b + b"\0\0\0\0",
    lambda b: b[:10],
])
def test_checkpoint_corruption_detected(tiny_config, mutate):
    data = checkpoint_bytes(__import__("bdsl_spoter.nn.checkpoint", fromlist=["Checkpoint"]).Checkpoint(
        init_params(tiny_config)))
    with pytest.raises(CheckpointError):
        parse_checkpoint(mutate(data))


def test_shard_roundtrip(tmp_path, rng):
    x = rng.normal(size=(3, 5, 108)).astype(np.float32)
    entries = [ShardEntry(f"v{i}", "hello", f"s{i}") for i in range(3)]
    write_shard(tmp_path / "f.bfts", x, entries)
    raw = (tmp_path / "f.bfts").read_bytes()
    assert raw[:4] == b"BFTS" and struct.unpack_from("<IQII", raw, 4) == (1, 3, 5, 108)
    y, back = read_shard(tmp_path / "f.bfts")
    assert np.array_equal(x, y) and back == entries
    ym, _ = read_shard(tmp_path / "f.bfts", mmap=True)
    assert np.array_equal(x, ym)
    manifest = (tmp_path / "f.bfts.tsv").read_text().splitlines()
    assert manifest[0] == "row\tvideo_id\tlabel\tsigner_id\toffset"
    assert manifest[2].split("\t")[-1] == str(24 + 5 * 108 * 4)


def test_shard_truncated(tmp_path, rng):
    write_shard(tmp_path / "f.bfts", np.zeros((2, 3, 4), np.float32), [ShardEntry("a", "l", "s")] * 2)
    raw = (tmp_path / "f.bfts").read_bytes()
    (tmp_path / "f.bfts").write_bytes(raw[:-1])
    with pytest.raises(DataError):
        read_shard(tmp_path / "f.bfts")
