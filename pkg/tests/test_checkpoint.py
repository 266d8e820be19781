import struct

import pytest
import torch

from conftest import randomize
from retmask.checkpoint import (
    MAGIC,
    ShapeMismatchError,
    TruncatedCheckpointError,
    VersionMismatchError,
    load_checkpoint,
    load_checkpoint_meta,
    params_hash,
    save_checkpoint,
)
from retmask.model import ModelConfig, init_params


def test_roundtrip_byte_identical(tmp_path, tiny):
    p = randomize(tiny, 0)
    h1 = save_checkpoint(p, tmp_path / "a.ckpt", meta={"stage": "x"})
    q = load_checkpoint(tmp_path / "a.ckpt")
    assert q.equal(p)
    assert save_checkpoint(q, tmp_path / "b.ckpt", meta={"stage": "x"}) == h1
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert load_checkpoint_meta(tmp_path / "a.ckpt") == {"stage": "x"}
    assert params_hash(p) == params_hash(q)


def test_float64_roundtrip(tmp_path, tiny):
    p = randomize(tiny, 1).to(torch.float64)
    save_checkpoint(p, tmp_path / "d.ckpt")
    assert load_checkpoint(tmp_path / "d.ckpt").equal(p)


def test_corrupted_header_is_version_mismatch(tmp_path, tiny):
    path = tmp_path / "a.ckpt"
    save_checkpoint(tiny, path)
    blob = bytearray(path.read_bytes())
    blob[:8] = b"XXXXXXXX"
    path.write_bytes(bytes(blob))
    with pytest.raises(VersionMismatchError):
        load_checkpoint(path)
    good = MAGIC + struct.pack("<IQ", 99, 0)
    path.write_bytes(good)
    with pytest.raises(VersionMismatchError, match="99"):
        load_checkpoint(path)


def test_truncated(tmp_path, tiny):
    path = tmp_path / "a.ckpt"
    save_checkpoint(tiny, path)
    blob = path.read_bytes()
    for cut in (10, 40, len(blob) - 3):
        path.write_bytes(blob[:cut])
        with pytest.raises(TruncatedCheckpointError):
            load_checkpoint(path)


def test_shape_mismatch_names_tensor(tmp_path, tiny):
    path = tmp_path / "a.ckpt"
    save_checkpoint(tiny, path)
    other = ModelConfig(vocab_size=64, n_layers=2, n_heads=8, d_model=32, d_mlp=64, rng_seed=7)
    with pytest.raises(ShapeMismatchError, match="W_Q"):
        load_checkpoint(path, expected=other)
    init_params(other)
