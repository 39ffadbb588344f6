"""Tensor container round-trips and corruption handling."""

import struct

import numpy as np
import pytest

from vclab import checkpoint


def test_roundtrip_preserves_values_shapes_and_order(tmp_path):
    rng = np.random.default_rng(1)
    tensors = {
        "weights": rng.standard_normal((7, 3)),
        "bias": rng.standard_normal(4),
        "scalar": np.asarray(2.5),
        "cube": rng.standard_normal((2, 2, 2)),
    }
    path = tmp_path / "t.ckpt"
    checkpoint.save_tensors(path, tensors)
    back = checkpoint.load_tensors(path)
    assert list(back) == list(tensors)
    for name, arr in tensors.items():
        assert back[name].shape == np.asarray(arr).shape
        assert np.array_equal(back[name], np.asarray(arr, dtype=np.float64))


def test_scalar_comes_back_rank_zero(tmp_path):
    path = tmp_path / "s.ckpt"
    checkpoint.save_tensors(path, {"lambda": np.asarray(1024.0)})
    back = checkpoint.load_tensors(path)
    assert back["lambda"].shape == ()
    assert float(back["lambda"]) == 1024.0


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
    with pytest.raises(ValueError, match="magic"):
        checkpoint.load_tensors(path)


def test_truncated_payload_rejected(tmp_path):
    path = tmp_path / "t.ckpt"
    checkpoint.save_tensors(path, {"a": np.ones((4, 4))})
    blob = path.read_bytes()
    path.write_bytes(blob[:-8])
    with pytest.raises(ValueError, match="truncated"):
        checkpoint.load_tensors(path)


def test_trailing_garbage_rejected(tmp_path):
    path = tmp_path / "t.ckpt"
    checkpoint.save_tensors(path, {"a": np.ones(2)})
    path.write_bytes(path.read_bytes() + b"xx")
    with pytest.raises(ValueError, match="trailing"):
        checkpoint.load_tensors(path)


def test_duplicate_names_rejected(tmp_path):
    path = tmp_path / "d.ckpt"
    entry = struct.pack("<I", 1) + b"a" + struct.pack("<II", 1, 1) + \
        struct.pack("<d", 0.0)
    path.write_bytes(checkpoint.MAGIC + struct.pack("<I", 2) + entry + entry)
    with pytest.raises(ValueError, match="duplicate"):
        checkpoint.load_tensors(path)
