import numpy as np
import pytest

from vlmadapt.checkpoint import CheckpointError, load_checkpoint, load_into_store, save_checkpoint
from vlmadapt.params import ParameterStore
from vlmadapt.rng import Rng


def build_store(seed=5):
    rng = Rng(seed)
    store = ParameterStore()
    store.add("emb.tokens", rng.normals((6, 4)), "lm_block")
    store.add("blk0.gate", rng.normals((1,)), "gated_xattn")
    store.add("venc.proj", rng.normals((8, 4)), "vision_encoder")
    store.add("ln.g", rng.normals((4,)), "layernorm", trainable=False)
    return store


def test_roundtrip_bit_exact(tmp_path):
    store = build_store()
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, store)
    records = load_checkpoint(path)
    assert [r[0] for r in records] == store.names()
    for name, arr, trainable in records:
        assert arr.tobytes() == store[name].data.tobytes()
        assert trainable == store.is_trainable(name)


def test_roundtrip_through_fresh_store(tmp_path):
    store = build_store()
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, store)
    other = build_store(seed=123)  # different values, same structure
    load_into_store(path, other)
    assert other.state_hash() == store.state_hash()


def test_double_save_identical_bytes(tmp_path):
    store = build_store()
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(p1, store)
    save_checkpoint(p2, store)
    assert p1.read_bytes() == p2.read_bytes()


def test_bad_magic_rejected(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"NOTACKPT" + b"\x00" * 16)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(p)


def test_mismatched_shape_rejected(tmp_path):
    store = build_store()
    p = tmp_path / "model.ckpt"
    save_checkpoint(p, store)
    other = ParameterStore()
    rng = Rng(1)
    other.add("emb.tokens", rng.normals((6, 5)), "lm_block")
    with pytest.raises(CheckpointError):
        load_into_store(p, other)


def test_trainable_flags_restored(tmp_path):
    store = build_store()
    store.set_trainable_groups({"gated_xattn"})
    p = tmp_path / "model.ckpt"
    save_checkpoint(p, store)
    other = build_store()
    load_into_store(p, other)
    assert other.is_trainable("blk0.gate")
    assert not other.is_trainable("emb.tokens")
    assert not other.is_trainable("venc.proj")
