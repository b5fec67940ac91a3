import dataclasses
import struct

import numpy as np
import pytest

from mmformer.checkpoint import MAGIC, AdamState, Checkpoint, CheckpointError, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint
from mmformer.config import TrainConfig
from mmformer.network import init_params


@pytest.fixture
def ckpt(tiny_cfg):
    p = init_params(tiny_cfg, 0)
    rng = np.random.default_rng(3)
    adam = AdamState(
        m={k: rng.standard_normal(v.shape).astype(np.float32) for k, v in list(p.items())[:5]},
        v={k: rng.random(v.shape).astype(np.float32) for k, v in list(p.items())[:5]},
        t=7,
        steps={k: 7 for k in list(p)[:5]},
    )
    return Checkpoint(p, tiny_cfg, TrainConfig(lr=1e-3), adam, np.random.default_rng(9).bit_generator.state, {"epoch": 3})


def test_roundtrip_is_bit_identical(ckpt, tmp_path):
    save_checkpoint(tmp_path / "m.ckpt", ckpt)
    back = load_checkpoint(tmp_path / "m.ckpt", expected=ckpt.model_config)
    assert back.params.fingerprint() == ckpt.params.fingerprint()
    assert back.model_config == ckpt.model_config and back.train_config == ckpt.train_config
    assert back.adam.t == 7 and back.adam.steps == ckpt.adam.steps
    for k in ckpt.adam.m:
        assert back.adam.m[k].tobytes() == ckpt.adam.m[k].tobytes()
        assert back.adam.v[k].tobytes() == ckpt.adam.v[k].tobytes()
    assert back.rng_state == ckpt.rng_state and back.meta == {"epoch": 3}
    rng = np.random.default_rng()
    rng.bit_generator.state = back.rng_state
    assert rng.random() == np.random.default_rng(9).random()


def test_encoding_is_deterministic(ckpt):
    assert encode_checkpoint(ckpt) == encode_checkpoint(ckpt)
    assert encode_checkpoint(ckpt)[:8] == MAGIC


def test_config_hash_mismatch_refused(ckpt, tmp_path):
    save_checkpoint(tmp_path / "m.ckpt", ckpt)
    other = dataclasses.replace(ckpt.model_config, token_dim=16)
    with pytest.raises(CheckpointError, match="config hash"):
        load_checkpoint(tmp_path / "m.ckpt", expected=other)


@pytest.mark.parametrize("cut", [1, 4, 100, 5000])
def test_truncation_detected(ckpt, cut):
    raw = encode_checkpoint(ckpt)
    with pytest.raises(CheckpointError):
        decode_checkpoint(raw[:-cut])


def test_bit_flip_detected(ckpt):
    raw = bytearray(encode_checkpoint(ckpt))
    raw[len(raw) // 2] ^= 0x10
    with pytest.raises(CheckpointError, match="checksum"):
        decode_checkpoint(bytes(raw))


def test_bad_magic_and_version(ckpt):
    raw = encode_checkpoint(ckpt)
    with pytest.raises(CheckpointError, match="magic"):
        decode_checkpoint(b"NOTACKPT" + raw[8:])
    bumped = raw[:8] + struct.pack("<I", 99) + raw[12:]
    with pytest.raises(CheckpointError, match="version"):
        decode_checkpoint(bumped)


def test_atomic_save_leaves_no_temp(ckpt, tmp_path):
    save_checkpoint(tmp_path / "sub" / "m.ckpt", ckpt)
    assert [p.name for p in (tmp_path / "sub").iterdir()] == ["m.ckpt"]
