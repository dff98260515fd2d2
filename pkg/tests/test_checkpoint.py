import json
import struct

import numpy as np
import pytest

from hyperpose.checkpoint import (MAGIC, CheckpointError, CheckpointMismatchError, CheckpointVersionError,
                                  TruncatedCheckpointError, encode_checkpoint, load_checkpoint, read_checkpoint,
                                  read_manifest, save_checkpoint)
from hyperpose.config import Config, ConfigError, desk_model, get_preset
from hyperpose.model import HyperPoseModel


@pytest.fixture(scope="module")
def model():
    return HyperPoseModel(desk_model(), rng=3)


def test_round_trip_is_bit_exact(model, tmp_path):
    path = save_checkpoint(model, tmp_path / "m.ckpt", meta={"phase": 1})
    ck = read_checkpoint(path)
    a, b = model.state_dict(), ck.model.state_dict()
    assert a.keys() == b.keys()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert ck.meta == {"phase": 1}
    x = np.random.default_rng(0).random((2, 3, 32, 32))
    assert np.array_equal(model.forward(x).position.data, ck.model.forward(x).position.data)


def test_encoding_is_deterministic(model):
    assert encode_checkpoint(model) == encode_checkpoint(model)


def test_manifest_lists_every_parameter(model, tmp_path):
    path = save_checkpoint(model, tmp_path / "m.ckpt")
    manifest, blobs = read_manifest(path)
    names = [t["name"] for t in manifest["tensors"]]
    assert names == [n for n, _ in model.named_parameters()]
    assert len(blobs) == sum(t["nbytes"] for t in manifest["tensors"])
    assert manifest["config"]["model"]["main_dim"] == 16
    assert not list(tmp_path.glob("*.tmp"))


def test_config_travels_with_checkpoint(model, tmp_path):
    cfg = get_preset("desk")
    cfg = Config(model=model.config, train=cfg.train, data=cfg.data)
    ck = read_checkpoint(save_checkpoint(model, tmp_path / "m.ckpt", cfg))
    assert ck.config == cfg


def test_config_must_describe_model(model, tmp_path):
    with pytest.raises(ConfigError):
        save_checkpoint(model, tmp_path / "m.ckpt", Config(model=desk_model(main_dim=32)))


def test_bad_magic(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"NOTACKPT" + bytes(20))
    with pytest.raises(CheckpointError, match="magic"):
        read_manifest(tmp_path / "x.ckpt")


def test_future_version(model, tmp_path):
    raw = bytearray(encode_checkpoint(model))
    struct.pack_into("<I", raw, len(MAGIC), 99)
    (tmp_path / "v.ckpt").write_bytes(bytes(raw))
    with pytest.raises(CheckpointVersionError):
        read_manifest(tmp_path / "v.ckpt")


@pytest.mark.parametrize("keep", [4, 40, -100])
def test_truncated_file(model, tmp_path, keep):
    raw = encode_checkpoint(model)
    (tmp_path / "t.ckpt").write_bytes(raw[:keep])
    with pytest.raises(TruncatedCheckpointError):
        load_checkpoint(tmp_path / "t.ckpt")


def test_head_spec_mismatch_names_tensor(model, tmp_path):
    path = save_checkpoint(model, tmp_path / "m.ckpt")
    with pytest.raises(CheckpointMismatchError) as err:
        read_checkpoint(path, desk_model(position_head=(64, 16, 3)))
    assert err.value.name.startswith("position.")
    assert err.value.stored != err.value.expected


def test_architecture_mismatch_unknown_or_missing(model, tmp_path):
    path = save_checkpoint(model, tmp_path / "m.ckpt")
    with pytest.raises(CheckpointMismatchError):
        read_checkpoint(path, desk_model(output_mode="direct"))
    with pytest.raises(CheckpointMismatchError):
        read_checkpoint(path, desk_model(hypernet_arch="backbone_embedding"))


def test_corrupt_manifest(model, tmp_path):
    raw = bytearray(encode_checkpoint(model))
    raw[20] = ord("}")
    (tmp_path / "c.ckpt").write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        read_manifest(tmp_path / "c.ckpt")


def test_manifest_is_canonical_json(model):
    raw = encode_checkpoint(model, meta={"b": 1, "a": 2})
    mlen = struct.unpack_from("<Q", raw, 12)[0]
    text = raw[20:20 + mlen].decode()
    assert text == json.dumps(json.loads(text), sort_keys=True, separators=(",", ":"))
