import json
import struct

import numpy as np
import pytest

from gmha import attention as A
from gmha.checkpoint import MAGIC, CheckpointError, load, load_model, save, save_model
from gmha.config import PRESETS, expand_presets, load_config, parse_config, shrink_dims
from gmha.errors import ConfigurationError
from gmha.model import ToyLM, init_weights

DIMS = A.ModelDims(H=8, L=2, n_heads=2, head_dim=4, latent_C=4, vocab_V=257, ffn_F=12)


def test_round_trip_is_bit_exact(tmp_path, rng):
    tensors = {"a": rng.normal(size=(3, 4)), "b": np.array([np.inf, -0.0, 1e-310]), "scalar": np.array(2.5)}
    save(tmp_path / "x.ckpt", {"note": "hi"}, tensors)
    manifest, back = load(tmp_path / "x.ckpt")
    assert manifest["note"] == "hi"
    for k, v in tensors.items():
        assert back[k].shape == v.shape
        assert back[k].tobytes() == v.tobytes()


def test_layout_is_as_documented(tmp_path):
    save(tmp_path / "x.ckpt", {}, {"w": np.array([[1.0, 2.0]])})
    buf = (tmp_path / "x.ckpt").read_bytes()
    assert buf[:5] == MAGIC
    (n,) = struct.unpack_from("<Q", buf, 5)
    assert json.loads(buf[13:13 + n])["format_version"] == 1
    off = 13 + n
    assert struct.unpack_from("<I", buf, off) == (1,)
    assert struct.unpack_from("<I", buf, off + 4) == (1,)
    assert buf[off + 8:off + 9] == b"w"
    assert struct.unpack_from("<I2Q", buf, off + 9) == (2, 1, 2)
    assert struct.unpack_from("<2d", buf, off + 29) == (1.0, 2.0)


def test_bad_magic(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"NOPE!" + b"\0" * 20)
    with pytest.raises(CheckpointError, match="magic"):
        load(tmp_path / "x.ckpt")


def test_truncated_file(tmp_path, rng):
    save(tmp_path / "x.ckpt", {}, {"a": rng.normal(size=10)})
    buf = (tmp_path / "x.ckpt").read_bytes()
    (tmp_path / "y.ckpt").write_bytes(buf[:-8])
    with pytest.raises(CheckpointError):
        load(tmp_path / "y.ckpt")


def test_model_round_trip(tmp_path):
    spec = A.ArchSpec("mfa_kr", kr_variant="gated", pos_embed="rope")
    model = init_weights(ToyLM(spec, DIMS), 4)
    save_model(tmp_path / "m.ckpt", model, step=3, seed=4)
    back, manifest = load_model(tmp_path / "m.ckpt")
    assert back.spec == spec and back.dims == DIMS and manifest["step"] == 3
    assert all(back.params[k].tobytes() == v.tobytes() for k, v in model.params.items())


def test_model_shape_mismatch(tmp_path):
    model = init_weights(ToyLM(A.ArchSpec("mfa"), DIMS), 0)
    model.params["lm_head"] = np.zeros((8, 3))
    save_model(tmp_path / "m.ckpt", model)
    with pytest.raises(CheckpointError, match="lm_head"):
        load_model(tmp_path / "m.ckpt")


# -- config ---------------------------------------------------------------------------------------

def test_parse_full_document():
    rc = parse_config({"arch": {"kind": "mfa", "pos_embed": "rope"},
                       "dims": {"H": 64, "L": 2, "n_heads": 4, "head_dim": 32, "latent_C": 32, "ffn_F": 172},
                       "train": {"total_steps": 300, "warmup_steps": 30}})
    assert rc.arch.kind == "mfa" and rc.dims.H == 64 and rc.train.total_steps == 300
    assert rc.train.dims == rc.dims


def test_preset_with_override():
    rc = parse_config({"preset": "1b-mfa", "dims": {"L": 2}})
    assert rc.dims.L == 2 and rc.dims.latent_C == 256 and rc.train.peak_lr == 9.63e-4


@pytest.mark.parametrize("doc", [
    {"arch": {"kind": "mfa"}, "dims": {"H": 8}, "extra": 1},
    {"arch": {"kind": "mfa", "heads": 2}, "dims": {"H": 8}},
    {"preset": "1b-mfa", "train": {"learning_rate": 1.0}},
    {"preset": "nope"},
    {"dims": {"H": 8}},
])
def test_strict_rejection(doc):
    with pytest.raises(ConfigurationError):
        parse_config(doc)


def test_load_config_bad_json(tmp_path):
    (tmp_path / "c.json").write_text("{not json")
    with pytest.raises(ConfigurationError):
        load_config(tmp_path / "c.json")


def test_preset_groups():
    assert expand_presets(["7b"]) == ["7b-mha", "7b-mfa", "7b-mfa-kr"]
    with pytest.raises(ConfigurationError):
        expand_presets(["13b"])


def test_shrink_keeps_structure():
    spec, dims = PRESETS["1b-mla"]
    small = shrink_dims(dims, 16)
    assert (small.H, small.head_dim, small.latent_C, small.rope_dim_dr) == (128, 8, 32, 4)
    assert small.n_heads == dims.n_heads and small.L == dims.L
    A.validate_dims(spec, small)
