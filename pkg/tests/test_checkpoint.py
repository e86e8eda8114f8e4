import numpy as np
import pytest
from hypothesis import given, strategies as st

from weightforge.checkpoint import (
    CheckpointError,
    load_checkpoint,
    load_diffusion,
    load_encoder,
    load_weights,
    save_checkpoint,
    save_diffusion,
    save_encoder,
    save_weights,
)
from weightforge.diffusion import TINY_DENOISER, DiffusionConfig, init_state, train_step
from weightforge.encoder import EncoderConfig, EquivariantEncoder
from weightforge.inr import MlpArchitecture, WeightVector, init_weights, preset

archs = st.builds(
    MlpArchitecture,
    coord_dim=st.integers(1, 3),
    hidden=st.lists(st.integers(1, 6), min_size=1, max_size=3).map(tuple),
    out_dim=st.integers(1, 3),
    activation=st.sampled_from(["sine", "relu"]),
)


@given(archs, st.integers(0, 2**31), st.sampled_from(["raw", "smoothed", "generated"]))
def test_weight_round_trip_bitwise(tmp_path_factory, arch, seed, tag):
    path = tmp_path_factory.mktemp("w") / "w.wfg"
    v = np.random.default_rng(seed).normal(size=arch.d) * 10.0 ** np.random.default_rng(seed).integers(-30, 30)
    w = WeightVector(arch, v, tag, "3")
    save_weights(path, w)
    back = load_weights(path)
    assert back.values.tobytes() == w.values.tobytes()
    assert (back.arch, back.tag, back.class_label) == (arch, tag, "3")


def test_generic_sections_round_trip(tmp_path):
    sections = {"a": np.arange(6, dtype=np.int64).reshape(2, 3), "b": np.array([np.pi]), "t": "héllo", "s": np.float64(2.5)}
    save_checkpoint(tmp_path / "c", sections)
    back = load_checkpoint(tmp_path / "c")
    assert back["a"].tolist() == [[0, 1, 2], [3, 4, 5]] and back["a"].dtype == np.int64
    assert back["b"][0] == np.pi and back["t"] == "héllo" and back["s"].shape == ()


def _saved(tmp_path):
    path = tmp_path / "w.wfg"
    save_weights(path, WeightVector(preset("tiny2d"), np.arange(preset("tiny2d").d, dtype=float)))
    return path


def test_corrupt_payload_names_section(tmp_path):
    path = _saved(tmp_path)
    raw = bytearray(path.read_bytes())
    raw[-3] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError) as e:
        load_weights(path)
    assert e.value.section == "values" and "values" in str(e.value)


def test_truncated_file_names_section(tmp_path):
    path = _saved(tmp_path)
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(CheckpointError) as e:
        load_weights(path)
    assert e.value.section == "values"


def test_bad_magic_and_missing_file(tmp_path):
    (tmp_path / "x").write_bytes(b"nope" * 10)
    with pytest.raises(CheckpointError) as e:
        load_checkpoint(tmp_path / "x")
    assert e.value.section == "header"
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing")


def test_wrong_checkpoint_type(tmp_path):
    path = _saved(tmp_path)
    with pytest.raises(CheckpointError) as e:
        load_encoder(path)
    assert e.value.section == "meta"


def test_encoder_round_trip(tmp_path):
    arch = preset("tiny2d")
    enc = EquivariantEncoder(arch, EncoderConfig(num_layers=2, channels=4, head_hidden=16, feature_dim=8), seed=3)
    v = np.stack([init_weights(arch, np.random.default_rng(i)) for i in range(6)])
    enc.fit_block_stats(v)
    enc.fit_feature_stats(v)
    save_encoder(tmp_path / "e.wfg", enc, {"seed": 3})
    back = load_encoder(tmp_path / "e.wfg")
    assert back.encode_values(v).tobytes() == enc.encode_values(v).tobytes()


def test_diffusion_round_trip_resumes_identically(tmp_path):
    arch = preset("tiny2d")
    v = np.stack([init_weights(arch, np.random.default_rng(i)) for i in range(3)])
    enc = EquivariantEncoder(arch, EncoderConfig(num_layers=1, channels=2, head_hidden=8, feature_dim=128), seed=0)
    enc.fit_block_stats(v)
    psi = enc.encode_values(v)
    state = init_state(arch, enc, v, DiffusionConfig(lr=1e-3, denoiser=TINY_DENOISER), seed=0)
    train_step(state, v, psi, np.random.default_rng(0))
    save_diffusion(tmp_path / "d.wfg", state, "seed = 0\n")
    back = load_diffusion(tmp_path / "d.wfg")
    for k, p in state.denoiser.params.items():
        assert back.denoiser.params[k].data.tobytes() == p.data.tobytes()
        assert back.ema[k].tobytes() == state.ema[k].tobytes()
    a = train_step(state, v, psi, np.random.default_rng(1))
    b = train_step(back, v, psi, np.random.default_rng(1))
    assert a["total"] == b["total"]
    assert all(back.denoiser.params[k].data.tobytes() == p.data.tobytes() for k, p in state.denoiser.params.items())
