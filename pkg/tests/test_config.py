import pytest

from weightforge import config as C
from weightforge.augment import default_policy


def test_defaults_follow_the_method():
    cfg = C.RunConfig()
    assert cfg.diffusion.lam == 0.1 and cfg.diffusion.ema_beta == 0.99 and cfg.diffusion.timesteps == 1000
    assert cfg.fewshot.gamma == 0.3 and cfg.fewshot.epochs == 250
    e = cfg.encoder
    assert (e.feature_dim, e.layers, e.lr, e.weight_decay, e.epochs, e.batch) == (128, 4, 5e-3, 5e-4, 500, 512)
    assert cfg.diffusion_config().denoiser.feature_dim == 128


def test_dumps_loads_round_trip():
    for cfg in (C.RunConfig(), C.desk_profile()):
        assert C.loads(C.dumps(cfg)) == cfg


def test_augment_overrides_round_trip():
    cfg = C.RunConfig()
    cfg.augment = {"rotation": None, "scale": (0.9, 1.1)}
    back = C.loads(C.dumps(cfg))
    assert back.augment == cfg.augment
    pol = back.policy()
    assert pol.rotation is None and pol.scale == (0.9, 1.1)
    assert pol.translation == default_policy(back.architecture()).translation


def test_env_seed_override(tmp_path):
    path = tmp_path / "c.toml"
    C.save_config(path, C.RunConfig(seed=4))
    assert C.load_config(path, env={}).seed == 4
    assert C.load_config(path, env={C.SEED_ENV: "17"}).seed == 17
    with pytest.raises(C.ConfigError):
        C.load_config(path, env={C.SEED_ENV: "x"})


@pytest.mark.parametrize(
    "text",
    ["bogus = 1\n", "encoder.nope = 1\n", "dataset.shared_init = 1\n", "arch = \"nonexistent\"\n", "seed = [\n"],
)
def test_bad_configs(text):
    with pytest.raises((C.ConfigError, KeyError, ValueError)):
        C.loads(text)


def test_sections_build_runtime_configs():
    cfg = C.desk_profile()
    d = cfg.diffusion_config()
    assert (d.lam, d.lr, d.denoiser.hidden_size) == (cfg.diffusion.lam, cfg.diffusion.lr, cfg.diffusion.hidden)
    assert cfg.encoder_config().head_hidden == cfg.encoder.head_hidden
    assert cfg.architecture() == C.preset("tiny2d")
