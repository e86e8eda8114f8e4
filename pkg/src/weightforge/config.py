"""Run configuration and its flat ``section.key = value`` TOML form."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .augment import AugmentationPolicy, default_policy
from .diffusion import DenoiserConfig, DiffusionConfig
from .encoder import EncoderConfig
from .inr import MlpArchitecture, preset

SEED_ENV = "WEIGHTFORGE_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSection:
    kind: str = "blobs2d"
    classes: int = 2
    per_class: int = 32
    resolution: int = 16
    fit_steps: int = 2000
    fit_lr: float = 1e-3
    psnr_gate: float = 25.0
    shared_init: bool = True


@dataclass
class EncoderSection:
    layers: int = 4
    channels: int = 16
    head_hidden: int = 128
    feature_dim: int = 128
    tau: float = 0.5
    epochs: int = 500
    batch: int = 512
    lr: float = 5e-3
    weight_decay: float = 5e-4
    smoothing: bool = True
    restarts: int = 5


@dataclass
class DiffusionSection:
    timesteps: int = 1000
    lam: float = 0.1
    ema_beta: float = 0.99
    lr: float = 2e-4
    weight_decay: float = 0.0
    batch: int = 32
    epochs: int = 5000
    lr_decay: float = 0.9
    lr_decay_every: int = 250
    ddim_steps: int = 50
    eta: float = 0.0
    normalize: bool = True
    layers: int = 4
    heads: int = 4
    hidden: int = 256
    mlp_ratio: int = 4


@dataclass
class FewshotSection:
    k: int = 5
    gamma: float = 0.3
    epochs: int = 250
    n: int = 16


@dataclass
class RunConfig:
    seed: int = 0
    arch: str = "mnist"
    # per-field overrides of the arch's default augmentation policy; None disables
    augment: dict = field(default_factory=dict)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    fewshot: FewshotSection = field(default_factory=FewshotSection)

    # -- derived objects --------------------------------------------------------
    def architecture(self) -> MlpArchitecture:
        return preset(self.arch)

    def policy(self) -> AugmentationPolicy:
        fields = dict(default_policy(self.architecture()).__dict__)
        fields.update(self.augment)
        return AugmentationPolicy(**fields)

    def encoder_config(self) -> EncoderConfig:
        e = self.encoder
        return EncoderConfig(num_layers=e.layers, channels=e.channels, head_hidden=e.head_hidden, feature_dim=e.feature_dim)

    def diffusion_config(self) -> DiffusionConfig:
        d = self.diffusion
        return DiffusionConfig(
            T=d.timesteps, lam=d.lam, ema_beta=d.ema_beta, lr=d.lr, weight_decay=d.weight_decay, batch=d.batch,
            epochs=d.epochs, lr_decay=d.lr_decay, lr_decay_every=d.lr_decay_every, ddim_steps=d.ddim_steps,
            eta=d.eta, normalize=d.normalize,
            denoiser=DenoiserConfig(d.layers, d.heads, d.hidden, d.mlp_ratio, self.encoder.feature_dim),
        )

    # -- flat form --------------------------------------------------------------------
    def to_flat(self) -> dict:
        out = {"seed": self.seed, "arch": self.arch}
        for k, v in sorted(self.augment.items()):
            out[f"augment.{k}"] = "off" if v is None else (list(v) if isinstance(v, tuple) else v)
        for name in ("dataset", "encoder", "diffusion", "fewshot"):
            for k, v in dataclasses.asdict(getattr(self, name)).items():
                out[f"{name}.{k}"] = v
        return out

    @classmethod
    def from_flat(cls, flat: dict) -> "RunConfig":
        cfg = cls()
        sections = {f.name: f for f in dataclasses.fields(cls)}
        for key, value in flat.items():
            head, _, tail = key.partition(".")
            if head not in sections:
                raise ConfigError(f"unknown config key {key!r}")
            if not tail:
                if head in ("seed", "arch"):
                    setattr(cfg, head, type(getattr(cfg, head))(value))
                    continue
                raise ConfigError(f"config key {key!r} needs a field name")
            if head == "augment":
                if tail not in AugmentationPolicy.__dataclass_fields__:
                    raise ConfigError(f"unknown augmentation {tail!r}")
                cfg.augment[tail] = None if value == "off" else (tuple(value) if isinstance(value, list) else value)
                continue
            section = getattr(cfg, head)
            if tail not in section.__dataclass_fields__:
                raise ConfigError(f"unknown config key {key!r}")
            current = getattr(section, tail)
            if isinstance(current, bool) and not isinstance(value, bool):
                raise ConfigError(f"{key} must be true or false")
            setattr(section, tail, type(current)(value))
        preset(cfg.arch)
        return cfg


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, dict):
            out.update(_flatten(v, f"{prefix}{k}."))
        else:
            out[prefix + k] = v
    return out


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise ConfigError(f"cannot write {v!r} to config")


def dumps(cfg: RunConfig) -> str:
    return "".join(f"{k} = {_toml_value(v)}\n" for k, v in cfg.to_flat().items())


def loads(text: str) -> RunConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"bad config: {e}") from None
    return RunConfig.from_flat(_flatten(data))


def save_config(path, cfg: RunConfig) -> None:
    Path(path).write_text(dumps(cfg))


def apply_env(cfg: RunConfig, env: dict | None = None) -> RunConfig:
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            cfg.seed = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer") from None
    return cfg


def load_config(path=None, env: dict | None = None) -> RunConfig:
    """Read a config file (defaults when ``path`` is None); ``WEIGHTFORGE_SEED`` overrides the seed."""
    cfg = loads(Path(path).read_text()) if path else RunConfig()
    return apply_env(cfg, env)


def desk_profile() -> RunConfig:
    """Settings small enough for a laptop core: tiny INRs, short schedules.

    ``lam`` is much smaller than the default: with unit-scale features the
    equivariance term dominates a small denoiser's loss at the default weight.
    """
    cfg = RunConfig(arch="tiny2d")
    cfg.dataset = dataclasses.replace(cfg.dataset, kind="blobs2d", classes=3, per_class=32, resolution=16, fit_steps=1500)
    cfg.encoder = dataclasses.replace(cfg.encoder, channels=8, head_hidden=64, epochs=100, batch=64)
    cfg.diffusion = dataclasses.replace(
        cfg.diffusion, lam=1e-3, lr=1e-3, epochs=500, batch=32, layers=2, heads=2, hidden=128, mlp_ratio=2
    )
    cfg.fewshot = dataclasses.replace(cfg.fewshot, k=5, epochs=250, n=8)
    return cfg
