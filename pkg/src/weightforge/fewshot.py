"""Few-shot adaptation of a trained diffusion state and disturbed-feature generation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .diffusion import DiffusionConfig, TrainState, ddim_sample_many, train_epochs
from .encoder import EquivariantEncoder
from .inr import WeightVector
from .symmetry import smooth

DEFAULT_GAMMA = 0.3
FINETUNE_EPOCHS = 250


class ContractError(ValueError):
    pass


@dataclass
class SupportSet:
    """k weight vectors of one class (smoothed) with their cached features."""

    weights: list[WeightVector]
    features: np.ndarray

    def __post_init__(self):
        if not self.weights:
            raise ContractError("support set is empty")
        arch = self.weights[0].arch
        if any(w.arch != arch for w in self.weights):
            raise ContractError("support weights use different architectures")
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        if len(self.features) != len(self.weights):
            raise ContractError("need one feature per support weight")

    @property
    def k(self) -> int:
        return len(self.weights)

    @property
    def values(self) -> np.ndarray:
        return np.stack([w.values for w in self.weights])

    @classmethod
    def build(cls, weights: Sequence[WeightVector], encoder: EquivariantEncoder, restarts: int = 5, seed: int = 0):
        if not weights:
            raise ContractError("support set is empty")
        smoothed = [smooth(w, restarts, seed)[0] for w in weights]
        feats = encoder.encode_values(np.stack([w.values for w in smoothed]))
        return cls(smoothed, feats)


def finetune(
    state: TrainState, support: SupportSet, epochs: int = FINETUNE_EPOCHS, config: DiffusionConfig | None = None, seed: int = 0
) -> TrainState:
    """Continue diffusion training on the (already smoothed) support set."""
    if support.k < 1:
        raise ContractError("support set is empty")
    if support.weights[0].arch != state.arch:
        raise ContractError("support architecture differs from the diffusion model's")
    if epochs < 0:
        raise ContractError("epochs must be >= 0")
    if epochs == 0:
        return state
    config = config or DiffusionConfig()
    # the learning-rate decay restarts for the adaptation stage
    start = state.epoch
    state.epoch = 0
    train_epochs(state, support.values, support.features, epochs, config, seed)
    state.epoch += start
    return state


def disturb(psi: np.ndarray, gamma: float = DEFAULT_GAMMA, seed: int | np.random.Generator = 0) -> np.ndarray:
    """``psi + gamma * eps`` with standard normal ``eps``."""
    if gamma < 0:
        raise ContractError("gamma must be >= 0")
    psi = np.asarray(psi, dtype=np.float64)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    eps = rng.standard_normal(psi.shape)
    return psi + gamma * eps


def generate(
    state: TrainState,
    support: SupportSet,
    n: int,
    gamma: float = DEFAULT_GAMMA,
    seed: int = 0,
    num_steps: int = 50,
    eta: float = 0.0,
) -> list[WeightVector]:
    """``n`` samples; output ``i`` is conditioned on support feature ``i mod k``.

    Each output draws its own disturbance and its own initial noise from a
    child of ``SeedSequence(seed)``, so outputs do not depend on ``n``.
    """
    if n < 1:
        raise ContractError("n must be >= 1")
    if gamma < 0:
        raise ContractError("gamma must be >= 0")
    children = np.random.SeedSequence(seed).spawn(n)
    psis, noise_seeds = [], []
    for i, child in enumerate(children):
        dseed, nseed = child.generate_state(2)
        psis.append(disturb(support.features[i % support.k], gamma, int(dseed)))
        noise_seeds.append(int(nseed))
    values = ddim_sample_many(state, np.stack(psis), num_steps, eta, noise_seeds)
    return [WeightVector(state.arch, v, "generated") for v in values]
