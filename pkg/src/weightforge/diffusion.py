"""Feature-conditioned diffusion over flattened INR weights.

The denoiser is a small transformer that predicts clean weights directly
(x0-parameterisation). Each MLP layer contributes two tokens, its weight
matrix and its bias, with a learned projection per token slot. Every block
runs self-attention over the tokens, then cross-attention to the
conditioning feature, then an MLP.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .encoder import EquivariantEncoder
from .inr import MlpArchitecture, TrainingError, WeightVector
from .tensor import Tensor


class ContractError(ValueError):
    pass


# -- schedule -------------------------------------------------------------------
@dataclass(frozen=True)
class DiffusionSchedule:
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bar: np.ndarray


def make_schedule(T: int = 1000, s: float = 0.008) -> DiffusionSchedule:
    """Squared-cosine schedule: ``alpha_bar`` follows ``cos^2`` of shifted time.

    ``betas[t] = 1 - f((t+1)/T) / f(t/T)`` clipped to ``[1e-8, 0.999]``, and
    ``alpha_bar`` is the running product of ``1 - betas``.
    """
    if T < 1:
        raise ValueError("T must be >= 1")

    def f(u):
        return np.cos((u + s) / (1 + s) * math.pi / 2) ** 2

    u = np.arange(T + 1) / T
    betas = np.clip(1.0 - f(u[1:]) / f(u[:-1]), 1e-8, 0.999)
    alphas = 1.0 - betas
    return DiffusionSchedule(T, betas, alphas, np.cumprod(alphas))


def forward_noise(x0: np.ndarray, t, eps: np.ndarray, schedule: DiffusionSchedule) -> np.ndarray:
    """Sample ``q(x_t | x_0)`` given the noise: ``sqrt(ab) x0 + sqrt(1-ab) eps``."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ContractError(f"eps shape {eps.shape} differs from x0 shape {x0.shape}")
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t >= schedule.T):
        raise ContractError(f"t must lie in [0, {schedule.T})")
    ab = schedule.alpha_bar[t]
    if ab.ndim:
        ab = ab.reshape(-1, *([1] * (x0.ndim - 1)))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def eps_from_x0(x_t: np.ndarray, x0_hat: np.ndarray, alpha_bar: float) -> np.ndarray:
    return (x_t - math.sqrt(alpha_bar) * x0_hat) / math.sqrt(1.0 - alpha_bar)


# -- normalisation ----------------------------------------------------------------
@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, values: np.ndarray, arch: MlpArchitecture | None = None, floor: float = 1e-8) -> "Normalizer":
        """Per-coordinate mean/std; degenerate coordinates fall back to their block's pooled std.

        With a single training vector every coordinate is degenerate, so the
        pooled std keeps the normalised space at the weights' natural scale.
        """
        values = np.atleast_2d(values)
        mean = values.mean(axis=0)
        std = values.std(axis=0)
        blocks = [sl for pair in arch.block_slices() for sl in pair] if arch is not None else [slice(None)]
        pooled = np.ones_like(std)
        for sl in blocks:
            sd = float(values[:, sl].std())
            pooled[sl] = sd if sd > floor else 1.0
        return cls(mean, np.where(std > floor, std, pooled))

    @classmethod
    def identity(cls, d: int) -> "Normalizer":
        return cls(np.zeros(d), np.ones(d))

    def normalize(self, x):
        return (x - self.mean) / self.std

    def denormalize(self, x):
        return x * self.std + self.mean


# -- denoiser -------------------------------------------------------------------
@dataclass(frozen=True)
class DenoiserConfig:
    num_layers: int = 4
    num_heads: int = 4
    hidden_size: int = 256
    mlp_ratio: int = 4
    feature_dim: int = 128

    def __post_init__(self):
        if self.hidden_size % self.num_heads:
            raise ValueError("hidden_size must be divisible by num_heads")


FULL_DENOISER = DenoiserConfig(num_layers=12, num_heads=16, hidden_size=2880)
DESK_DENOISER = DenoiserConfig()
TINY_DENOISER = DenoiserConfig(num_layers=1, num_heads=2, hidden_size=16, mlp_ratio=2)


def token_slots(arch: MlpArchitecture) -> list[slice]:
    """Flat-vector slice for each token: ``[W0, b0, W1, b1, ...]``."""
    slots = []
    for ws, bs in arch.block_slices():
        slots += [ws, bs]
    return slots


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(emb), 1))], axis=1)
    return emb


def _ln(x, g, b):
    return T.layer_norm(x) * g + b


def _attention(x, ctx, p, prefix, num_heads):
    """Multi-head attention of queries from ``x`` over keys/values from ``ctx``."""
    B, S, H = x.shape
    Sk = ctx.shape[1]
    hd = H // num_heads

    def heads(z, n):
        return T.transpose(z.reshape(B, n, num_heads, hd), (0, 2, 1, 3))

    q = heads(x @ p[prefix + "q.weight"] + p[prefix + "q.bias"], S)
    k = heads(ctx @ p[prefix + "k.weight"] + p[prefix + "k.bias"], Sk)
    v = heads(ctx @ p[prefix + "v.weight"] + p[prefix + "v.bias"], Sk)
    att = T.softmax((q @ T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(hd)), axis=-1)
    out = T.transpose(att @ v, (0, 2, 1, 3)).reshape(B, S, H)
    return out @ p[prefix + "o.weight"] + p[prefix + "o.bias"]


class Denoiser:
    def __init__(self, arch: MlpArchitecture, config: DenoiserConfig = DESK_DENOISER, seed: int = 0):
        self.arch = arch
        self.config = config
        self.slots = token_slots(arch)
        rng = np.random.default_rng(seed)
        H = config.hidden_size
        p: dict[str, np.ndarray] = {}

        def lin(name, n_in, n_out, std=None):
            std = std if std is not None else 1.0 / math.sqrt(n_in)
            p[name + ".weight"] = rng.normal(0.0, std, size=(n_in, n_out))
            p[name + ".bias"] = np.zeros(n_out)

        for k, sl in enumerate(self.slots):
            lin(f"in.{k}", sl.stop - sl.start, H)
        p["pos"] = rng.normal(0.0, 0.02, size=(len(self.slots), H))
        lin("time", H, H)
        lin("cond", config.feature_dim, H)
        for j in range(config.num_layers):
            for ln in ("ln1", "ln2", "ln3"):
                p[f"blocks.{j}.{ln}.gain"] = np.ones(H)
                p[f"blocks.{j}.{ln}.bias"] = np.zeros(H)
            for att in ("self", "cross"):
                for proj in "qkvo":
                    lin(f"blocks.{j}.{att}.{proj}", H, H)
            lin(f"blocks.{j}.mlp.fc1", H, config.mlp_ratio * H)
            lin(f"blocks.{j}.mlp.fc2", config.mlp_ratio * H, H)
        p["ln_f.gain"] = np.ones(H)
        p["ln_f.bias"] = np.zeros(H)
        for k, sl in enumerate(self.slots):
            lin(f"out.{k}", H, sl.stop - sl.start, std=0.02)
        self.params = {k: Tensor(v, requires_grad=True) for k, v in p.items()}

    def named_parameters(self) -> dict[str, Tensor]:
        return self.params

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, v in arrays.items():
            if self.params[k].shape != v.shape:
                raise ContractError(f"parameter {k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def forward(self, x_t, t, psi) -> Tensor:
        """``(B, d)`` noised weights, ``(B,)`` timesteps, ``(B, F)`` features -> ``(B, d)`` x0 estimate."""
        p = self.params
        x_t = T.as_tensor(x_t)
        psi = T.as_tensor(psi)
        if x_t.ndim != 2 or x_t.shape[1] != self.arch.d:
            raise ContractError(f"denoiser expects (B, {self.arch.d}) weights, got {x_t.shape}")
        B = x_t.shape[0]
        if psi.shape != (B, self.config.feature_dim):
            raise ContractError(f"conditioning must be (B, {self.config.feature_dim}), got {psi.shape}")
        t = np.broadcast_to(np.asarray(t), (B,))
        H = self.config.hidden_size
        tokens = [
            T.expand_dims(x_t[:, sl] @ p[f"in.{k}.weight"] + p[f"in.{k}.bias"], 1)
            for k, sl in enumerate(self.slots)
        ]
        h = T.concat(tokens, axis=1) + p["pos"]
        temb = Tensor(timestep_embedding(t, H)) @ p["time.weight"] + p["time.bias"]
        h = h + T.expand_dims(temb, 1)
        ctx = T.expand_dims(psi @ p["cond.weight"] + p["cond.bias"], 1)  # (B, 1, H)
        nh = self.config.num_heads
        for j in range(self.config.num_layers):
            pre = f"blocks.{j}."
            a = _ln(h, p[pre + "ln1.gain"], p[pre + "ln1.bias"])
            h = h + _attention(a, a, p, pre + "self.", nh)
            a = _ln(h, p[pre + "ln2.gain"], p[pre + "ln2.bias"])
            h = h + _attention(a, ctx, p, pre + "cross.", nh)
            a = _ln(h, p[pre + "ln3.gain"], p[pre + "ln3.bias"])
            a = T.gelu(a @ p[pre + "mlp.fc1.weight"] + p[pre + "mlp.fc1.bias"])
            h = h + (a @ p[pre + "mlp.fc2.weight"] + p[pre + "mlp.fc2.bias"])
        h = _ln(h, p["ln_f.gain"], p["ln_f.bias"])
        outs = [h[:, k] @ p[f"out.{k}.weight"] + p[f"out.{k}.bias"] for k in range(len(self.slots))]
        return T.concat(outs, axis=1)

    __call__ = forward


# -- training ---------------------------------------------------------------------
@dataclass
class DiffusionConfig:
    T: int = 1000
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
    denoiser: DenoiserConfig = DESK_DENOISER
    normalize: bool = True


@dataclass
class TrainState:
    denoiser: Denoiser
    ema: dict[str, np.ndarray]
    opt: T.AdamW
    schedule: DiffusionSchedule
    normalizer: Normalizer
    encoder: EquivariantEncoder | None
    lam: float = 0.1
    ema_beta: float = 0.99
    step: int = 0
    epoch: int = 0
    history: list[dict] = field(default_factory=list)

    @property
    def arch(self) -> MlpArchitecture:
        return self.denoiser.arch

    def ema_denoiser(self) -> Denoiser:
        twin = Denoiser.__new__(Denoiser)
        twin.arch, twin.config, twin.slots = self.denoiser.arch, self.denoiser.config, self.denoiser.slots
        twin.params = {k: Tensor(v) for k, v in self.ema.items()}
        return twin


def init_state(
    arch: MlpArchitecture,
    encoder: EquivariantEncoder | None,
    train_values: np.ndarray | None = None,
    config: DiffusionConfig = DiffusionConfig(),
    seed: int = 0,
) -> TrainState:
    den = Denoiser(arch, config.denoiser, seed)
    if encoder is not None:
        encoder.set_trainable(False)
    if config.normalize and train_values is not None:
        norm = Normalizer.fit(train_values, arch)
    else:
        norm = Normalizer.identity(arch.d)
    return TrainState(
        denoiser=den,
        ema=den.state_arrays(),
        opt=T.AdamW(den.parameters(), lr=config.lr, weight_decay=config.weight_decay),
        schedule=make_schedule(config.T),
        normalizer=norm,
        encoder=encoder,
        lam=config.lam,
        ema_beta=config.ema_beta,
    )


def losses(state: TrainState, w_bar: np.ndarray, psi: np.ndarray, t: np.ndarray, eps: np.ndarray):
    """Return ``(total, recon, eq)`` tensors for one batch of original-scale weights."""
    x0 = state.normalizer.normalize(w_bar)
    x_t = forward_noise(x0, t, eps, state.schedule)
    pred = state.denoiser(x_t, t, psi)
    diff = pred - x0
    recon = T.mean(diff * diff)
    if state.lam > 0 and state.encoder is not None:
        w_tilde = state.normalizer.denormalize(pred)
        gap = Tensor(psi) - state.encoder(w_tilde)
        eq = T.mean(T.tsum(gap * gap, axis=1))
        total = recon + state.lam * eq
    else:
        eq = Tensor(0.0)
        total = recon
    return total, recon, eq


def ema_update(ema: dict[str, np.ndarray], params: dict[str, Tensor], beta: float) -> None:
    for k, p in params.items():
        ema[k] = beta * ema[k] + (1.0 - beta) * p.data


def train_step(state: TrainState, w_bar: np.ndarray, psi: np.ndarray, rng: np.random.Generator) -> dict:
    w_bar = np.atleast_2d(np.asarray(w_bar, dtype=np.float64))
    psi = np.atleast_2d(np.asarray(psi, dtype=np.float64))
    B = len(w_bar)
    t = rng.integers(0, state.schedule.T, size=B)
    eps = rng.standard_normal(w_bar.shape)
    state.opt.zero_grad()
    total, recon, eq = losses(state, w_bar, psi, t, eps)
    if not np.isfinite(total.item()):
        raise TrainingError(f"diffusion loss became non-finite at step {state.step}")
    total.backward()
    state.opt.step()
    ema_update(state.ema, state.denoiser.params, state.ema_beta)
    state.step += 1
    out = {"step": state.step, "total": total.item(), "recon": recon.item(), "eq": eq.item()}
    state.history.append(out)
    return out


def train_epochs(
    state: TrainState,
    values: np.ndarray,
    psis: np.ndarray,
    epochs: int,
    config: DiffusionConfig,
    seed: int = 0,
    log_every: int = 0,
    log: Callable[[str], None] = print,
) -> TrainState:
    """Mini-batch training with step-decayed learning rate."""
    rng = np.random.default_rng(seed)
    n = len(values)
    bsz = max(1, min(config.batch, n))
    for _ in range(epochs):
        state.opt.lr = config.lr * config.lr_decay ** (state.epoch // config.lr_decay_every)
        order = rng.permutation(n)
        for i in range(0, n, bsz):
            idx = order[i : i + bsz]
            out = train_step(state, values[idx], psis[idx], rng)
        state.epoch += 1
        if log_every and state.epoch % log_every == 0:
            log(f"epoch {state.epoch}: total={out['total']:.5f} recon={out['recon']:.5f} eq={out['eq']:.5f}")
    return state


# -- sampling -----------------------------------------------------------------------
def ddim_timesteps(T_: int, num_steps: int) -> np.ndarray:
    if num_steps < 1 or num_steps > T_:
        raise ContractError(f"num_steps must be in [1, {T_}]")
    ts = np.unique(np.round(np.linspace(0, T_ - 1, num_steps)).astype(np.int64))
    return ts[::-1]


def ddim_loop(
    predict_x0: Callable[[np.ndarray, np.ndarray], np.ndarray],
    x_T: np.ndarray,
    schedule: DiffusionSchedule,
    num_steps: int,
    eta: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """DDIM recursion for an x0-predicting model, in normalised space."""
    if not 0.0 <= eta <= 1.0:
        raise ContractError("eta must lie in [0, 1]")
    ts = ddim_timesteps(schedule.T, num_steps)
    x = x_T
    for i, t in enumerate(ts):
        ab = schedule.alpha_bar[t]
        ab_prev = schedule.alpha_bar[ts[i + 1]] if i + 1 < len(ts) else 1.0
        x0 = predict_x0(x, np.full(len(x), t))
        eps = eps_from_x0(x, x0, ab)
        sigma = eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev)) if ab_prev < 1.0 else 0.0
        x = math.sqrt(ab_prev) * x0 + math.sqrt(max(1.0 - ab_prev - sigma**2, 0.0)) * eps
        if sigma > 0:
            x = x + sigma * rng.standard_normal(x.shape)
    return x


def ddim_sample_many(
    state: TrainState,
    psis: np.ndarray,
    num_steps: int = 50,
    eta: float = 0.0,
    seeds: Sequence[int] = (0,),
    use_ema: bool = True,
) -> np.ndarray:
    """One sample per row of ``psis``; row ``i`` draws its noise from ``seeds[i]``."""
    psis = np.atleast_2d(psis)
    if len(seeds) != len(psis):
        raise ContractError("need one seed per conditioning feature")
    den = state.ema_denoiser() if use_ema else state.denoiser
    rngs = [np.random.default_rng(s) for s in seeds]
    x_T = np.stack([r.standard_normal(state.arch.d) for r in rngs])

    def predict(x, t):
        with T.no_grad():
            return den(x, t, psis).data

    # per-row noise streams keep each sample independent of batch composition
    if eta > 0:
        outs = [
            ddim_loop(lambda x, t, i=i: _row_predict(den, x, t, psis[i : i + 1]), x_T[i : i + 1],
                      state.schedule, num_steps, eta, rngs[i])
            for i in range(len(psis))
        ]
        x0 = np.concatenate(outs)
    else:
        x0 = ddim_loop(predict, x_T, state.schedule, num_steps, eta, rngs[0])
    return state.normalizer.denormalize(x0)


def _row_predict(den, x, t, psi):
    with T.no_grad():
        return den(x, t, psi).data


def ddim_sample(
    state: TrainState, psi: np.ndarray, num_steps: int = 50, eta: float = 0.0, seed: int = 0, use_ema: bool = True
) -> WeightVector:
    psi = np.asarray(psi, dtype=np.float64).reshape(1, -1)
    values = ddim_sample_many(state, psi, num_steps, eta, [seed], use_ema)[0]
    return WeightVector(state.arch, values, "generated")
