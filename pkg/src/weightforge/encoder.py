"""Permutation-equivariant weight-space encoder and its contrastive pre-training.

Weight-space features keep one array per parameter block with a trailing
channel axis: ``W_m -> (B, rows, cols, C)`` and ``b_m -> (B, rows, C)``.
Each equivariant layer maps every output block from four kinds of input:
the block itself (pointwise channel mix), features broadcast along its rows
or columns (pooled neighbours and the biases sharing that axis), and a
global summary (mean of every block). Mean pooling and broadcasting commute
with neuron permutations, so the whole layer does too.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .augment import AugmentationPolicy, random_augmentation
from .inr import MlpArchitecture, WeightVector, split_batch
from .symmetry import PermutationPlan, smooth
from .tensor import Tensor


class ContractError(ValueError):
    pass


@dataclass
class WSFeatures:
    weights: list
    biases: list

    def map(self, fn) -> "WSFeatures":
        return WSFeatures([fn(w) for w in self.weights], [fn(b) for b in self.biases])


def features_from_flat(flat: Tensor, arch: MlpArchitecture, stats=None) -> WSFeatures:
    """``(B, d)`` tensor -> single-channel weight-space features, optionally standardised per block."""
    ws, bs = [], []
    for m, (W, b) in enumerate(split_batch(flat, arch)):
        if stats is not None:
            (wm, wsd), (bm, bsd) = stats[2 * m], stats[2 * m + 1]
            W = (W - wm) * (1.0 / wsd)
            b = (b - bm) * (1.0 / bsd)
        ws.append(T.expand_dims(W, -1))
        bs.append(T.expand_dims(b, -1))
    return WSFeatures(ws, bs)


def permute_features(f: WSFeatures, g: PermutationPlan) -> WSFeatures:
    """Apply a permutation plan to raw feature arrays (used by equivariance checks)."""
    ws = [np.asarray(w.data if isinstance(w, Tensor) else w) for w in f.weights]
    bs = [np.asarray(b.data if isinstance(b, Tensor) else b) for b in f.biases]
    for m, p in enumerate(g.perms):
        ws[m] = ws[m][:, p]
        bs[m] = bs[m][:, p]
        ws[m + 1] = ws[m + 1][:, :, p]
    return WSFeatures(ws, bs)


def _glorot(rng, fan_in, fan_out, gain=1.0):
    bound = gain * math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class EquivariantLayer:
    """One affine map between weight-space feature spaces, ``c_in -> c_out`` channels."""

    def __init__(self, num_layers: int, c_in: int, c_out: int, rng: np.random.Generator, prefix: str = ""):
        self.L = num_layers
        self.c_in, self.c_out = c_in, c_out
        self.prefix = prefix
        g = 2 * num_layers * c_in
        self.params: dict[str, Tensor] = {}
        for m in range(num_layers):
            n_row = c_in * (2 + (m + 1 < num_layers))
            n_col = c_in * (1 + 2 * (m > 0))
            n_bias = c_in * (2 + (m + 1 < num_layers))
            gain = 1.0 / math.sqrt(4.0)
            self._add(f"W{m}.full", _glorot(rng, c_in, c_out, gain))
            self._add(f"W{m}.row", _glorot(rng, n_row, c_out, gain))
            self._add(f"W{m}.col", _glorot(rng, n_col, c_out, gain))
            self._add(f"W{m}.glob", _glorot(rng, g, c_out, gain))
            self._add(f"W{m}.bias", np.zeros(c_out))
            self._add(f"b{m}.loc", _glorot(rng, n_bias, c_out, 1.0 / math.sqrt(2.0)))
            self._add(f"b{m}.glob", _glorot(rng, g, c_out, 1.0 / math.sqrt(2.0)))
            self._add(f"b{m}.bias", np.zeros(c_out))

    def _add(self, name, value):
        self.params[name] = Tensor(value, requires_grad=True)

    def p(self, name) -> Tensor:
        return self.params[name]

    def __call__(self, f: WSFeatures) -> WSFeatures:
        L = self.L
        if len(f.weights) != L or f.weights[0].shape[-1] != self.c_in:
            raise T.DimensionError("feature layout does not match the layer")
        W, b = f.weights, f.biases
        # pooled views
        row_mean = [T.mean(w, axis=2) for w in W]  # (B, rows, C): pooled over columns
        col_mean = [T.mean(w, axis=1) for w in W]  # (B, cols, C): pooled over rows
        glob = T.concat(
            [T.mean(w, axis=(1, 2)) for w in W] + [T.mean(x, axis=1) for x in b], axis=-1
        )  # (B, 2L*C)
        glob = T.expand_dims(glob, 1)  # (B, 1, 2L*C)
        new_w, new_b = [], []
        for m in range(L):
            row_parts = [row_mean[m], b[m]]
            if m + 1 < L:
                row_parts.append(col_mean[m + 1])  # next layer's columns index this layer's rows
            col_parts = [col_mean[m]]
            if m > 0:
                col_parts += [b[m - 1], row_mean[m - 1]]
            row_term = T.concat(row_parts, axis=-1) @ self.p(f"W{m}.row")  # (B, rows, c_out)
            col_term = T.concat(col_parts, axis=-1) @ self.p(f"W{m}.col")  # (B, cols, c_out)
            glob_w = glob @ self.p(f"W{m}.glob") + self.p(f"W{m}.bias")  # (B, 1, c_out)
            out = (
                W[m] @ self.p(f"W{m}.full")
                + T.expand_dims(row_term, 2)
                + T.expand_dims(col_term, 1)
                + T.expand_dims(glob_w, 1)
            )
            new_w.append(out)
            loc = T.concat(row_parts, axis=-1) @ self.p(f"b{m}.loc")
            new_b.append(loc + glob @ self.p(f"b{m}.glob") + self.p(f"b{m}.bias"))
        return WSFeatures(new_w, new_b)


def invariant_pool(f: WSFeatures) -> Tensor:
    """Mean over every hidden (permutable) axis; fixed input/output axes are kept."""
    L = len(f.weights)
    parts = []
    for m, w in enumerate(f.weights):
        B = w.shape[0]
        hidden_rows = m < L - 1
        hidden_cols = m > 0
        if hidden_rows and hidden_cols:
            parts.append(T.mean(w, axis=(1, 2)))
        elif hidden_rows:
            parts.append(T.mean(w, axis=1).reshape(B, -1))
        elif hidden_cols:
            parts.append(T.mean(w, axis=2).reshape(B, -1))
        else:
            parts.append(w.reshape(B, -1))
    for m, x in enumerate(f.biases):
        B = x.shape[0]
        parts.append(T.mean(x, axis=1) if m < L - 1 else x.reshape(B, -1))
    return T.concat(parts, axis=-1)


def invariant_width(arch: MlpArchitecture, channels: int) -> int:
    L = arch.num_layers
    n = 0
    for m, ((o, i), _) in enumerate(arch.shapes):
        hr, hc = m < L - 1, m > 0
        n += channels * (1 if hr and hc else i if hr else o if hc else o * i)
        n += channels * (1 if m < L - 1 else o)
    return n


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 4
    channels: int = 16
    head_hidden: int = 128
    feature_dim: int = 128


@dataclass
class EquivariantFeature:
    psi: np.ndarray

    def __post_init__(self):
        self.psi = np.asarray(self.psi, dtype=np.float64)
        if not np.all(np.isfinite(self.psi)):
            raise ValueError("non-finite feature")


class EquivariantEncoder:
    """Equivariant layers with ReLU, invariant pooling, then a two-layer projection."""

    def __init__(self, arch: MlpArchitecture, config: EncoderConfig = EncoderConfig(), seed: int = 0):
        self.arch = arch
        self.config = config
        rng = np.random.default_rng(seed)
        self.layers = []
        c = 1
        for k in range(config.num_layers):
            self.layers.append(EquivariantLayer(arch.num_layers, c, config.channels, rng, prefix=f"eq{k}."))
            c = config.channels
        d_inv = invariant_width(arch, c)
        self.head = {
            "head.0.weight": Tensor(_glorot(rng, d_inv, config.head_hidden, math.sqrt(2.0)), requires_grad=True),
            "head.0.bias": Tensor(np.zeros(config.head_hidden), requires_grad=True),
            "head.1.weight": Tensor(_glorot(rng, config.head_hidden, config.feature_dim), requires_grad=True),
            "head.1.bias": Tensor(np.zeros(config.feature_dim), requires_grad=True),
        }
        # per-block (mean, std) used to standardise raw weights
        self.block_stats = [(0.0, 1.0)] * (2 * arch.num_layers)
        # per-dimension (mean, std) of the head output; identity until calibrated
        self.feature_stats = (np.zeros(config.feature_dim), np.ones(config.feature_dim))

    # -- parameters -----------------------------------------------------------
    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for layer in self.layers:
            out.update({layer.prefix + k: v for k, v in layer.params.items()})
        out.update(self.head)
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag
            p.grad = None

    def fit_block_stats(self, values: np.ndarray) -> None:
        stats = []
        for ws, bs in self.arch.block_slices():
            for sl in (ws, bs):
                block = values[:, sl]
                sd = float(block.std())
                stats.append((float(block.mean()), sd if sd > 1e-12 else 1.0))
        self.block_stats = stats

    def fit_feature_stats(self, values: np.ndarray) -> None:
        """Standardise each output dimension over ``values``.

        Affine in the output, so invariance is untouched; afterwards a feature
        disturbance of size gamma is measured in units of the data spread.
        """
        self.feature_stats = (np.zeros(self.config.feature_dim), np.ones(self.config.feature_dim))
        z = self.encode_values(values)
        sd = z.std(axis=0)
        self.feature_stats = (z.mean(axis=0), np.where(sd > 1e-8, sd, 1.0))

    # -- forward ----------------------------------------------------------------
    def forward(self, flat, batch_norm: bool = False) -> Tensor:
        """``(B, d)`` weights (array or tensor) -> ``(B, feature_dim)`` features.

        ``batch_norm`` standardises each output dimension with the batch's own
        statistics (training); otherwise the calibrated ``feature_stats`` are used.
        """
        flat = T.as_tensor(flat)
        if flat.ndim != 2 or flat.shape[1] != self.arch.d:
            raise ContractError(f"encoder expects (B, {self.arch.d}) weights, got {flat.shape}")
        f = features_from_flat(flat, self.arch, self.block_stats)
        for layer in self.layers:
            f = layer(f).map(T.relu)
        h = invariant_pool(f)
        h = T.relu(h @ self.head["head.0.weight"] + self.head["head.0.bias"])
        z = h @ self.head["head.1.weight"] + self.head["head.1.bias"]
        if batch_norm:
            centred = z - T.mean(z, axis=0, keepdims=True)
            var = T.mean(centred * centred, axis=0, keepdims=True)
            return centred * T.power(var + 1e-5, -0.5)
        mu, sd = self.feature_stats
        return (z - mu) / sd

    __call__ = forward

    def encode_values(self, values: np.ndarray) -> np.ndarray:
        with T.no_grad():
            return self.forward(np.atleast_2d(values)).data

    def encode(self, w: WeightVector) -> EquivariantFeature:
        if w.arch != self.arch:
            raise ContractError("weight vector architecture differs from the encoder's")
        return EquivariantFeature(self.encode_values(w.values[None])[0])


def equivariant_layer_apply(layer: EquivariantLayer, f: WSFeatures) -> WSFeatures:
    return layer(f)


# -- contrastive objective ------------------------------------------------------
def nt_xent_loss(features, tau: float = 0.5) -> Tensor:
    """NT-Xent over ``2N`` features where rows ``i`` and ``i+N`` are positives.

    The denominator for anchor ``i`` sums over all ``k != i``.
    """
    z = T.as_tensor(features)
    if tau <= 0:
        raise ContractError("tau must be > 0")
    if z.ndim != 2 or z.shape[0] % 2 or z.shape[0] < 4:
        raise ContractError("need 2N feature rows with N >= 2")
    n2 = z.shape[0]
    n = n2 // 2
    norm = T.power(T.tsum(z * z, axis=1, keepdims=True) + 1e-12, 0.5)
    zn = z / norm
    sim = (zn @ T.swapaxes(zn, 0, 1)) * (1.0 / tau)
    shift = 1.0 / tau  # cosine <= 1, keeps exp() bounded
    off_diag = 1.0 - np.eye(n2)
    denom = T.tsum(T.exp(sim - shift) * off_diag, axis=1)
    pair = np.concatenate([np.arange(n, n2), np.arange(n)])
    pos = sim[np.arange(n2), pair]
    return T.mean(T.log(denom) - (pos - shift))


@dataclass
class PretrainResult:
    encoder: EquivariantEncoder
    loss_history: list[float] = field(default_factory=list)


def pretrain(
    dataset: Sequence[WeightVector],
    policy: AugmentationPolicy,
    epochs: int = 500,
    batch: int = 512,
    lr: float = 5e-3,
    weight_decay: float = 5e-4,
    tau: float = 0.5,
    config: EncoderConfig = EncoderConfig(),
    seed: int = 0,
    use_smoothing: bool = True,
    restarts: int = 5,
    encoder: EquivariantEncoder | None = None,
) -> PretrainResult:
    """SimCLR-style training on (smoothed, augmented) positive pairs.

    ``loss_history`` holds the mean loss of every epoch.
    """
    if not dataset:
        raise ContractError("empty dataset")
    arch = dataset[0].arch
    if any(w.arch != arch for w in dataset):
        raise ContractError("dataset mixes architectures")
    base = [smooth(w, restarts, seed)[0] if use_smoothing else w for w in dataset]
    enc = encoder or EquivariantEncoder(arch, config, seed)
    enc.fit_block_stats(np.stack([w.values for w in base]))
    opt = T.AdamW(enc.parameters(), lr=lr, weight_decay=weight_decay)
    rng = np.random.default_rng(seed)
    history = []
    n = len(base)
    bsz = max(2, min(batch, n))
    for _ in range(epochs):
        order = rng.permutation(n)
        chunks = [order[i : i + bsz] for i in range(0, n, bsz)]
        if len(chunks) > 1 and len(chunks[-1]) < 2:
            chunks[-2] = np.concatenate([chunks[-2], chunks.pop()])
        losses = []
        for idx in chunks:
            anchors = [base[i] for i in idx]
            if len(anchors) < 2:
                # one-item dataset: pair the item with two independent views
                anchors = [random_augmentation(anchors[0], policy, rng), anchors[0]]
            views = [random_augmentation(w, policy, rng) for w in anchors]
            x = np.stack([w.values for w in anchors] + [w.values for w in views])
            opt.zero_grad()
            loss = nt_xent_loss(enc(x, batch_norm=True), tau)
            loss.backward()
            opt.step()
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
    enc.fit_feature_stats(np.stack([w.values for w in base]))
    return PretrainResult(enc, history)
