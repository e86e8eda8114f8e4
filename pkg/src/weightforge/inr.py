"""INR MLPs: architectures, flat weight vectors, evaluation, fitting, rendering."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor

TAGS = ("raw", "smoothed", "augmented", "generated")


class LayoutError(ValueError):
    """Flat vector length does not match the architecture."""


class TrainingError(RuntimeError):
    """Optimisation diverged."""


@dataclass(frozen=True)
class MlpArchitecture:
    """Fixed MLP shape defining a weight space.

    ``hidden`` lists hidden widths; the first linear layer sees the raw
    coordinates or, with ``pe_frequencies > 0``, their positional encoding
    ``[x, sin(2^k pi x), cos(2^k pi x)]_{k<L}``.
    """

    coord_dim: int
    hidden: tuple[int, ...]
    out_dim: int
    activation: str = "sine"
    omega0: float = 30.0
    pe_frequencies: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.activation not in ("sine", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.hidden) < 1:
            raise ValueError("need at least one hidden layer")
        if min(self.hidden) < 1 or self.out_dim < 1 or self.coord_dim < 1:
            raise ValueError("all widths must be >= 1")
        if self.pe_frequencies < 0:
            raise ValueError("pe_frequencies must be >= 0")

    @property
    def in_features(self) -> int:
        return self.coord_dim * (1 + 2 * self.pe_frequencies)

    @property
    def layer_widths(self) -> tuple[int, ...]:
        return (self.in_features, *self.hidden, self.out_dim)

    @property
    def num_layers(self) -> int:
        return len(self.layer_widths) - 1

    @property
    def shapes(self) -> list[tuple[tuple[int, int], int]]:
        w = self.layer_widths
        return [((w[m + 1], w[m]), w[m + 1]) for m in range(self.num_layers)]

    @property
    def d(self) -> int:
        return sum(o * i + o for (o, i), _ in self.shapes)

    def block_slices(self) -> list[tuple[slice, slice]]:
        """(weight slice, bias slice) into the flat vector for every layer."""
        out, pos = [], 0
        for (o, i), _ in self.shapes:
            ws = slice(pos, pos + o * i)
            pos += o * i
            bs = slice(pos, pos + o)
            pos += o
            out.append((ws, bs))
        return out

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MlpArchitecture":
        d = dict(d)
        d["hidden"] = tuple(d["hidden"])
        return cls(**d)


PRESETS: dict[str, MlpArchitecture] = {
    # 3-layer SIREN of width 32, grayscale images.
    "mnist": MlpArchitecture(2, (32, 32), 1, "sine"),
    "cifar": MlpArchitecture(2, (64, 64), 3, "sine"),
    # 3-layer ReLU MLP of width 128 with positional encoding, occupancy.
    "shape": MlpArchitecture(3, (128, 128), 1, "relu", pe_frequencies=8),
    # desk-scale variants
    "tiny2d": MlpArchitecture(2, (16, 16), 1, "sine", omega0=10.0),
    "shape-small": MlpArchitecture(3, (32, 32), 1, "relu", pe_frequencies=4),
}


def preset(name: str) -> MlpArchitecture:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown arch preset {name!r}; choose from {sorted(PRESETS)}") from None


@dataclass
class WeightVector:
    arch: MlpArchitecture
    values: np.ndarray
    tag: str = "raw"
    class_label: str | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or len(self.values) != self.arch.d:
            raise LayoutError(f"expected flat vector of length {self.arch.d}, got shape {self.values.shape}")
        if self.tag not in TAGS:
            raise ValueError(f"unknown tag {self.tag!r}")

    def replace(self, values=None, tag=None) -> "WeightVector":
        return WeightVector(
            self.arch,
            self.values.copy() if values is None else values,
            self.tag if tag is None else tag,
            self.class_label,
        )

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return unflatten(self.values, self.arch)


@dataclass
class SignalSample:
    coords: np.ndarray
    targets: np.ndarray
    shape: tuple[int, ...] | None = None  # grid shape when coords come from a grid

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.targets.ndim == 1:
            self.targets = self.targets[:, None]
        if len(self.coords) != len(self.targets):
            raise DimensionError("coords and targets differ in count")
        if np.any(np.abs(self.coords) > 1.0 + 1e-12):
            raise ValueError("coords must lie in [-1, 1]")


# -- layout ------------------------------------------------------------------
def flatten(layers: Sequence[tuple[np.ndarray, np.ndarray]], arch: MlpArchitecture) -> np.ndarray:
    """Concatenate ``[W1 row-major, b1, W2, b2, ...]``."""
    if len(layers) != arch.num_layers:
        raise LayoutError(f"expected {arch.num_layers} layers, got {len(layers)}")
    parts = []
    for (W, b), ((o, i), _) in zip(layers, arch.shapes):
        W, b = np.asarray(W, dtype=np.float64), np.asarray(b, dtype=np.float64)
        if W.shape != (o, i) or b.shape != (o,):
            raise LayoutError(f"layer shapes {W.shape}/{b.shape} do not match {(o, i)}/{(o,)}")
        parts += [W.ravel(), b]
    return np.concatenate(parts)


def unflatten(values: np.ndarray, arch: MlpArchitecture) -> list[tuple[np.ndarray, np.ndarray]]:
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (arch.d,):
        raise LayoutError(f"expected flat vector of length {arch.d}, got shape {values.shape}")
    return [
        (values[ws].reshape(o, i), values[bs])
        for (ws, bs), ((o, i), _) in zip(arch.block_slices(), arch.shapes)
    ]


def split_batch(flat: Tensor, arch: MlpArchitecture) -> list[tuple[Tensor, Tensor]]:
    """Differentiable unflatten of a ``(B, d)`` tensor into ``(B, o, i)``/``(B, o)`` blocks."""
    if flat.ndim != 2 or flat.shape[1] != arch.d:
        raise LayoutError(f"expected (B, {arch.d}), got {flat.shape}")
    B = flat.shape[0]
    return [
        (flat[:, ws].reshape(B, o, i), flat[:, bs])
        for (ws, bs), ((o, i), _) in zip(arch.block_slices(), arch.shapes)
    ]


# -- forward -----------------------------------------------------------------
def positional_encoding(coords: np.ndarray, num_frequencies: int) -> np.ndarray:
    if num_frequencies == 0:
        return coords
    feats = [coords]
    for k in range(num_frequencies):
        arg = (2.0**k) * math.pi * coords
        feats += [np.sin(arg), np.cos(arg)]
    return np.concatenate(feats, axis=-1)


def forward(layers, coords: np.ndarray, arch: MlpArchitecture):
    """Batched forward pass.

    ``layers`` holds ``(W, b)`` pairs shaped ``(B, o, i)`` and ``(B, o)``
    (tensors or arrays); returns ``(B, N, out_dim)``.
    """
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != arch.coord_dim:
        raise DimensionError(f"coords must be (N, {arch.coord_dim}), got {coords.shape}")
    h = Tensor(positional_encoding(coords, arch.pe_frequencies))
    last = len(layers) - 1
    for m, (W, b) in enumerate(layers):
        W, b = T.as_tensor(W), T.as_tensor(b)
        z = T.matmul(h, T.swapaxes(W, -1, -2)) + T.expand_dims(b, -2)
        if m == last:
            h = z
        elif arch.activation == "sine":
            h = T.sin(z * arch.omega0)
        else:
            h = T.relu(z)
    return h


def evaluate(w: WeightVector, coords: np.ndarray) -> np.ndarray:
    """Phi(w)(coords) -> ``(N, out_dim)``."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != w.arch.coord_dim:
        raise DimensionError(f"arch expects {w.arch.coord_dim}-d coords, got {coords.shape}")
    layers = [(W[None], b[None]) for W, b in w.layers()]
    with T.no_grad():
        return forward(layers, coords, w.arch).data[0]


def evaluate_many(ws: Sequence[WeightVector], coords: np.ndarray) -> np.ndarray:
    return evaluate_many_values(np.stack([w.values for w in ws]), coords, ws[0].arch)


# -- init and fitting ----------------------------------------------------------
def init_weights(arch: MlpArchitecture, rng: np.random.Generator) -> np.ndarray:
    """SIREN uniform init for sine nets, Kaiming-uniform for ReLU nets."""
    layers = []
    for m, ((o, i), _) in enumerate(arch.shapes):
        if arch.activation == "sine":
            bound = 1.0 / i if m == 0 else math.sqrt(6.0 / i) / arch.omega0
        else:
            bound = math.sqrt(6.0 / i)
        W = rng.uniform(-bound, bound, size=(o, i))
        b = rng.uniform(-1.0 / math.sqrt(i), 1.0 / math.sqrt(i), size=o)
        if arch.activation == "sine" and m > 0:
            b = b / arch.omega0
        layers.append((W, b))
    return flatten(layers, arch)


@dataclass
class FitResult:
    weights: list[WeightVector]
    final_mse: np.ndarray
    diverged: list[int | None] = field(default_factory=list)  # step index where loss went NaN


def fit_many(
    signals: Sequence[SignalSample],
    arch: MlpArchitecture,
    steps: int = 2000,
    lr: float = 1e-3,
    seeds: Sequence[int] | None = None,
    class_labels: Sequence[str | None] | None = None,
    raise_on_divergence: bool = False,
) -> FitResult:
    """Fit one INR per signal, all sharing the same coordinates, in one batched run.

    Each INR has its own MSE term, so the summed loss yields independent
    gradients and Adam updates per INR.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    coords = signals[0].coords
    for s in signals[1:]:
        if s.coords.shape != coords.shape or not np.array_equal(s.coords, coords):
            raise DimensionError("fit_many needs signals sampled on identical coordinates")
    if arch.out_dim != signals[0].targets.shape[1]:
        raise DimensionError(f"arch out_dim {arch.out_dim} != target dim {signals[0].targets.shape[1]}")
    seeds = list(range(len(signals))) if seeds is None else list(seeds)
    targets = np.stack([s.targets for s in signals])
    B = len(signals)
    init = np.stack([init_weights(arch, np.random.default_rng(sd)) for sd in seeds])
    params = [Tensor(init, requires_grad=True)]
    opt = T.AdamW(params, lr=lr)
    diverged: list[int | None] = [None] * B
    active = np.ones(B, dtype=bool)
    n_elem = targets.shape[1] * targets.shape[2]
    for step in range(steps):
        opt.zero_grad()
        pred = forward(split_batch(params[0], arch), coords, arch)
        diff = pred - targets
        per_item = (diff * diff).sum(axis=(1, 2)) * (1.0 / n_elem)
        bad = ~np.isfinite(per_item.data) & active
        if bad.any():
            for idx in np.flatnonzero(bad):
                diverged[idx] = step
                if raise_on_divergence:
                    raise TrainingError(f"fit diverged at step {step} (item {idx})")
            active &= ~bad
        loss = (per_item * active.astype(np.float64)).sum()
        loss.backward()
        if not active.all():
            params[0].grad[~active] = 0.0
        opt.step()
    final = evaluate_many_values(params[0].data, coords, arch)
    mse = ((final - targets) ** 2).mean(axis=(1, 2))
    labels = list(class_labels) if class_labels is not None else [None] * B
    weights = [WeightVector(arch, params[0].data[i].copy(), "raw", labels[i]) for i in range(B)]
    return FitResult(weights, mse, diverged)


def evaluate_many_values(values: np.ndarray, coords: np.ndarray, arch: MlpArchitecture) -> np.ndarray:
    with T.no_grad():
        layers = [(W.data, b.data) for W, b in split_batch(Tensor(values), arch)]
        return forward(layers, coords, arch).data


def fit(signal: SignalSample, arch: MlpArchitecture, steps: int = 2000, lr: float = 1e-3, seed: int = 0):
    """Overfit a single INR to ``signal``; returns ``(weights, final_mse)``."""
    res = fit_many([signal], arch, steps, lr, [seed], raise_on_divergence=True)
    return res.weights[0], float(res.final_mse[0])


def psnr(pred: np.ndarray, target: np.ndarray, peak: float = 1.0) -> float:
    mse = float(np.mean((np.asarray(pred) - np.asarray(target)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


# -- grids and rendering ---------------------------------------------------------
def pixel_grid(resolution: int, dim: int = 2) -> np.ndarray:
    """Pixel-centre coordinates in [-1, 1]^dim, row-major with the first axis as y."""
    ticks = (np.arange(resolution) + 0.5) / resolution * 2.0 - 1.0
    mesh = np.meshgrid(*([ticks] * dim), indexing="ij")
    # x varies fastest along the last array axis
    return np.stack(mesh[::-1], axis=-1).reshape(-1, dim)


def lattice_grid(resolution: int, dim: int = 3) -> np.ndarray:
    """Grid including the domain corners, spacing ``2/(resolution-1)``."""
    ticks = np.linspace(-1.0, 1.0, resolution)
    mesh = np.meshgrid(*([ticks] * dim), indexing="ij")
    return np.stack(mesh, axis=-1).reshape(-1, dim)


def render_image(w: WeightVector, resolution: int) -> np.ndarray:
    """``(res, res)`` for grayscale, ``(res, res, 3)`` for RGB."""
    if w.arch.coord_dim != 2:
        raise DimensionError("render_image needs a 2-D architecture")
    out = evaluate(w, pixel_grid(resolution)).reshape(resolution, resolution, w.arch.out_dim)
    return out[..., 0] if w.arch.out_dim == 1 else out


@dataclass
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray

    @property
    def empty(self) -> bool:
        return len(self.faces) == 0


def extract_isosurface(field: np.ndarray, iso_level: float) -> Mesh:
    """Marching cubes on a cubic lattice over [-1, 1]^3."""
    from skimage import measure

    res = field.shape[0]
    if not (field.min() < iso_level < field.max()):
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    verts, faces, _, _ = measure.marching_cubes(field, level=iso_level, spacing=(2.0 / (res - 1),) * 3)
    return Mesh(verts - 1.0, faces.astype(np.int64))


def render_mesh(w: WeightVector, grid_resolution: int = 64, iso_level: float = 0.5) -> Mesh:
    if w.arch.coord_dim != 3:
        raise DimensionError("render_mesh needs a 3-D architecture")
    field = evaluate(w, lattice_grid(grid_resolution))[:, 0]
    return extract_isosurface(field.reshape((grid_resolution,) * 3), iso_level)


# -- export -------------------------------------------------------------------
def write_image(path, image: np.ndarray) -> None:
    """Binary PGM for 2-D arrays, PPM for ``(H, W, 3)``; values clamped to [0, 1]."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    pix = np.round(img * 255.0).astype(np.uint8)
    h, w = pix.shape[:2]
    magic = b"P5" if pix.ndim == 2 else b"P6"
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode() + pix.tobytes())


def write_obj(path, mesh: Mesh) -> None:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))
