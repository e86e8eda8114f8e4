"""Weight-space augmentations that act on the function an INR represents.

Coordinate transforms (rotate/translate/scale) rewrite the first linear
layer; colour transforms rewrite the last one; ``bias_perturb`` adds noise
to biases only. Identity parameters return the input values unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .inr import WeightVector

LUMA = np.array([0.299, 0.587, 0.114])


class UnsupportedAugmentation(ValueError):
    pass


class ContractError(ValueError):
    pass


def _check_linear_coords(w: WeightVector, name: str, need_2d: bool = False) -> None:
    if w.arch.pe_frequencies:
        raise UnsupportedAugmentation(f"{name} needs a linear coordinate map; arch uses positional encoding")
    if need_2d and w.arch.coord_dim != 2:
        raise UnsupportedAugmentation(f"{name} is only defined for 2-D INRs")


def _with_layer(w: WeightVector, m: int, W: np.ndarray, b: np.ndarray) -> WeightVector:
    values = w.values.copy()
    ws, bs = w.arch.block_slices()[m]
    values[ws] = W.ravel()
    values[bs] = b
    return w.replace(values=values, tag="augmented")


def rotation_matrix(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def rotate(w: WeightVector, angle: float) -> WeightVector:
    """New INR ``x -> f(R(angle) x)``, rotating about the domain centre."""
    _check_linear_coords(w, "rotate", need_2d=True)
    if angle == 0.0:
        return w.replace(tag="augmented")
    W, b = w.layers()[0]
    return _with_layer(w, 0, W @ rotation_matrix(angle), b)


def translate(w: WeightVector, offset) -> WeightVector:
    """New INR ``x -> f(x + offset)``."""
    _check_linear_coords(w, "translate")
    offset = np.asarray(offset, dtype=np.float64)
    if offset.shape != (w.arch.coord_dim,):
        raise ContractError(f"offset must have shape ({w.arch.coord_dim},)")
    if not offset.any():
        return w.replace(tag="augmented")
    W, b = w.layers()[0]
    return _with_layer(w, 0, W, b + W @ offset)


def scale(w: WeightVector, factor: float) -> WeightVector:
    """New INR ``x -> f(factor * x)``."""
    _check_linear_coords(w, "scale")
    if factor == 1.0:
        return w.replace(tag="augmented")
    W, b = w.layers()[0]
    return _with_layer(w, 0, W * factor, b)


def color_jitter(w: WeightVector, brightness: float = 0.0, contrast: float = 1.0, saturation: float = 1.0) -> WeightVector:
    """Affine maps on the output: ``y -> contrast*(y-0.5)+0.5+brightness``, then saturation mixing."""
    if saturation != 1.0 and w.arch.out_dim != 3:
        raise UnsupportedAugmentation("saturation needs RGB output")
    last = w.arch.num_layers - 1
    W, b = w.layers()[last]
    W, b = W.copy(), b.copy()
    changed = False
    if contrast != 1.0:
        W = W * contrast
        b = contrast * (b - 0.5) + 0.5
        changed = True
    if brightness != 0.0:
        b = b + brightness
        changed = True
    if saturation != 1.0:
        M = saturation * np.eye(3) + (1.0 - saturation) * np.outer(np.ones(3), LUMA)
        W, b = M @ W, M @ b
        changed = True
    if not changed:
        return w.replace(tag="augmented")
    return _with_layer(w, last, W, b)


def bias_perturb(w: WeightVector, sigma: float, seed: int | np.random.Generator = 0) -> WeightVector:
    if sigma < 0:
        raise ContractError("sigma must be >= 0")
    if sigma == 0:
        return w.replace(tag="augmented")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    values = w.values.copy()
    for _, bs in w.arch.block_slices():
        values[bs] = values[bs] + sigma * rng.standard_normal(bs.stop - bs.start)
    return w.replace(values=values, tag="augmented")


@dataclass(frozen=True)
class AugmentationPolicy:
    """Ranges for one random composition; ``None`` disables an augmentation.

    Angles are half-widths (uniform in ``[-r, r]``); ``scale``, ``contrast``
    and ``saturation`` are ``(low, high)`` ranges.
    """

    rotation: float | None = None
    translation: float | None = None
    scale: tuple[float, float] | None = None
    bias_sigma: float | None = None
    brightness: float | None = None
    contrast: tuple[float, float] | None = None
    saturation: tuple[float, float] | None = None

    def enabled(self) -> list[str]:
        return [k for k, v in self.__dict__.items() if v is not None]

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items() if v is not None}

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationPolicy":
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


def default_policy(arch) -> AugmentationPolicy:
    if arch.pe_frequencies:
        return AugmentationPolicy(bias_sigma=0.01, brightness=0.1, contrast=(0.8, 1.2))
    if arch.coord_dim == 2:
        return AugmentationPolicy(
            rotation=math.pi / 6,
            translation=0.2,
            scale=(0.8, 1.2),
            bias_sigma=0.01,
            saturation=(0.8, 1.2) if arch.out_dim == 3 else None,
        )
    return AugmentationPolicy(translation=0.1, scale=(0.9, 1.1), bias_sigma=0.01)


def random_augmentation(w: WeightVector, policy: AugmentationPolicy, seed: int | np.random.Generator = 0) -> WeightVector:
    """Sample one composition of the enabled augmentations (fixed order)."""
    if not policy.enabled():
        raise ContractError("augmentation policy enables nothing")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = w
    if policy.rotation is not None:
        out = rotate(out, rng.uniform(-policy.rotation, policy.rotation))
    if policy.translation is not None:
        out = translate(out, rng.uniform(-policy.translation, policy.translation, size=w.arch.coord_dim))
    if policy.scale is not None:
        out = scale(out, rng.uniform(*policy.scale))
    if policy.brightness is not None or policy.contrast is not None or policy.saturation is not None:
        br = rng.uniform(-policy.brightness, policy.brightness) if policy.brightness is not None else 0.0
        ct = rng.uniform(*policy.contrast) if policy.contrast is not None else 1.0
        st = rng.uniform(*policy.saturation) if policy.saturation is not None else 1.0
        out = color_jitter(out, br, ct, st)
    if policy.bias_sigma is not None:
        out = bias_perturb(out, policy.bias_sigma, rng)
    return out.replace(tag="augmented")
