"""Procedural signal families standing in for image and shape INR datasets.

Every class is a parameterised template; members of a class differ by
seeded jitter of the template parameters.
"""

from __future__ import annotations

import math

import numpy as np

from .inr import SignalSample, lattice_grid, pixel_grid

KINDS = ("blobs2d", "digits-like", "spheres3d", "superquadrics3d")

# stroke templates on [-1, 1]^2, one list of segments per class
_STROKES = [
    [((-0.5, -0.6), (0.5, -0.6)), ((0.5, -0.6), (0.5, 0.6)), ((0.5, 0.6), (-0.5, 0.6)), ((-0.5, 0.6), (-0.5, -0.6))],
    [((0.0, -0.7), (0.0, 0.7))],
    [((-0.5, -0.6), (0.5, -0.6)), ((0.5, -0.6), (0.5, 0.0)), ((0.5, 0.0), (-0.5, 0.0)), ((-0.5, 0.0), (-0.5, 0.6)), ((-0.5, 0.6), (0.5, 0.6))],
    [((-0.5, -0.6), (0.5, -0.6)), ((0.5, -0.6), (0.5, 0.6)), ((-0.3, 0.0), (0.5, 0.0)), ((-0.5, 0.6), (0.5, 0.6))],
    [((-0.5, -0.6), (-0.5, 0.0)), ((-0.5, 0.0), (0.5, 0.0)), ((0.4, -0.6), (0.4, 0.7))],
    [((-0.6, -0.6), (0.6, 0.6)), ((-0.6, 0.6), (0.6, -0.6))],
    [((-0.6, 0.0), (0.6, 0.0)), ((0.0, -0.6), (0.0, 0.6))],
    [((-0.5, -0.6), (0.5, -0.6)), ((0.5, -0.6), (-0.2, 0.7))],
    [((-0.6, 0.6), (0.0, -0.6)), ((0.0, -0.6), (0.6, 0.6))],
    [((-0.6, -0.5), (0.6, -0.5)), ((-0.6, 0.5), (0.6, 0.5)), ((-0.6, -0.5), (-0.6, 0.5))],
]

# superquadric exponents per class: rounded box, sphere, octahedron-like, ...
_SQ_EXPONENTS = [2.0, 4.0, 1.2, 8.0, 1.6, 3.0]


def blob_image(coords: np.ndarray, centre, sigma: float) -> np.ndarray:
    return np.exp(-((coords - np.asarray(centre)) ** 2).sum(1) / (2.0 * sigma**2))


def _segment_distance(p: np.ndarray, a, b) -> np.ndarray:
    a, b = np.asarray(a), np.asarray(b)
    ab = b - a
    t = np.clip(((p - a) @ ab) / max(float(ab @ ab), 1e-12), 0.0, 1.0)
    return np.linalg.norm(p - (a + t[:, None] * ab), axis=1)


def _occupancy(sd: np.ndarray, softness: float) -> np.ndarray:
    """Smooth inside-indicator from a signed distance (positive inside)."""
    return 1.0 / (1.0 + np.exp(-sd / softness))


def make_signal(kind: str, label: int, num_classes: int, rng: np.random.Generator, resolution: int = 16) -> SignalSample:
    if kind == "blobs2d":
        coords = pixel_grid(resolution, 2)
        angle = 2.0 * math.pi * label / max(num_classes, 1)
        centre = 0.45 * np.array([math.cos(angle), math.sin(angle)]) + rng.uniform(-0.08, 0.08, size=2)
        sigma = 0.3 * rng.uniform(0.9, 1.1)
        return SignalSample(coords, blob_image(coords, centre, sigma), (resolution, resolution))
    if kind == "digits-like":
        coords = pixel_grid(resolution, 2)
        strokes = _STROKES[label % len(_STROKES)]
        shift = rng.uniform(-0.08, 0.08, size=2)
        stretch = rng.uniform(0.9, 1.1, size=2)
        width = 0.14 * rng.uniform(0.85, 1.15)
        d = np.full(len(coords), np.inf)
        for a, b in strokes:
            d = np.minimum(d, _segment_distance(coords, np.multiply(a, stretch) + shift, np.multiply(b, stretch) + shift))
        return SignalSample(coords, np.exp(-(d**2) / (2.0 * width**2)), (resolution, resolution))
    if kind == "spheres3d":
        coords = lattice_grid(resolution, 3)
        radius = 0.3 + 0.4 * (label + 0.5) / max(num_classes, 1) + rng.uniform(-0.03, 0.03)
        centre = rng.uniform(-0.05, 0.05, size=3)
        sd = radius - np.linalg.norm(coords - centre, axis=1)
        return SignalSample(coords, _occupancy(sd, 0.05), (resolution,) * 3)
    if kind == "superquadrics3d":
        coords = lattice_grid(resolution, 3)
        p = _SQ_EXPONENTS[label % len(_SQ_EXPONENTS)]
        axes = 0.55 * rng.uniform(0.85, 1.15, size=3)
        q = (np.abs(coords / axes) ** p).sum(1) ** (1.0 / p)
        return SignalSample(coords, _occupancy(1.0 - q, 0.08), (resolution,) * 3)
    raise ValueError(f"unknown dataset kind {kind!r}; expected one of {KINDS}")


def item_seeds(seed: int, label: int, index: int, shared_init: bool = True) -> tuple[int, int]:
    """``(signal_seed, init_seed)`` for item ``index`` of class ``label``.

    With ``shared_init`` every item starts fitting from the same weights,
    which keeps fitted INRs of similar signals close in weight space.
    """
    sig_seed, own_init = np.random.SeedSequence([seed, label, index]).generate_state(2)
    init = np.random.SeedSequence([seed]).generate_state(1)[0] if shared_init else own_init
    return int(sig_seed), int(init) % (2**31)


def class_mean_signal(kind: str, label: int, num_classes: int, samples: int = 64, seed: int = 0, resolution: int = 16) -> SignalSample:
    """Monte-Carlo mean of a class's signals (all members share coordinates)."""
    rng = np.random.default_rng(seed)
    sigs = [make_signal(kind, label, num_classes, rng, resolution) for _ in range(samples)]
    return SignalSample(sigs[0].coords, np.mean([s.targets for s in sigs], axis=0), sigs[0].shape)
