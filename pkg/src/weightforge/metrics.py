"""Evaluation metrics: reconstruction distance, point-cloud set metrics, pixel diversity.

Chamfer distance is the squared-Euclidean variant and is never scaled here;
reports multiply by 100. Perceptual metrics are replaced by pixel-space RMS.
"""

from __future__ import annotations

import itertools
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .inr import Mesh, SignalSample, WeightVector, evaluate

CHAMFER_REPORT_SCALE = 100.0
DEFAULT_POINTS = 2048


class ContractError(ValueError):
    pass


def reconstruction_distance(w: WeightVector, signal: SignalSample) -> float:
    """RMS error of the INR against the signal samples."""
    pred = evaluate(w, signal.coords)
    return float(np.sqrt(np.mean((pred - signal.targets) ** 2)))


def _points(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or len(a) == 0:
        raise ContractError("point set must be a non-empty (n, dim) array")
    return a


def chamfer(A, B) -> float:
    A, B = _points(A), _points(B)
    if A.shape[1] != B.shape[1]:
        raise ContractError("point sets have different dimensions")
    d2 = cdist(A, B, "sqeuclidean")
    return float(d2.min(axis=1).mean() + d2.min(axis=0).mean())


def chamfer_matrix(X: Sequence, Y: Sequence) -> np.ndarray:
    return np.array([[chamfer(x, y) for y in Y] for x in X])


def one_nna(D: np.ndarray, labels: np.ndarray) -> float:
    """Leave-one-out 1-NN accuracy (percent) from a full distance matrix.

    Exact duplicates of a point (distance 0) are left out of its candidate
    set, ties among the nearest candidates give fractional credit, and a
    point with no candidates scores one half.
    """
    n = len(D)
    if n < 2:
        raise ContractError("1-NNA needs at least two point sets")
    total = 0.0
    for i in range(n):
        cand = np.flatnonzero((np.arange(n) != i) & (D[i] > 0))
        if cand.size == 0:
            total += 0.5
            continue
        d = D[i, cand]
        nearest = cand[d == d.min()]
        total += float(np.mean(labels[nearest] == labels[i]))
    return 100.0 * total / n


def mmd_cov_1nna(generated: Sequence, reference: Sequence) -> tuple[float, float, float]:
    if not len(generated) or not len(reference):
        raise ContractError("generated and reference lists must be non-empty")
    D_gr = chamfer_matrix(generated, reference)
    mmd = float(D_gr.min(axis=0).mean())
    matched = np.unique(D_gr.argmin(axis=1))
    cov = 100.0 * len(matched) / len(reference)
    union = list(generated) + list(reference)
    D = np.zeros((len(union), len(union)))
    G = len(generated)
    D[:G, G:] = D_gr
    D[G:, :G] = D_gr.T
    D[:G, :G] = chamfer_matrix(generated, generated)
    D[G:, G:] = chamfer_matrix(reference, reference)
    labels = np.array([0] * G + [1] * len(reference))
    return mmd, cov, one_nna(D, labels)


def intra_diversity(images: Sequence[np.ndarray]) -> float:
    """Mean over unordered pairs of the RMS pixel difference."""
    if len(images) < 2:
        raise ContractError("intra_diversity needs at least two images")
    arrs = [np.asarray(im, dtype=np.float64) for im in images]
    if any(a.shape != arrs[0].shape for a in arrs):
        raise ContractError("images must share one resolution")
    dists = [np.sqrt(np.mean((a - b) ** 2)) for a, b in itertools.combinations(arrs, 2)]
    return float(np.mean(dists))


def sample_surface_points(mesh: Mesh, n: int = DEFAULT_POINTS, seed: int = 0) -> np.ndarray:
    """Area-weighted uniform samples on the mesh triangles."""
    if mesh.empty:
        raise ContractError("cannot sample an empty mesh")
    tri = mesh.vertices[mesh.faces]
    areas = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    if areas.sum() <= 0:
        raise ContractError("mesh has zero surface area")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(tri), size=n, p=areas / areas.sum())
    r1 = np.sqrt(rng.uniform(size=(n, 1)))
    r2 = rng.uniform(size=(n, 1))
    t = tri[idx]
    return (1 - r1) * t[:, 0] + r1 * (1 - r2) * t[:, 1] + r1 * r2 * t[:, 2]


# -- reports ------------------------------------------------------------------------
def write_report(path, values: dict) -> None:
    """One ``key=value`` line per entry, in insertion order."""
    lines = []
    for k, v in values.items():
        if isinstance(v, float):
            v = repr(v)
        lines.append(f"{k}={v}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_report(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            k, _, v = line.partition("=")
            out[k] = v
    return out
