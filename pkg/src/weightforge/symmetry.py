"""Hidden-neuron permutations acting on weight vectors, and TV-minimising smoothing.

A ``PermutationPlan`` holds one index array per hidden layer. Applying it
reorders neurons so that new neuron ``i`` of hidden layer ``m`` is old
neuron ``perms[m][i]``: rows of ``W_m``, entries of ``b_m`` and columns of
``W_{m+1}`` move together, which leaves the network function unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .inr import MlpArchitecture, WeightVector, evaluate, flatten


class PlanError(ValueError):
    """Permutation plan does not fit the architecture."""


class ContractError(ValueError):
    pass


@dataclass(frozen=True)
class PermutationPlan:
    perms: tuple[np.ndarray, ...]

    def __post_init__(self):
        perms = tuple(np.asarray(p, dtype=np.int64) for p in self.perms)
        for p in perms:
            if p.ndim != 1 or not np.array_equal(np.sort(p), np.arange(len(p))):
                raise PlanError(f"not a permutation: {p}")
        object.__setattr__(self, "perms", perms)

    @classmethod
    def identity(cls, arch: MlpArchitecture) -> "PermutationPlan":
        return cls(tuple(np.arange(h) for h in arch.hidden))

    @classmethod
    def random(cls, arch: MlpArchitecture, rng: np.random.Generator) -> "PermutationPlan":
        return cls(tuple(rng.permutation(h) for h in arch.hidden))

    def inverse(self) -> "PermutationPlan":
        return PermutationPlan(tuple(np.argsort(p) for p in self.perms))

    def then(self, other: "PermutationPlan") -> "PermutationPlan":
        """Plan equal to applying ``self`` first and ``other`` second."""
        return PermutationPlan(tuple(p[q] for p, q in zip(self.perms, other.perms)))

    def check(self, arch: MlpArchitecture) -> None:
        widths = tuple(len(p) for p in self.perms)
        if widths != arch.hidden:
            raise PlanError(f"plan widths {widths} do not match hidden widths {arch.hidden}")

    def __eq__(self, other):
        return isinstance(other, PermutationPlan) and len(self.perms) == len(other.perms) and all(
            np.array_equal(a, b) for a, b in zip(self.perms, other.perms)
        )

    def __hash__(self):
        return hash(tuple(tuple(p.tolist()) for p in self.perms))


def compose(second: PermutationPlan, first: PermutationPlan) -> PermutationPlan:
    """``act(compose(g2, g1), w) == act(g2, act(g1, w))``."""
    return first.then(second)


@dataclass(frozen=True)
class DependencyGraph:
    """Which parameter blocks each hidden permutation axis touches.

    ``axes[m]`` lists ``(block, dim)`` pairs, block names being ``W{k}`` or
    ``b{k}`` for linear layer ``k`` (0-based) and ``dim`` the array axis that
    axis ``m`` indexes.
    """

    blocks: tuple[str, ...]
    axes: tuple[tuple[tuple[str, int], ...], ...]

    @classmethod
    def from_arch(cls, arch: MlpArchitecture) -> "DependencyGraph":
        blocks = tuple(f"{kind}{k}" for k in range(arch.num_layers) for kind in ("W", "b"))
        axes = tuple(((f"W{m}", 0), (f"b{m}", 0), (f"W{m + 1}", 1)) for m in range(len(arch.hidden)))
        return cls(blocks, axes)


def _blocks(w: WeightVector) -> dict[str, np.ndarray]:
    out = {}
    for k, (W, b) in enumerate(w.layers()):
        out[f"W{k}"], out[f"b{k}"] = W.copy(), b.copy()
    return out


def _from_blocks(blocks: dict[str, np.ndarray], arch: MlpArchitecture) -> np.ndarray:
    return flatten([(blocks[f"W{k}"], blocks[f"b{k}"]) for k in range(arch.num_layers)], arch)


def act(g: PermutationPlan, w: WeightVector) -> WeightVector:
    g.check(w.arch)
    graph = DependencyGraph.from_arch(w.arch)
    blocks = _blocks(w)
    for perm, incident in zip(g.perms, graph.axes):
        for name, dim in incident:
            blocks[name] = np.take(blocks[name], perm, axis=dim)
    return w.replace(values=_from_blocks(blocks, w.arch))


def neuron_signatures(w: WeightVector, layer: int) -> np.ndarray:
    """Per-neuron concatenation of incoming row, bias and outgoing column."""
    layers = w.layers()
    W_in, b = layers[layer]
    W_out = layers[layer + 1][0]
    return np.concatenate([W_in, b[:, None], W_out.T], axis=1)


def total_variation(w: WeightVector) -> float:
    """Sum of L1 differences between adjacent hidden neurons over all incident blocks."""
    tv = 0.0
    layers = w.layers()
    for m in range(len(w.arch.hidden)):
        W_in, b = layers[m]
        W_out = layers[m + 1][0]
        tv += np.abs(np.diff(W_in, axis=0)).sum()
        tv += np.abs(np.diff(b)).sum()
        tv += np.abs(np.diff(W_out, axis=1)).sum()
    return float(tv)


# -- shortest Hamiltonian path by 2.5-opt local search ------------------------------
def _path_cost(path, D) -> float:
    return float(sum(D[path[i], path[i + 1]] for i in range(len(path) - 1)))


def _nearest_neighbour(start: int, D: np.ndarray) -> list[int]:
    n = len(D)
    path = [start]
    free = np.ones(n, dtype=bool)
    free[start] = False
    for _ in range(n - 1):
        row = np.where(free, D[path[-1]], np.inf)
        nxt = int(np.argmin(row))
        path.append(nxt)
        free[nxt] = False
    return path


def _two_opt_move(path, D, eps) -> bool:
    """First improving segment reversal of an open path, row-major over (i, j).

    Reversing ``path[i..j]`` replaces edges ``(i-1, i)`` and ``(j, j+1)``; at
    the path ends only one edge changes.
    """
    n = len(path)
    Dp = D[np.ix_(path, path)]
    idx = np.arange(n)
    # edge entering the segment
    prev = np.clip(idx - 1, 0, None)
    t1 = Dp[prev[:, None], idx[None, :]] - Dp[prev, idx][:, None]
    t1[0, :] = 0.0
    # edge leaving the segment
    nxt = np.clip(idx + 1, None, n - 1)
    t2 = Dp[idx[:, None], nxt[None, :]] - Dp[idx, nxt][None, :]
    t2[:, n - 1] = 0.0
    delta = t1 + t2
    valid = idx[:, None] < idx[None, :]
    valid[0, n - 1] = False
    hits = np.flatnonzero((valid & (delta < -eps)).ravel())
    if hits.size == 0:
        return False
    i, j = divmod(int(hits[0]), n)
    path[i : j + 1] = path[i : j + 1][::-1]
    return True


def _relocate_move(path, D, eps) -> bool:
    """First improving single-node relocation (or-opt of length one).

    Node at position ``i`` moves into gap ``g`` (between positions ``g`` and
    ``g+1``; ``g = -1`` is the front and ``g = n-1`` the back).
    """
    n = len(path)
    Dp = D[np.ix_(path, path)]
    idx = np.arange(n)
    left = np.where(idx > 0, Dp[idx, np.clip(idx - 1, 0, None)], 0.0)
    right = np.where(idx < n - 1, Dp[idx, np.clip(idx + 1, None, n - 1)], 0.0)
    bridge = np.where((idx > 0) & (idx < n - 1), Dp[np.clip(idx - 1, 0, None), np.clip(idx + 1, None, n - 1)], 0.0)
    removed = left + right - bridge
    gaps = np.arange(-1, n)
    a = np.clip(gaps, 0, None)
    b = np.clip(gaps + 1, None, n - 1)
    has_a = gaps >= 0
    has_b = gaps <= n - 2
    added = (
        np.where(has_a[None, :], Dp[idx[:, None], a[None, :]], 0.0)
        + np.where(has_b[None, :], Dp[idx[:, None], b[None, :]], 0.0)
        - np.where((has_a & has_b)[None, :], Dp[a, b][None, :], 0.0)
    )
    valid = (gaps[None, :] != idx[:, None] - 1) & (gaps[None, :] != idx[:, None])
    hits = np.flatnonzero((valid & (added < removed[:, None] - eps)).ravel())
    if hits.size == 0:
        return False
    i, gi = divmod(int(hits[0]), n + 1)
    g = int(gaps[gi])
    node = path[i]
    rest = path[:i] + path[i + 1 :]
    k = g + 1 if g < i else g
    path[:] = rest[:k] + [node] + rest[k:]
    return True


def local_search(path: list[int], D: np.ndarray) -> list[int]:
    """Alternate 2-opt and relocation moves until neither improves."""
    path = list(path)
    eps = 1e-12 * max(1.0, float(D.max()) if D.size else 1.0)
    while _two_opt_move(path, D, eps) or _relocate_move(path, D, eps):
        pass
    return path


def _canonical_order(sig: np.ndarray) -> np.ndarray:
    """Neuron ranking that depends only on the signatures, not their positions."""
    return np.lexsort(sig.T[::-1])


def shortest_path_order(sig: np.ndarray, restarts: int, rng: np.random.Generator) -> np.ndarray:
    """Low-cost open Hamiltonian path through neurons under L1 signature distance.

    Candidates: the current order and nearest-neighbour tours from
    ``restarts`` start neurons, each refined by 2.5-opt. Among candidates
    of (numerically) equal cost the lexicographically smallest order wins;
    a path and its reverse are the same candidate.
    """
    n = len(sig)
    if n <= 1:
        return np.arange(n)
    D = np.abs(sig[:, None, :] - sig[None, :, :]).sum(-1)
    ranking = _canonical_order(sig)
    picks = rng.choice(n, size=min(restarts, n), replace=False) if restarts < n else np.arange(n)
    starts = [int(ranking[p]) for p in picks]
    candidates = [local_search(list(range(n)), D)]
    candidates += [local_search(_nearest_neighbour(s, D), D) for s in starts]
    best, best_cost = None, np.inf
    for cand in candidates:
        cost = _path_cost(cand, D)
        cand = min(cand, cand[::-1])
        tol = 1e-12 * max(1.0, abs(best_cost) if np.isfinite(best_cost) else 1.0)
        if cost < best_cost - tol or (abs(cost - best_cost) <= tol and cand < best):
            best, best_cost = cand, min(cost, best_cost)
    return np.asarray(best, dtype=np.int64)


def smooth(w: WeightVector, restarts: int = 5, seed: int = 0) -> tuple[WeightVector, PermutationPlan]:
    """Reorder hidden neurons to reduce total variation.

    Each hidden axis is solved on its own: the L1 distance between two
    neurons' signatures is unchanged by reorderings of the neighbouring
    axes, so per-axis path costs add up to the network TV exactly.
    """
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    rng = np.random.default_rng(seed)
    perms = [shortest_path_order(neuron_signatures(w, m), restarts, rng) for m in range(len(w.arch.hidden))]
    plan = PermutationPlan(tuple(perms))
    return act(plan, w).replace(tag="smoothed"), plan


def functionally_equivalent(w1: WeightVector, w2: WeightVector, probe_coords: np.ndarray, tol: float) -> bool:
    return max_deviation(w1, w2, probe_coords) <= tol


def max_deviation(w1: WeightVector, w2: WeightVector, probe_coords: np.ndarray) -> float:
    if w1.arch != w2.arch:
        raise ContractError("weight vectors have different architectures")
    return float(np.max(np.abs(evaluate(w1, probe_coords) - evaluate(w2, probe_coords))))
