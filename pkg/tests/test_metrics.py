import numpy as np
import pytest
from hypothesis import given, strategies as st

from weightforge.inr import Mesh, MlpArchitecture, SignalSample, WeightVector, extract_isosurface, lattice_grid
from weightforge.metrics import (
    ContractError,
    chamfer,
    intra_diversity,
    mmd_cov_1nna,
    one_nna,
    read_report,
    reconstruction_distance,
    sample_surface_points,
    write_report,
)

from oracles import chamfer_loops, set_metrics_brute


# -- chamfer ----------------------------------------------------------------------------------
def test_chamfer_hand_cases():
    assert chamfer([[0.0, 0.0]], [[0.0, 0.0]]) == 0.0
    assert chamfer([[0.0, 0.0]], [[3.0, 4.0]]) == 50.0
    # A={0}, B={0,2} on a line: A->B mean 0, B->A mean (0+4)/2
    assert chamfer([[0.0]], [[0.0], [2.0]]) == 2.0


def test_chamfer_errors():
    with pytest.raises(ContractError):
        chamfer(np.zeros((0, 3)), np.zeros((2, 3)))
    with pytest.raises(ContractError):
        chamfer(np.zeros((2, 2)), np.zeros((2, 3)))


@given(st.integers(0, 2**31), st.integers(1, 6), st.integers(1, 6))
def test_chamfer_symmetric_and_matches_loops(seed, n, m):
    rng = np.random.default_rng(seed)
    A, B = rng.normal(size=(n, 3)), rng.normal(size=(m, 3))
    assert chamfer(A, B) == pytest.approx(chamfer(B, A), abs=1e-12)
    assert chamfer(A, B) == pytest.approx(chamfer_loops(A, B), abs=1e-12)
    assert chamfer(A, A) == 0.0


# -- set metrics ------------------------------------------------------------------------------
def _cloud_list(rng, n):
    # small integer coordinates make ties and exact duplicates likely
    return [rng.integers(0, 3, size=(rng.integers(1, 4), 2)).astype(float) for _ in range(n)]


@pytest.mark.parametrize("seed", range(20))
def test_set_metrics_match_brute_force(seed):
    rng = np.random.default_rng(seed)
    gen, ref = _cloud_list(rng, rng.integers(1, 6)), _cloud_list(rng, rng.integers(1, 6))
    assert mmd_cov_1nna(gen, ref) == set_metrics_brute(gen, ref)


def test_identical_lists():
    rng = np.random.default_rng(0)
    clouds = [rng.normal(size=(5, 3)) for _ in range(4)]
    mmd, cov, nna = mmd_cov_1nna(clouds, [c.copy() for c in clouds])
    assert (mmd, cov, nna) == (0.0, 100.0, 50.0)


def test_single_generated_covers_one():
    rng = np.random.default_rng(1)
    ref = [rng.normal(size=(4, 3)) for _ in range(4)]
    assert mmd_cov_1nna([rng.normal(size=(4, 3))], ref)[1] == 25.0


def test_set_metric_contracts():
    with pytest.raises(ContractError):
        mmd_cov_1nna([], [np.zeros((1, 3))])
    with pytest.raises(ContractError):
        one_nna(np.zeros((1, 1)), np.array([0]))


def test_one_nna_separated_sets():
    D = np.array([[0, 1, 9, 9], [1, 0, 9, 9], [9, 9, 0, 1], [9, 9, 1, 0]], dtype=float)
    assert one_nna(D, np.array([0, 0, 1, 1])) == 100.0
    assert one_nna(D, np.array([0, 1, 0, 1])) == 0.0


# -- diversity and reconstruction ---------------------------------------------------------------
def test_intra_diversity_cases():
    a = np.zeros((4, 4))
    assert intra_diversity([a, a, a]) == 0.0
    assert intra_diversity([a, a + 1.0]) == 1.0
    # pairs (0,1)=1, (0,2)=2, (1,2)=1
    assert intra_diversity([a, a + 1.0, a + 2.0]) == pytest.approx(4 / 3)
    with pytest.raises(ContractError):
        intra_diversity([a])
    with pytest.raises(ContractError):
        intra_diversity([a, np.zeros((3, 3))])


def test_reconstruction_distance():
    arch = MlpArchitecture(2, (3,), 1, "relu")
    const = np.zeros(arch.d)
    const[-1] = 0.25
    w = WeightVector(arch, const)
    coords = np.random.default_rng(0).uniform(-1, 1, (10, 2))
    assert reconstruction_distance(w, SignalSample(coords, np.full((10, 1), 0.25))) == 0.0
    assert reconstruction_distance(w, SignalSample(coords, np.full((10, 1), 0.75))) == pytest.approx(0.5)


# -- surface sampling ------------------------------------------------------------------------------
def test_surface_samples_lie_in_triangle():
    mesh = Mesh(np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]), np.array([[0, 1, 2]]))
    p = sample_surface_points(mesh, 500, seed=0)
    assert p.shape == (500, 3)
    assert np.all(p[:, 2] == 0) and np.all(p[:, :2] >= -1e-12) and np.all(p[:, 0] + p[:, 1] <= 1 + 1e-12)


def test_surface_samples_on_sphere():
    res = 48
    g = lattice_grid(res)
    mesh = extract_isosurface((np.linalg.norm(g, axis=1) - 0.5).reshape(res, res, res), 0.0)
    p = sample_surface_points(mesh, 2048, seed=1)
    r = np.linalg.norm(p, axis=1)
    assert abs(r.mean() - 0.5) < 0.01
    assert np.all(np.abs(r - 0.5) < 0.02 * 0.5)
    assert np.array_equal(p, sample_surface_points(mesh, 2048, seed=1))


def test_empty_mesh_rejected():
    with pytest.raises(ContractError):
        sample_surface_points(Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=int)))


def test_report_round_trip(tmp_path):
    vals = {"mmd": 0.123456789, "cov": 50.0, "n": 8, "name": "x"}
    write_report(tmp_path / "r.txt", vals)
    back = read_report(tmp_path / "r.txt")
    assert list(back) == list(vals)
    assert float(back["mmd"]) == vals["mmd"] and back["n"] == "8"
