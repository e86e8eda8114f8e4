import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from weightforge.datasets import blob_image
from weightforge.inr import (
    LayoutError,
    MlpArchitecture,
    SignalSample,
    TrainingError,
    WeightVector,
    evaluate,
    extract_isosurface,
    fit,
    flatten,
    init_weights,
    lattice_grid,
    pixel_grid,
    preset,
    psnr,
    render_image,
    render_mesh,
    unflatten,
    write_image,
    write_obj,
)
from weightforge.tensor import DimensionError

from oracles import mlp_reference

archs = st.builds(
    MlpArchitecture,
    coord_dim=st.integers(1, 3),
    hidden=st.lists(st.integers(1, 6), min_size=1, max_size=3).map(tuple),
    out_dim=st.integers(1, 3),
    activation=st.sampled_from(["sine", "relu"]),
)


def test_parameter_count():
    arch = preset("mnist")
    assert arch.d == (2 * 32 + 32) + (32 * 32 + 32) + (32 + 1)


def test_zero_weights_relu_output_is_zero():
    arch = MlpArchitecture(2, (4, 4), 1, "relu")
    w = WeightVector(arch, np.zeros(arch.d))
    out = evaluate(w, np.random.default_rng(0).uniform(-1, 1, (10, 2)))
    assert np.all(out == 0.0)


def test_sine_passthrough():
    omega0 = 30.0
    arch = MlpArchitecture(1, (1,), 1, "sine", omega0=omega0)
    # hidden pre-activation omega0 * (1 * x + 0), output row 1, bias 0
    w = WeightVector(arch, np.array([1.0, 0.0, 1.0, 0.0]))
    x = np.linspace(-1, 1, 101)[:, None]
    assert np.max(np.abs(evaluate(w, x)[:, 0] - np.sin(omega0 * x[:, 0]))) < 1e-9


def test_evaluate_matches_loop_reference(rng):
    arch = MlpArchitecture(2, (5, 4), 2, "sine")
    w = WeightVector(arch, init_weights(arch, rng))
    x = rng.uniform(-1, 1, (20, 2))
    ref = mlp_reference(w.values, x, arch.layer_widths, "sine", arch.omega0)
    assert np.max(np.abs(evaluate(w, x) - ref)) < 1e-12


def test_coordinate_dimension_mismatch():
    w = WeightVector(preset("mnist"), np.zeros(preset("mnist").d))
    with pytest.raises(DimensionError):
        evaluate(w, np.zeros((4, 3)))


def test_flatten_smallest_case():
    arch = MlpArchitecture(1, (1,), 1, "relu")
    layers = [(np.array([[2.0]]), np.array([3.0])), (np.array([[4.0]]), np.array([5.0]))]
    assert flatten(layers, arch).tolist() == [2.0, 3.0, 4.0, 5.0]


def test_length_mismatch_is_layout_error():
    with pytest.raises(LayoutError):
        unflatten(np.zeros(5), preset("mnist"))
    with pytest.raises(LayoutError):
        WeightVector(preset("mnist"), np.zeros(3))


@given(archs, st.integers(0, 2**31))
def test_flatten_round_trip_is_bitwise(arch, seed):
    values = np.random.default_rng(seed).normal(size=arch.d)
    back = flatten(unflatten(values, arch), arch)
    assert back.tobytes() == values.tobytes()
    assert sum(W.size + b.size for W, b in unflatten(values, arch)) == arch.d


@given(archs, st.integers(0, 2**31))
def test_evaluate_is_deterministic(arch, seed):
    rng = np.random.default_rng(seed)
    w = WeightVector(arch, rng.normal(size=arch.d))
    x = rng.uniform(-1, 1, (7, arch.coord_dim))
    assert evaluate(w, x).tobytes() == evaluate(w, x).tobytes()


def test_fit_constant_relu():
    # at lr 1e-3, 500 Adam steps are too few to flatten the random init's slopes
    arch = MlpArchitecture(2, (32, 32), 1, "relu")
    coords = pixel_grid(8)
    w, mse = fit(SignalSample(coords, np.full(len(coords), 0.5)), arch, steps=500, lr=1e-2, seed=0)
    assert mse < 1e-4


def test_fit_blob_16():
    coords = pixel_grid(16)
    sig = SignalSample(coords, blob_image(coords, (0.2, -0.1), 0.3))
    w, mse = fit(sig, preset("mnist"), steps=2000, seed=0)
    assert psnr(evaluate(w, coords)[:, 0], sig.targets[:, 0]) >= 30.0


def test_fit_blob_28():
    coords = pixel_grid(28)
    sig = SignalSample(coords, blob_image(coords, (-0.3, 0.25), 0.25))
    w, _ = fit(sig, preset("mnist"), steps=2000, seed=1)
    img = render_image(w, 28)
    assert psnr(img.reshape(-1), sig.targets[:, 0]) >= 30.0


def test_fit_sphere_occupancy_accuracy():
    arch = preset("shape-small")
    coords = lattice_grid(14)
    inside = (np.linalg.norm(coords, axis=1) < 0.5).astype(float)
    w, _ = fit(SignalSample(coords, inside), arch, steps=2000, lr=1e-3, seed=0)
    held = np.random.default_rng(7).uniform(-1, 1, (4000, 3))
    pred = evaluate(w, held)[:, 0] > 0.5
    acc = np.mean(pred == (np.linalg.norm(held, axis=1) < 0.5))
    assert acc >= 0.98


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_fit_divergence_is_training_error():
    coords = pixel_grid(4)
    with pytest.raises(TrainingError, match="step"):
        fit(SignalSample(coords, np.full(len(coords), 1e200)), preset("tiny2d"), steps=5, lr=1e3)


def test_render_constant_image():
    arch = MlpArchitecture(2, (3,), 1, "relu")
    values = np.zeros(arch.d)
    values[-1] = 0.5
    img = render_image(WeightVector(arch, values), 8)
    assert img.shape == (8, 8) and np.all(img == 0.5)


def test_constant_zero_occupancy_gives_empty_mesh():
    arch = preset("shape-small")
    mesh = render_mesh(WeightVector(arch, np.zeros(arch.d)), grid_resolution=16)
    assert mesh.empty


def test_sphere_sdf_mesh_radii():
    res = 32
    g = lattice_grid(res)
    sdf = (np.linalg.norm(g, axis=1) - 0.5).reshape(res, res, res)
    mesh = extract_isosurface(sdf, 0.0)
    voxel = 2.0 / (res - 1)
    r = np.linalg.norm(mesh.vertices, axis=1)
    assert not mesh.empty
    assert np.max(np.abs(r - 0.5)) < 2 * voxel


def test_exports(tmp_path):
    write_image(tmp_path / "a.pgm", np.full((2, 3), 0.5))
    data = (tmp_path / "a.pgm").read_bytes()
    assert data.startswith(b"P5\n3 2\n255\n") and data[-6:] == bytes([128] * 6)
    write_image(tmp_path / "b.ppm", np.ones((2, 2, 3)) * 2.0)
    assert (tmp_path / "b.ppm").read_bytes().endswith(bytes([255] * 12))
    res = 16
    g = lattice_grid(res)
    mesh = extract_isosurface((np.linalg.norm(g, axis=1) - 0.5).reshape(res, res, res), 0.0)
    write_obj(tmp_path / "m.obj", mesh)
    lines = (tmp_path / "m.obj").read_text().splitlines()
    assert sum(l.startswith("v ") for l in lines) == len(mesh.vertices)
    assert sum(l.startswith("f ") for l in lines) == len(mesh.faces)


def test_psnr_identical_is_infinite():
    assert psnr(np.ones(3), np.ones(3)) == math.inf
