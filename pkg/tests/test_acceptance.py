"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

The lines are collected in ``RESULTS`` and echoed in the terminal summary
(see ``conftest.py``), so ``pytest tests/test_acceptance.py`` shows all ten
verdicts even when some fail.
"""

import time

import numpy as np

from weightforge import config as C
from weightforge.datasets import class_mean_signal
from weightforge.diffusion import TINY_DENOISER, DenoiserConfig, DiffusionConfig, ddim_sample, init_state, losses, train_epochs, train_step
from weightforge.encoder import EncoderConfig, EquivariantEncoder, nt_xent_loss, pretrain
from weightforge.fewshot import SupportSet, finetune, generate
from weightforge.inr import MlpArchitecture, WeightVector, forward, init_weights, preset, render_image, split_batch
from weightforge.metrics import chamfer, intra_diversity, mmd_cov_1nna, reconstruction_distance
from weightforge.symmetry import PermutationPlan, act, max_deviation, smooth, total_variation
from weightforge.tensor import Tensor

from oracles import brute_force_min_tv_single_hidden, central_difference, rel_err, set_metrics_brute

RESULTS: dict[int, str] = {}


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


# 1 -------------------------------------------------------------------------------------------
def test_c01_permutation_equivalence():
    t0 = time.time()
    worst = 0.0
    rng = np.random.default_rng(0)
    for i in range(500):
        arch = preset("mnist" if i % 2 == 0 else "shape")
        w = WeightVector(arch, init_weights(arch, rng))
        g = PermutationPlan.random(arch, rng)
        probes = rng.uniform(-1, 1, (1000, arch.coord_dim))
        worst = max(worst, max_deviation(w, act(g, w), probes))
    dt = time.time() - t0
    report(1, worst < 1e-9 and dt < 30, f"500 pairs, max deviation {worst:.2e} (< 1e-9), {dt:.1f}s (< 30s)")


# 2 -------------------------------------------------------------------------------------------
def test_c02_encoder_invariance():
    arch = preset("mnist")
    rng = np.random.default_rng(1)
    values = np.stack([init_weights(arch, rng) for _ in range(10)])
    enc = EquivariantEncoder(arch, seed=2)
    enc.fit_block_stats(values)
    base = enc.encode_values(values)
    worst = 0.0
    for _ in range(50):
        g = PermutationPlan.random(arch, rng)
        moved = np.stack([act(g, WeightVector(arch, v)).values for v in values])
        worst = max(worst, float(np.max(np.abs(enc.encode_values(moved) - base))))
    report(2, worst < 1e-6, f"50 permutations x 10 weights, max feature deviation {worst:.2e} (< 1e-6)")


# 3 -------------------------------------------------------------------------------------------
def test_c03_smoothing_optimality():
    arch = MlpArchitecture(2, (6,), 1, "sine")
    hits, never_up, idem = 0, True, True
    for seed in range(100):
        rng = np.random.default_rng(seed)
        w = WeightVector(arch, init_weights(arch, rng) + 0.1 * rng.normal(size=arch.d))
        (W1, b1), (W2, _) = w.layers()
        best = brute_force_min_tv_single_hidden(W1, b1, W2)
        w_bar, _ = smooth(w, seed=seed)
        tv = total_variation(w_bar)
        hits += tv <= 1.05 * best
        never_up &= tv <= total_variation(w) + 1e-12
        idem &= abs(total_variation(smooth(w_bar, seed=seed)[0]) - tv) < 1e-12
    ok = hits >= 95 and never_up and idem
    report(3, ok, f"{hits}/100 within 5% of the 720-permutation optimum (>= 95); never increases={never_up}; idempotent={idem}")


# 4 -------------------------------------------------------------------------------------------
def _fd_worst(loss_fn, params, per_param=6):
    worst = 0.0
    for p in params:
        for idx in list(np.ndindex(p.shape))[:per_param]:
            fd = central_difference(lambda: loss_fn().item(), p.data, idx)
            worst = max(worst, rel_err(p.grad[idx], fd, floor=1e-7))
    return worst


def test_c04_gradient_correctness():
    rng = np.random.default_rng(0)
    # MLP fit loss
    arch = MlpArchitecture(2, (4, 4), 1, "sine", omega0=10.0)
    flat = Tensor(init_weights(arch, rng)[None], requires_grad=True)
    coords = rng.uniform(-1, 1, (12, 2))
    target = rng.uniform(0, 1, (1, 12, 1))

    def fit_loss():
        diff = forward(split_batch(flat, arch), coords, arch) - target
        return (diff * diff).mean()

    fit_loss().backward()
    fit_err = _fd_worst(fit_loss, [flat], per_param=arch.d)
    # NT-Xent through the encoder
    small = MlpArchitecture(2, (3,), 1)
    enc = EquivariantEncoder(small, EncoderConfig(num_layers=1, channels=2, head_hidden=4, feature_dim=3), seed=0)
    x = np.stack([init_weights(small, rng) for _ in range(4)])
    enc.set_trainable(True)

    def con_loss():
        return nt_xent_loss(enc(x), 0.5)

    con_loss().backward()
    con_err = _fd_worst(con_loss, list(enc.named_parameters().values()))
    # denoiser with reconstruction plus equivariance terms
    enc2 = EquivariantEncoder(small, EncoderConfig(num_layers=1, channels=2, head_hidden=6, feature_dim=4), seed=1)
    w = np.stack([init_weights(small, rng) for _ in range(3)])
    enc2.fit_block_stats(w)
    psi = enc2.encode_values(w)
    cfg = DiffusionConfig(T=100, lam=0.5, denoiser=DenoiserConfig(1, 2, 4, 1, 4))
    state = init_state(small, enc2, w, cfg, seed=0)
    t, eps = np.array([3, 40, 90]), rng.normal(size=w.shape)

    def den_loss():
        return losses(state, w, psi, t, eps)[0]

    den_loss().backward()
    den_err = _fd_worst(den_loss, state.denoiser.parameters(), per_param=4)
    worst = max(fit_err, con_err, den_err)
    report(4, worst < 1e-4, f"max relative error fit={fit_err:.1e} nt-xent={con_err:.1e} denoiser={den_err:.1e} (< 1e-4)")


# 5 -------------------------------------------------------------------------------------------
def test_c05_nt_xent_closed_form():
    e1, e2 = np.eye(2)
    loss = nt_xent_loss(np.stack([e1, e2, e1, e2]), tau=1.0).item()
    expected = -np.log(np.e / (np.e + 2))
    report(5, abs(loss - expected) < 1e-6, f"loss {loss:.9f} vs -log(e/(e+2)) = {expected:.9f} (tol 1e-6)")


# 6 -------------------------------------------------------------------------------------------
def test_c06_diffusion_memorisation():
    t0 = time.time()
    arch = preset("tiny2d")
    w = init_weights(arch, np.random.default_rng(0))[None]
    enc = EquivariantEncoder(arch, seed=0)
    enc.fit_block_stats(w)
    psi = enc.encode_values(w)
    state = init_state(arch, enc, w, DiffusionConfig(lr=1e-3, lam=0.1, denoiser=TINY_DENOISER), seed=0)
    rng = np.random.default_rng(0)
    for _ in range(500):
        train_step(state, w, psi, rng)
    s = ddim_sample(state, psi[0], num_steps=50, eta=0.0, seed=0)
    err = float(np.linalg.norm(s.values - w[0]) / np.linalg.norm(w[0]))
    dt = time.time() - t0
    report(6, err < 0.1 and dt < 300, f"relative L2 error {err:.4f} (< 0.1), {dt:.1f}s (< 300s)")


# 7 -------------------------------------------------------------------------------------------
def test_c07_few_shot_pipeline(desk_weights):
    t0 = time.time()
    cfg = C.desk_profile()
    e = cfg.encoder
    seen = desk_weights[0] + desk_weights[1]
    enc = pretrain(
        seen, cfg.policy(), epochs=e.epochs, batch=e.batch, lr=e.lr, weight_decay=e.weight_decay, tau=e.tau,
        config=cfg.encoder_config(), seed=cfg.seed, restarts=e.restarts,
    ).encoder
    values = np.stack([smooth(w, e.restarts, cfg.seed)[0].values for w in seen])
    dcfg = cfg.diffusion_config()
    state = init_state(seen[0].arch, enc, values, dcfg, seed=cfg.seed)
    train_epochs(state, values, enc.encode_values(values), dcfg.epochs, dcfg, seed=cfg.seed)
    support = SupportSet.build(desk_weights[2][: cfg.fewshot.k], enc, e.restarts, cfg.seed)
    finetune(state, support, cfg.fewshot.epochs, dcfg, seed=cfg.seed)

    res = cfg.dataset.resolution
    means = [class_mean_signal("blobs2d", c, 3, resolution=res) for c in range(3)]
    finite, dists, div = True, [], {0.0: [], 0.6: []}
    for gamma in div:
        for seed in range(3):
            ws = generate(state, support, cfg.fewshot.n, gamma, seed, dcfg.ddim_steps, dcfg.eta)
            imgs = [render_image(w, res) for w in ws]
            finite &= all(np.all(np.isfinite(im)) for im in imgs)
            dists += [[reconstruction_distance(w, m) for m in means] for w in ws]
            div[gamma].append(intra_diversity(imgs))
    d = np.mean(dists, axis=0)
    consistent = d[2] < d[0] and d[2] < d[1]
    trade = all(hi > lo for lo, hi in zip(div[0.0], div[0.6]))
    dt = time.time() - t0
    ok = finite and consistent and trade and dt < 1800
    report(
        7, ok,
        f"(a) finite={finite}; (b) distance to class means seen0={d[0]:.3f} seen1={d[1]:.3f} unseen={d[2]:.3f}; "
        f"(c) diversity gamma=0 {np.round(div[0.0], 3).tolist()} vs gamma=0.6 {np.round(div[0.6], 3).tolist()}; {dt:.0f}s",
    )


# 8 -------------------------------------------------------------------------------------------
def test_c08_metric_oracles():
    exact = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        clouds = lambda n: [rng.integers(0, 3, size=(rng.integers(1, 4), 2)).astype(float) for _ in range(n)]
        gen, ref = clouds(rng.integers(1, 6)), clouds(rng.integers(1, 6))
        exact += mmd_cov_1nna(gen, ref) == set_metrics_brute(gen, ref)
    rng = np.random.default_rng(99)
    same = [rng.normal(size=(5, 3)) for _ in range(4)]
    nna = mmd_cov_1nna(same, [c.copy() for c in same])[2]
    hand = (
        chamfer([[0.0, 0.0]], [[3.0, 4.0]]) == 50.0
        and chamfer([[0.0]], [[0.0], [2.0]]) == 2.0
        and chamfer([[1.0, 1.0]], [[1.0, 1.0]]) == 0.0
    )
    report(8, exact == 20 and nna == 50.0 and hand, f"{exact}/20 exact oracle matches; identical-list 1-NNA={nna}; chamfer hand cases={hand}")


# 9 -------------------------------------------------------------------------------------------
def test_c09_smoothed_pretraining_trend(desk_weights):
    cfg = C.desk_profile()
    e = cfg.encoder
    seen = desk_weights[0] + desk_weights[1]
    diffs = []
    for seed in range(3):
        final = {}
        for smoothing in (True, False):
            h = pretrain(
                seen, cfg.policy(), epochs=e.epochs, batch=e.batch, lr=e.lr, weight_decay=e.weight_decay, tau=e.tau,
                config=cfg.encoder_config(), seed=seed, use_smoothing=smoothing, restarts=e.restarts,
            ).loss_history
            final[smoothing] = h[-1]
        diffs.append(final[True] - final[False])
    ok = all(d <= 1e-3 for d in diffs)
    report(9, ok, f"final loss (smoothed - raw) per seed {np.round(diffs, 4).tolist()} (each <= 1e-3)")


# 10 ------------------------------------------------------------------------------------------
def test_c10_cli_reproducibility(tmp_path):
    from test_cli import run_pipeline, small_config

    cfg_path = tmp_path / "run.toml"
    C.save_config(cfg_path, small_config())
    runs = []
    for name in ("a", "b"):
        (tmp_path / name).mkdir()
        runs.append({p.relative_to(tmp_path / name): p.read_bytes() for p in run_pipeline(tmp_path / name, cfg_path)})
    same_set = runs[0].keys() == runs[1].keys()
    differing = [str(k) for k in runs[0] if runs[0][k] != runs[1].get(k)]
    ok = same_set and not differing and len(runs[0]) > 0
    report(10, ok, f"{len(runs[0])} artifacts across all stages, byte-identical={not differing}" + (f" differing={differing}" if differing else ""))
