"""``weightforge`` command line: dataset fitting, training stages, generation, evaluation."""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import config as cfgmod
from .datasets import KINDS, item_seeds, make_signal
from .diffusion import init_state, train_epochs
from .encoder import pretrain
from .fewshot import SupportSet, finetune, generate
from .inr import (
    PRESETS,
    WeightVector,
    evaluate,
    fit_many,
    preset,
    psnr,
    render_image,
    render_mesh,
    write_image,
    write_obj,
)
from .metrics import CHAMFER_REPORT_SCALE, intra_diversity, mmd_cov_1nna, sample_surface_points, write_report
from .symmetry import PermutationPlan, act, max_deviation, smooth, total_variation

MANIFEST = "manifest.tsv"
MANIFEST_HEADER = "path\tclass\tpsnr\tseed\tflag"
FIT_CHUNK = 16


class CliError(ValueError):
    pass


# -- helpers ---------------------------------------------------------------------------
def _config(args) -> cfgmod.RunConfig:
    cfg = cfgmod.load_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _classes(text: str | None) -> set[str] | None:
    return None if not text else {c.strip() for c in text.split(",") if c.strip()}


def read_manifest(directory) -> list[dict]:
    path = Path(directory) / MANIFEST
    if not path.exists():
        raise CliError(f"{directory} has no {MANIFEST}")
    lines = path.read_text().splitlines()
    if not lines or lines[0] != MANIFEST_HEADER:
        raise CliError(f"{path}: unexpected header")
    keys = MANIFEST_HEADER.split("\t")
    return [dict(zip(keys, line.split("\t"))) for line in lines[1:] if line]


def write_manifest(directory, rows: list[dict]) -> None:
    keys = MANIFEST_HEADER.split("\t")
    body = [MANIFEST_HEADER] + ["\t".join(str(r[k]) for k in keys) for r in rows]
    (Path(directory) / MANIFEST).write_text("\n".join(body) + "\n")


def load_weight_dir(directory, classes: set[str] | None = None, limit: int | None = None, include_flagged=False):
    """Weights listed in a directory's manifest (or every ``*.wfg`` when there is none)."""
    directory = Path(directory)
    if (directory / MANIFEST).exists():
        rows = read_manifest(directory)
        rows = [r for r in rows if include_flagged or r["flag"] == "ok"]
        if classes is not None:
            rows = [r for r in rows if r["class"] in classes]
        paths = [directory / r["path"] for r in rows]
    else:
        paths = sorted(directory.glob("*.wfg"))
    if limit is not None:
        paths = paths[:limit]
    if not paths:
        raise CliError(f"no weights selected from {directory}")
    return [ckpt.load_weights(p) for p in paths]


def _fit_chunk(job):
    signals, arch_name, steps, lr, seeds = job
    res = fit_many(signals, preset(arch_name), steps, lr, seeds)
    return [w.values for w in res.weights], res.final_mse.tolist(), res.diverged


# -- commands ---------------------------------------------------------------------------
def cmd_make_dataset(args) -> int:
    cfg = _config(args)
    ds = cfg.dataset
    kind = args.kind or ds.kind
    arch_name = args.arch or cfg.arch
    arch = preset(arch_name)
    n_cls = args.classes if args.classes is not None else ds.classes
    per = args.per_class if args.per_class is not None else ds.per_class
    if n_cls < 1 or per < 1:
        raise CliError("--classes and --per-class must be >= 1")
    res = args.resolution or ds.resolution
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    items = []
    for c in range(n_cls):
        for j in range(per):
            sig_seed, init_seed = item_seeds(cfg.seed, c, j, ds.shared_init)
            sig = make_signal(kind, c, n_cls, np.random.default_rng(sig_seed), res)
            if sig.targets.shape[1] != arch.out_dim or sig.coords.shape[1] != arch.coord_dim:
                raise CliError(f"dataset kind {kind} does not match arch {arch_name}")
            items.append((c, j, sig, init_seed))
    steps = args.steps or ds.fit_steps
    jobs = [
        ([it[2] for it in items[i : i + FIT_CHUNK]], arch_name, steps, ds.fit_lr, [it[3] for it in items[i : i + FIT_CHUNK]])
        for i in range(0, len(items), FIT_CHUNK)
    ]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_fit_chunk, jobs))
    else:
        results = [_fit_chunk(j) for j in jobs]
    values = [v for r in results for v in r[0]]
    diverged = [d for r in results for d in r[2]]
    rows, flagged = [], 0
    for (c, j, sig, seed), v, div in zip(items, values, diverged):
        w = WeightVector(arch, v, "raw", str(c))
        if div is not None or not np.all(np.isfinite(v)):
            quality, flag = float("nan"), "diverged"
        else:
            quality = psnr(evaluate(w, sig.coords), sig.targets)
            flag = "ok" if quality >= ds.psnr_gate else "low_psnr"
        flagged += flag != "ok"
        rel = f"class{c}/item{j:03d}.wfg"
        (out / rel).parent.mkdir(exist_ok=True)
        ckpt.save_weights(out / rel, w, {"seed": seed, "psnr": quality, "kind": kind})
        if flag == "diverged":
            print(f"make-dataset: fit diverged for {rel}", file=sys.stderr)
        rows.append({"path": rel, "class": c, "psnr": f"{quality:.4f}", "seed": seed, "flag": flag})
    write_manifest(out, rows)
    print(f"make-dataset: kind={kind} arch={arch_name} items={len(rows)} flagged={flagged} out={out}")
    return 0


def cmd_pretrain_encoder(args) -> int:
    cfg = _config(args)
    data = load_weight_dir(args.data, _classes(args.classes))
    e = cfg.encoder
    smoothing = e.smoothing and not args.no_smoothing
    res = pretrain(
        data, cfg.policy(), epochs=args.epochs if args.epochs is not None else e.epochs, batch=e.batch, lr=e.lr,
        weight_decay=e.weight_decay, tau=e.tau, config=cfg.encoder_config(), seed=cfg.seed,
        use_smoothing=smoothing, restarts=e.restarts,
    )
    sections_extra = {"seed": cfg.seed, "smoothing": smoothing, "n_train": len(data)}
    ckpt.save_encoder(args.out, res.encoder, sections_extra, cfgmod.dumps(cfg))
    final = res.loss_history[-1] if res.loss_history else float("nan")
    print(f"pretrain-encoder: items={len(data)} epochs={len(res.loss_history)} final_loss={final:.6f} out={args.out}")
    return 0


def cmd_train_diffusion(args) -> int:
    cfg = _config(args)
    data = load_weight_dir(args.data, _classes(args.classes))
    enc = ckpt.load_encoder(args.encoder)
    if enc.arch != data[0].arch:
        raise CliError("encoder architecture differs from the dataset's")
    restarts = cfg.encoder.restarts
    values = np.stack([smooth(w, restarts, cfg.seed)[0].values for w in data])
    psis = enc.encode_values(values)
    dcfg = cfg.diffusion_config()
    state = init_state(data[0].arch, enc, values, dcfg, seed=cfg.seed)
    epochs = args.epochs if args.epochs is not None else dcfg.epochs
    train_epochs(state, values, psis, epochs, dcfg, seed=cfg.seed)
    ckpt.save_diffusion(args.out, state, cfgmod.dumps(cfg))
    last = state.history[-1] if state.history else {"recon": float("nan"), "eq": float("nan")}
    print(f"train-diffusion: items={len(data)} steps={state.step} recon={last['recon']:.6f} eq={last['eq']:.6f} out={args.out}")
    return 0


def _support(args, state, cfg) -> SupportSet:
    k = args.k if args.k is not None else cfg.fewshot.k
    ws = load_weight_dir(args.support, _classes(args.support_class), limit=k)
    return SupportSet.build(ws, state.encoder, cfg.encoder.restarts, cfg.seed)


def _stored_config(args, path) -> cfgmod.RunConfig:
    """Config echoed in a checkpoint, unless ``--config`` is given."""
    if getattr(args, "config", None):
        return _config(args)
    text = ckpt.checkpoint_config_text(path)
    cfg = cfgmod.apply_env(cfgmod.loads(text) if text else cfgmod.RunConfig())
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def cmd_finetune(args) -> int:
    state = ckpt.load_diffusion(args.diffusion)
    cfg = _stored_config(args, args.diffusion)
    support = _support(args, state, cfg)
    epochs = args.epochs if args.epochs is not None else cfg.fewshot.epochs
    before = state.step
    finetune(state, support, epochs, cfg.diffusion_config(), seed=cfg.seed)
    ckpt.save_diffusion(args.out, state, cfgmod.dumps(cfg), {"finetuned_k": support.k})
    last = state.history[-1]["recon"] if state.step > before else float("nan")
    print(f"finetune: k={support.k} epochs={epochs} steps={state.step - before} recon={last:.6f} out={args.out}")
    return 0


def cmd_generate(args) -> int:
    state = ckpt.load_diffusion(args.diffusion)
    cfg = _stored_config(args, args.diffusion)
    support = _support(args, state, cfg)
    gamma = args.gamma if args.gamma is not None else cfg.fewshot.gamma
    n = args.n if args.n is not None else cfg.fewshot.n
    steps = args.steps or cfg.diffusion.ddim_steps
    ws = generate(state, support, n, gamma, cfg.seed, steps, cfg.diffusion.eta)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    bad = 0
    for i, w in enumerate(ws):
        name = f"gen{i:03d}.wfg"
        finite = bool(np.all(np.isfinite(w.values)))
        bad += not finite
        ckpt.save_weights(out / name, w, {"seed": cfg.seed, "gamma": gamma, "index": i})
        rows.append({"path": name, "class": "generated", "psnr": "nan", "seed": cfg.seed, "flag": "ok" if finite else "nonfinite"})
        if args.render and finite:
            if w.arch.coord_dim == 2:
                write_image(out / f"gen{i:03d}.{'ppm' if w.arch.out_dim == 3 else 'pgm'}", render_image(w, args.resolution))
            else:
                write_obj(out / f"gen{i:03d}.obj", render_mesh(w, args.resolution))
    write_manifest(out, rows)
    print(f"generate: n={n} gamma={gamma} seed={cfg.seed} nonfinite={bad} out={out}")
    return 0


def cmd_evaluate(args) -> int:
    gen = load_weight_dir(args.generated)
    ref = load_weight_dir(args.reference, _classes(args.reference_class))
    report: dict = {"mode": args.mode, "n_generated": len(gen), "n_reference": len(ref)}
    if args.mode == "2d":
        res = args.resolution
        g_img = [render_image(w, res) for w in gen]
        r_img = [render_image(w, res) for w in ref]
        ref_mean = np.mean(r_img, axis=0)
        report["nonfinite"] = int(sum(not np.all(np.isfinite(im)) for im in g_img))
        report["recon_to_reference_mean"] = float(np.mean([np.sqrt(np.mean((im - ref_mean) ** 2)) for im in g_img]))
        nearest = [min(np.sqrt(np.mean((im - r) ** 2)) for r in r_img) for im in g_img]
        report["nearest_reference_rms"] = float(np.mean(nearest))
        if len(g_img) >= 2:
            report["intra_diversity"] = intra_diversity(g_img)
        report["note"] = "diversity is mean pairwise pixel RMS; no perceptual or FID metric is computed"
    else:
        res = args.resolution
        def clouds(ws):
            out = []
            for i, w in enumerate(ws):
                mesh = render_mesh(w, res)
                if not mesh.empty:
                    out.append(sample_surface_points(mesh, args.points, args.seed + i))
            return out
        g_pts, r_pts = clouds(gen), clouds(ref)
        report["empty_generated"] = len(gen) - len(g_pts)
        report["empty_reference"] = len(ref) - len(r_pts)
        if g_pts and r_pts:
            mmd, cov, nna = mmd_cov_1nna(g_pts, r_pts)
            report["mmd_cd_x100"] = mmd * CHAMFER_REPORT_SCALE
            report["cov_percent"] = cov
            report["one_nna_percent"] = nna
        report["points_per_shape"] = args.points
    write_report(args.out, report)
    shown = " ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in report.items() if k != "note")
    print(f"evaluate: {shown}")
    return 0


def _probe(arch, n=400, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(-1, 1, size=(n, arch.coord_dim))


def cmd_smooth(args) -> int:
    w = ckpt.load_weights(args.weights)
    s, plan = smooth(w, args.restarts, args.seed or 0)
    ckpt.save_weights(args.out, s)
    dev = max_deviation(w, s, _probe(w.arch))
    print(f"smooth: tv_before={total_variation(w):.6f} tv_after={total_variation(s):.6f} max_deviation={dev:.3e} out={args.out}")
    return 0


def cmd_equicheck(args) -> int:
    w = ckpt.load_weights(args.weights)
    if args.other:
        other = ckpt.load_weights(args.other)
    else:
        other = act(PermutationPlan.random(w.arch, np.random.default_rng(args.seed or 0)), w)
    dev = max_deviation(w, other, _probe(w.arch))
    ok = dev <= args.tol
    print(f"equicheck: max_deviation={dev:.3e} tol={args.tol:.1e} equivalent={'true' if ok else 'false'}")
    return 0 if ok else 1


def cmd_write_config(args) -> int:
    cfg = cfgmod.desk_profile() if args.profile == "desk" else cfgmod.RunConfig()
    cfgmod.save_config(args.out, cfg)
    print(f"write-config: profile={args.profile} out={args.out}")
    return 0


# -- parser -------------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="weightforge", description="Few-shot INR weight generation pipeline.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-dataset", help="fit INRs to procedural signals")
    s.add_argument("--classes", type=int)
    s.add_argument("--per-class", type=int)
    s.add_argument("--kind", choices=KINDS)
    s.add_argument("--arch", choices=sorted(PRESETS))
    s.add_argument("--resolution", type=int)
    s.add_argument("--steps", type=int, help="fit steps per INR")
    s.add_argument("--seed", type=int)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_make_dataset)

    s = sub.add_parser("pretrain-encoder", help="contrastive pre-training of the equivariant encoder")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--classes", help="comma-separated class labels to train on")
    s.add_argument("--epochs", type=int)
    s.add_argument("--no-smoothing", action="store_true")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pretrain_encoder)

    s = sub.add_parser("train-diffusion", help="train the feature-conditioned diffusion model")
    s.add_argument("--data", required=True)
    s.add_argument("--encoder", required=True)
    s.add_argument("--config")
    s.add_argument("--classes")
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train_diffusion)

    def support_args(s):
        s.add_argument("--support", required=True)
        s.add_argument("--support-class", help="class label to take from a manifest directory")
        s.add_argument("--k", type=int, help="number of support weights")

    s = sub.add_parser("finetune", help="adapt a diffusion checkpoint to a support set")
    s.add_argument("--diffusion", required=True)
    support_args(s)
    s.add_argument("--epochs", type=int)
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("generate", help="sample new weights conditioned on disturbed support features")
    s.add_argument("--diffusion", required=True)
    support_args(s)
    s.add_argument("--n", type=int)
    s.add_argument("--gamma", type=float)
    s.add_argument("--steps", type=int, help="DDIM steps")
    s.add_argument("--seed", type=int)
    s.add_argument("--config")
    s.add_argument("--render", action="store_true")
    s.add_argument("--resolution", type=int, default=32)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("evaluate", help="score generated weights against references")
    s.add_argument("--generated", required=True)
    s.add_argument("--reference", required=True)
    s.add_argument("--reference-class")
    s.add_argument("--mode", choices=("2d", "3d"), required=True)
    s.add_argument("--resolution", type=int, default=32)
    s.add_argument("--points", type=int, default=2048)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("smooth", help="reorder hidden neurons to reduce total variation")
    s.add_argument("--weights", required=True)
    s.add_argument("--restarts", type=int, default=5)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_smooth)

    s = sub.add_parser("equicheck", help="compare two weight files (or a file and a random permutation of it)")
    s.add_argument("--weights", required=True)
    s.add_argument("--other")
    s.add_argument("--seed", type=int)
    s.add_argument("--tol", type=float, default=1e-9)
    s.set_defaults(func=cmd_equicheck)

    s = sub.add_parser("write-config", help="write a config file with all defaults")
    s.add_argument("--profile", choices=("full", "desk"), default="full")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_write_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, IOError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
