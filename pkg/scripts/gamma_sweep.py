"""Diversity and class consistency of generated samples across disturbance strengths.

Needs a fine-tuned checkpoint and its dataset, e.g. from ``run_pipeline.py``:

    python scripts/gamma_sweep.py --run runs/desk --gammas 0 0.15 0.3 0.6 --seeds 3
"""

import argparse

import numpy as np

from weightforge import checkpoint as ckpt
from weightforge.cli import load_weight_dir
from weightforge.datasets import class_mean_signal
from weightforge.fewshot import SupportSet, generate
from weightforge.inr import render_image
from weightforge.metrics import intra_diversity, reconstruction_distance


def parse():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--run", default="runs/desk")
    p.add_argument("--support-class", default="2")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--gammas", type=float, nargs="+", default=[0.0, 0.15, 0.3, 0.6])
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--classes", type=int, default=3, help="number of classes in the dataset")
    p.add_argument("--resolution", type=int, default=16)
    return p.parse_args()


if __name__ == "__main__":
    args = parse()
    state = ckpt.load_diffusion(f"{args.run}/finetuned.wfg")
    support = SupportSet.build(load_weight_dir(f"{args.run}/data", {args.support_class}, limit=args.k), state.encoder)
    means = [class_mean_signal("blobs2d", c, args.classes, resolution=args.resolution) for c in range(args.classes)]
    print("gamma  diversity  " + "  ".join(f"dist_c{c}" for c in range(args.classes)))
    for gamma in args.gammas:
        divs, dists = [], []
        for seed in range(args.seeds):
            ws = generate(state, support, args.n, gamma, seed)
            divs.append(intra_diversity([render_image(w, args.resolution) for w in ws]))
            dists += [[reconstruction_distance(w, m) for m in means] for w in ws]
        d = np.mean(dists, axis=0)
        print(f"{gamma:5.2f}  {np.mean(divs):9.4f}  " + "  ".join(f"{x:7.4f}" for x in d))
