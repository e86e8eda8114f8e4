"""Run every CLI stage on the desk profile: fit, pretrain, train, adapt, generate, evaluate.

Classes 0 and 1 are seen during training; class 2 plays the unseen class.

    python scripts/run_pipeline.py --out runs/desk
"""

import argparse
import sys
from pathlib import Path

from weightforge import config as C
from weightforge.cli import main


def run(argv):
    print("$ weightforge " + " ".join(argv), flush=True)
    if main(argv) != 0:
        sys.exit(f"stage failed: {argv[0]}")


def parse():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/desk")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--gamma", type=float)
    return p.parse_args()


if __name__ == "__main__":
    args = parse()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = C.desk_profile()
    cfg.seed = args.seed
    conf = str(out / "run.toml")
    C.save_config(conf, cfg)
    d = str(out)
    run(["make-dataset", "--config", conf, "--jobs", str(args.jobs), "--out", f"{d}/data"])
    run(["pretrain-encoder", "--config", conf, "--data", f"{d}/data", "--classes", "0,1", "--out", f"{d}/encoder.wfg"])
    run(["train-diffusion", "--config", conf, "--data", f"{d}/data", "--classes", "0,1",
         "--encoder", f"{d}/encoder.wfg", "--out", f"{d}/diffusion.wfg"])
    run(["finetune", "--diffusion", f"{d}/diffusion.wfg", "--support", f"{d}/data", "--support-class", "2",
         "--out", f"{d}/finetuned.wfg"])
    gen = ["generate", "--diffusion", f"{d}/finetuned.wfg", "--support", f"{d}/data", "--support-class", "2",
           "--render", "--resolution", "32", "--out", f"{d}/generated"]
    if args.gamma is not None:
        gen += ["--gamma", str(args.gamma)]
    run(gen)
    run(["evaluate", "--generated", f"{d}/generated", "--reference", f"{d}/data", "--reference-class", "2",
         "--mode", "2d", "--resolution", "16", "--out", f"{d}/report.txt"])
