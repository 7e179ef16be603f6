"""Lambda ablation on the synthetic benchmark plus a variable-size sweep.

    python scripts/learnability.py --profile ci --out runs/ci
    python scripts/learnability.py --profile full --out runs/full   # hours on one core

Writes results.csv (one row per lambda/seed), sizes.csv (per-size accuracy in
both prediction modes, for the lambda=0.5 seed-0 model) and summary.json.
"""

from __future__ import annotations

import argparse
import json
import logging
import time
from pathlib import Path

import numpy as np

from localforensics.dataio import SynthParams, preload, select_objectives
from localforensics.experiments import PROFILES, ablation_means, cached_synth, run_ablation, size_sweep, synth_splits
from localforensics.model import load_checkpoint
from localforensics.trainer import TrainConfig


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--profile", choices=sorted(PROFILES), default="ci")
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--data", type=Path, help="synthetic data cache (default: <out>/data)")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--lambdas", default="0.0,0.5")
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--data-seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    prof = PROFILES[args.profile]
    data = args.data or args.out / "data"
    args.out.mkdir(parents=True, exist_ok=True)
    tr, va, te = synth_splits(data, prof.size, prof.counts, seed=args.data_seed, emit_clean=False)

    lambdas = [float(v) for v in args.lambdas.split(",")]
    t0 = time.perf_counter()
    rows = run_ablation(tr, va, te, prof.arch, TrainConfig(epochs=args.epochs), lambdas,
                        list(range(args.seeds)), "fake", args.out)
    train_seconds = time.perf_counter() - t0
    means = ablation_means(rows)

    model = load_checkpoint(args.out / f"lam{max(lambdas):g}_seed0" / "best")
    sweep_params = SynthParams(count=250, size=prof.sweep_image_size, seed=100 + args.data_seed, emit_clean=False)
    sweep = preload(select_objectives(cached_synth(data / "sweep", sweep_params), ["fake"]))
    sizes = size_sweep(model, sweep, list(prof.sweep_sizes), out_csv=args.out / "sizes.csv")

    summary = {
        "profile": args.profile,
        "train_seconds": train_seconds,
        "min_accuracy": {str(l): min(r.accuracy for r in rows if r.lam == l) for l in lambdas},
        "means": {str(k): v for k, v in means.items()},
        "max_epochs_run": max(r.epochs_run for r in rows),
        "sizes": sizes,
        "mean_accuracy_gap": float(np.subtract(means[max(lambdas)]["accuracy"], means[min(lambdas)]["accuracy"])),
    }
    (args.out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
