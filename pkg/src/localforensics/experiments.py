"""Lambda ablation and variable-input-size sweeps built on the trainer."""

from __future__ import annotations

import csv
import dataclasses
import logging
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import LoadedSet, Manifest, SynthParams, load_manifest, preload, select_objectives, synth_dataset
from .model import ArchConfig, Model
from .metrics import classification_metrics
from .trainer import PREDICT_MODES, TrainConfig, evaluate, score_set, train

log = logging.getLogger(__name__)


@dataclass
class AblationRow:
    lam: float
    seed: int
    accuracy: float
    auc: float
    iou: float
    best_epoch: int
    epochs_run: int


def run_ablation(
    train_m: Manifest,
    val_m: Manifest,
    test_m: Manifest,
    arch: ArchConfig,
    base: TrainConfig,
    lambdas: list[float],
    seeds: list[int],
    objective: str = "fake",
    out_dir=None,
) -> list[AblationRow]:
    """Train one model per (lambda_seg, seed) with a single segmentation
    objective and score it on the test set. lambda_seg = 0 keeps the seg head
    but gives it zero weight."""
    tr, va, te = (preload(select_objectives(m, [objective])) for m in (train_m, val_m, test_m))
    arch = dataclasses.replace(arch, num_seg_heads=1)
    rows = []
    for lam in lambdas:
        for seed in seeds:
            cfg = dataclasses.replace(base, lambda_cls=1.0 - lam, lambda_seg=[lam], seed=seed, objectives=None)
            run_dir = Path(out_dir) / f"lam{lam:g}_seed{seed}" if out_dir else None
            res = train(tr, va, arch, cfg, run_dir)
            m = evaluate(res.model, te, "classifier")
            row = AblationRow(lam, seed, m.accuracy, m.auc, m.seg[0].iou, res.best_epoch, len(res.history))
            log.info("ablation %s", row)
            rows.append(row)
    if out_dir:
        write_ablation_csv(rows, Path(out_dir) / "results.csv")
    return rows


def write_ablation_csv(rows: list[AblationRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda", "seed", "accuracy", "auc", "iou", "best_epoch", "epochs_run"])
        for r in rows:
            w.writerow([r.lam, r.seed, r.accuracy, r.auc, r.iou, r.best_epoch, r.epochs_run])


def ablation_means(rows: list[AblationRow]) -> dict[float, dict[str, float]]:
    out = {}
    for lam in sorted({r.lam for r in rows}):
        sel = [r for r in rows if r.lam == lam]
        out[lam] = {
            "accuracy": float(np.mean([r.accuracy for r in sel])),
            "auc": float(np.mean([r.auc for r in sel])),
            "iou": float(np.mean([r.iou for r in sel])),
            "n": len(sel),
        }
    return out


def size_sweep(model: Model, data: Manifest | LoadedSet, sizes: list[int], head: int = 0, out_csv=None) -> list[dict]:
    """Center-crop the test images to each size and score both prediction modes."""
    ds = preload(data) if isinstance(data, Manifest) else data
    rows = []
    for s in sizes:
        scores, labels = score_set(model, ds, PREDICT_MODES, head=head, crop_size=s)
        for mode in PREDICT_MODES:
            m = classification_metrics(scores[mode], labels)
            rows.append({"size": s, "mode": mode, "accuracy": m.accuracy, "auc": m.auc})
    if out_csv:
        with open(out_csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["size", "mode", "accuracy", "auc"])
            w.writeheader()
            w.writerows(rows)
    return rows


def cached_synth(directory, params: SynthParams) -> Manifest:
    """Reuse a synthetic set in ``directory`` if it was made with ``params``,
    otherwise (re)generate it."""
    d = Path(directory)
    if (d / "manifest.json").is_file():
        existing = load_manifest(d / "manifest.json")
        if existing.stats.get("params") == dataclasses.asdict(params):
            return existing
        shutil.rmtree(d)
    return synth_dataset(params, d)


def synth_splits(root, size: int, counts: tuple[int, int, int], seed: int = 0, **kw) -> tuple[Manifest, Manifest, Manifest]:
    """train/val/test sets with disjoint seeds; counts are totals, split evenly
    between classes."""
    root = Path(root)
    return tuple(
        cached_synth(root / name, SynthParams(count=n // 2, size=size, seed=seed * 10 + i, **kw))
        for i, (name, n) in enumerate(zip(("train", "val", "test"), counts))
    )


@dataclass(frozen=True)
class Profile:
    """Data and model scale for the learnability and size-sweep experiments."""

    name: str
    size: int
    arch: ArchConfig
    counts: tuple[int, int, int] = (2000, 500, 500)
    sweep_image_size: int = 160
    sweep_sizes: tuple[int, ...] = (33, 64, 96, 128, 160)


_HALF = tuple(c // 2 for c in ArchConfig().conv_channels)
PROFILES = {
    "full": Profile("full", 128, ArchConfig()),
    "ci": Profile("ci", 64, ArchConfig(input_size=64, conv_channels=_HALF)),
}

