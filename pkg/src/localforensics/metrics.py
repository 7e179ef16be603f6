"""Binary-classification curves and segmentation scores."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np


def _sweep(scores: np.ndarray, labels: np.ndarray):
    """Cumulative TP/FP counts for thresholds at each distinct score,
    highest first, predicting positive when score >= threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(y)[last]
    fp = np.cumsum(~y)[last]
    return s[last], tp, fp


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(thresholds, fpr, tpr), starting from the (0, 0) point at +inf."""
    thr, tp, fp = _sweep(scores, labels)
    pos = max(int(np.sum(labels)), 1)
    neg = max(len(labels) - int(np.sum(labels)), 1)
    return np.r_[np.inf, thr], np.r_[0.0, fp / neg], np.r_[0.0, tp / pos]


def pr_curve(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(thresholds, precision, recall) at each distinct score."""
    thr, tp, fp = _sweep(scores, labels)
    pos = max(int(np.sum(labels)), 1)
    return thr, tp / (tp + fp), tp / pos


def auc_trapezoid(x, y) -> float:
    x, y = np.asarray(x, float), np.asarray(y, float)
    return float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2.0))


@dataclass
class SegScores:
    pixel_accuracy: float
    iou: float
    tp: int
    fp: int
    fn: int
    tn: int


@dataclass
class Metrics:
    accuracy: float
    tp: int
    fp: int
    tn: int
    fn: int
    auc: float
    threshold: float
    n: int
    roc: tuple = field(repr=False, default=())
    pr: tuple = field(repr=False, default=())
    seg: list[SegScores] = field(default_factory=list)

    def summary(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k not in ("roc", "pr", "seg")}
        d["seg"] = [asdict(s) for s in self.seg]
        return d

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(json.dumps(self.summary(), indent=2))
        with open(out / "pr.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "precision", "recall"])
            w.writerows(zip(*[np.asarray(a).tolist() for a in self.pr]))
        with open(out / "roc.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "fpr", "tpr"])
            w.writerows(zip(*[np.asarray(a).tolist() for a in self.roc]))


def classification_metrics(scores, labels, threshold: float = 0.5) -> Metrics:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    pred = scores >= threshold
    pos = labels == 1
    tp = int(np.sum(pred & pos))
    fp = int(np.sum(pred & ~pos))
    tn = int(np.sum(~pred & ~pos))
    fn = int(np.sum(~pred & pos))
    roc = roc_curve(scores, labels)
    auc = auc_trapezoid(roc[1], roc[2]) if 0 < pos.sum() < len(labels) else float("nan")
    return Metrics(
        accuracy=(tp + tn) / max(len(labels), 1),
        tp=tp, fp=fp, tn=tn, fn=fn, auc=auc, threshold=threshold, n=len(labels),
        roc=roc, pr=pr_curve(scores, labels),
    )


class SegAccumulator:
    def __init__(self):
        self.tp = self.fp = self.fn = self.tn = 0

    def update(self, pred: np.ndarray, target: np.ndarray) -> None:
        p, t = np.asarray(pred).astype(bool), np.asarray(target).astype(bool)
        self.tp += int(np.sum(p & t))
        self.fp += int(np.sum(p & ~t))
        self.fn += int(np.sum(~p & t))
        self.tn += int(np.sum(~p & ~t))

    def result(self) -> SegScores:
        total = self.tp + self.fp + self.fn + self.tn
        union = self.tp + self.fp + self.fn
        return SegScores(
            pixel_accuracy=(self.tp + self.tn) / total if total else float("nan"),
            iou=self.tp / union if union else 1.0,
            tp=self.tp, fp=self.fp, fn=self.fn, tn=self.tn,
        )
