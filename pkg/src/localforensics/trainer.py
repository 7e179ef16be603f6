"""Adam training on the joint objective, evaluation, and image-level
prediction from either the classifier head or a segmentation head."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataio import LoadedSet, Manifest, batch_iterator, preload, select_objectives
from .errors import ConfigError
from .metrics import Metrics, SegAccumulator, classification_metrics
from .model import ArchConfig, Model, build, forward, save_checkpoint
from .objective import LossWeights, cls_loss, extract_seg_labels, joint_loss, seg_loss, validate_weights
from .tensor import Tape, Tensor, backward, log_softmax

log = logging.getLogger(__name__)

PREDICT_MODES = ("classifier", "seg_mean")


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda_cls: float = 1.0
    lambda_seg: list[float] = field(default_factory=list)
    # manifest objectives bound to seg heads, in head order; None = all
    objectives: list[str] | None = None
    seed: int = 0
    crop: str = "center"
    checkpoint_every: int = 0
    patience: int = 5
    stop_on_perfect: bool = True
    eval_mode: str = "classifier"

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_cls, list(self.lambda_seg))

    def validate(self) -> None:
        validate_weights(self.weights)
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.eval_mode not in PREDICT_MODES:
            raise ConfigError(f"eval_mode must be one of {PREDICT_MODES}")


# --------------------------------------------------------------------- adam


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params, grads, state: AdamState, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """In-place bias-corrected Adam update; a missing gradient counts as zero."""
    state.t += 1
    t = state.t
    c1 = 1 - beta1 ** t
    c2 = 1 - beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data -= step.astype(p.data.dtype)


# --------------------------------------------------------------- prediction


def _prob_fake(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits.astype(np.float64), axis=1))[:, 1]


def predict_scores(model: Model, images: np.ndarray, mode: str = "classifier", head: int = 0) -> np.ndarray:
    """Fake probability for each image of an N x 3 x H x W batch (eval mode)."""
    if mode not in PREDICT_MODES:
        raise ValueError(f"mode must be one of {PREDICT_MODES}, got {mode!r}")
    out = forward(model, images, "eval")
    if mode == "classifier":
        return _prob_fake(out.image_logits.data)
    if not 0 <= head < len(out.seg_logits):
        raise ValueError(f"model has {len(out.seg_logits)} seg heads, asked for head {head}")
    return _prob_fake(out.seg_logits[head].data).reshape(images.shape[0], -1).mean(axis=1)


def predict_image(model: Model, image, mode: str = "classifier", head: int = 0) -> float:
    arr = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float32)
    return float(predict_scores(model, arr[None], mode, head)[0])


def score_set(
    model: Model,
    data: Manifest | LoadedSet,
    modes=PREDICT_MODES,
    head: int = 0,
    crop_size: int | None = None,
    batch_size: int = 64,
    seg_accumulators: list[SegAccumulator] | None = None,
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Fake scores for every requested mode from one eval pass over center
    crops; optionally accumulates per-head grid segmentation counts."""
    ds = preload(data) if isinstance(data, Manifest) else data
    for mode in modes:
        if mode not in PREDICT_MODES:
            raise ValueError(f"mode must be one of {PREDICT_MODES}, got {mode!r}")
    scores: dict[str, list] = {m: [] for m in modes}
    labels = []
    for b in batch_iterator(ds, batch_size, "center", crop_size):
        out = forward(model, b.images, "eval")
        if "classifier" in scores:
            scores["classifier"].append(_prob_fake(out.image_logits.data))
        if "seg_mean" in scores:
            if not 0 <= head < len(out.seg_logits):
                raise ValueError(f"model has {len(out.seg_logits)} seg heads, asked for head {head}")
            scores["seg_mean"].append(_prob_fake(out.seg_logits[head].data).reshape(len(b.labels), -1).mean(axis=1))
        labels.append(b.labels)
        for h, acc in enumerate(seg_accumulators or []):
            target = extract_seg_labels(b.masks[:, h], model.rf, out.grid)
            acc.update(out.seg_logits[h].data.argmax(axis=1), target)
    return {m: np.concatenate(v) for m, v in scores.items()}, np.concatenate(labels)


def evaluate(
    model: Model,
    data: Manifest | LoadedSet,
    mode: str = "classifier",
    threshold: float = 0.5,
    head: int = 0,
    crop_size: int | None = None,
    batch_size: int = 64,
) -> Metrics:
    """Image-level metrics on center crops, plus per-head grid segmentation
    scores when the data carries one mask per head."""
    ds = preload(data) if isinstance(data, Manifest) else data
    n_heads = model.config.num_seg_heads
    with_seg = ds.masks.shape[1] == n_heads and n_heads > 0
    accs = [SegAccumulator() for _ in range(n_heads if with_seg else 0)]
    scores, labels = score_set(model, ds, (mode,), head, crop_size, batch_size, accs)
    m = classification_metrics(scores[mode], labels, threshold)
    m.seg = [a.result() for a in accs]
    return m


# ----------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: Model
    history: list[dict]
    best_epoch: int
    best_val_accuracy: float
    checkpoint: Path | None = None


def _snapshot(model: Model) -> list[np.ndarray]:
    return [a.copy() for _, a in model.state_arrays()]


def _restore(model: Model, snap: list[np.ndarray]) -> None:
    for (_, a), s in zip(model.state_arrays(), snap):
        a[...] = s


def train(
    train_data: Manifest | LoadedSet,
    val_data: Manifest | LoadedSet,
    arch: ArchConfig,
    cfg: TrainConfig,
    out_dir=None,
) -> TrainResult:
    cfg.validate()
    if isinstance(train_data, Manifest) and cfg.objectives is not None:
        train_data = select_objectives(train_data, cfg.objectives)
    if isinstance(val_data, Manifest) and cfg.objectives is not None:
        val_data = select_objectives(val_data, cfg.objectives)
    tr = preload(train_data) if isinstance(train_data, Manifest) else train_data
    va = preload(val_data) if isinstance(val_data, Manifest) else val_data
    k = tr.masks.shape[1]
    if k != len(cfg.lambda_seg):
        raise ConfigError(f"train data has k={k} objectives but {len(cfg.lambda_seg)} segmentation weights")
    if arch.num_seg_heads != k:
        raise ConfigError(f"arch has {arch.num_seg_heads} seg heads, data has k={k}")
    if va.masks.shape[1] != k:
        raise ConfigError(f"val data has k={va.masks.shape[1]}, train has k={k}")

    out = Path(out_dir) if out_dir is not None else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "history.jsonl").write_text("")

    model = build(arch, cfg.seed)
    params = model.parameters()
    adam = AdamState.zeros_like(params)
    weights = cfg.weights
    history: list[dict] = []
    best_acc, best_epoch, best_snap, stale = -1.0, 0, None, 0

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        sums = np.zeros(2 + k)
        seen = 0
        for b in batch_iterator(tr, cfg.batch_size, cfg.crop, arch.input_size, shuffle_seed=cfg.seed * 100003 + epoch):
            model.zero_grad()
            with Tape() as tape:
                fo = forward(model, b.images, "train")
                lc = cls_loss(fo.image_logits, b.labels)
                ls = [seg_loss(fo.seg_logits[h], extract_seg_labels(b.masks[:, h], model.rf, fo.grid)) for h in range(k)]
                loss = joint_loss(weights, lc, ls)
            backward(loss, tape)
            adam_step(params, [p.grad for p in params], adam, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
            n = len(b.labels)
            sums += n * np.array([loss.item(), lc.item()] + [s.item() for s in ls])
            seen += n
        val = evaluate(model, va, cfg.eval_mode)
        mean = sums / seen
        rec = {
            "epoch": epoch,
            "loss": float(mean[0]),
            "loss_cls": float(mean[1]),
            "loss_seg": [float(v) for v in mean[2:]],
            "val_accuracy": val.accuracy,
            "val_auc": val.auc,
            "val_seg_iou": [s.iou for s in val.seg],
        }
        history.append(rec)
        log.info("epoch %d loss %.4f val_acc %.4f (%.1fs)", epoch, rec["loss"], val.accuracy, time.perf_counter() - t0)
        if out:
            with open(out / "history.jsonl", "a") as fh:
                fh.write(json.dumps(rec) + "\n")
            if cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
                save_checkpoint(model, out / f"checkpoint_epoch{epoch:03d}")

        if val.accuracy > best_acc:
            best_acc, best_epoch, best_snap, stale = val.accuracy, epoch, _snapshot(model), 0
        else:
            stale += 1
        if cfg.stop_on_perfect and best_acc >= 1.0:
            break
        if cfg.patience and stale >= cfg.patience:
            break

    _restore(model, best_snap)
    ckpt = save_checkpoint(model, out / "best") if out else None
    if out:
        (out / "train_summary.json").write_text(json.dumps(
            {"best_epoch": best_epoch, "best_val_accuracy": best_acc, "train_config": asdict(cfg),
             "arch": arch.to_dict()}, indent=2))
    return TrainResult(model, history, best_epoch, best_acc, ckpt)
