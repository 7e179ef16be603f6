import dataclasses
import json
import math

import numpy as np
import pytest

from localforensics.dataio import preload, select_objectives
from localforensics.errors import ConfigError
from localforensics.metrics import auc_trapezoid, classification_metrics, pr_curve, roc_curve
from localforensics.model import ArchConfig, build, load_checkpoint
from localforensics.tensor import Tensor
from localforensics.trainer import (
    AdamState,
    TrainConfig,
    _prob_fake,
    adam_step,
    evaluate,
    predict_image,
    predict_scores,
    train,
)

from conftest import TINY_ARCH


def mann_whitney_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    u = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return u / (len(pos) * len(neg))


# ----------------------------------------------------------------- adam


def test_adam_zero_grad():
    p = Tensor(np.array([1.0, -2.0]))
    st = AdamState.zeros_like([p])
    adam_step([p], [np.zeros(2)], st, lr=0.1)
    adam_step([p], [None], st, lr=0.1)
    assert st.t == 2 and p.data.tolist() == [1.0, -2.0]


def test_adam_constant_gradient_step_tends_to_lr():
    p = Tensor(np.array([0.0]))
    st = AdamState.zeros_like([p])
    steps = []
    for _ in range(200):
        before = p.data.copy()
        adam_step([p], [np.array([3.0])], st, lr=0.01)
        steps.append(float(before[0] - p.data[0]))
    assert steps[-1] == pytest.approx(0.01, rel=1e-6)
    assert steps[0] == pytest.approx(0.01, rel=1e-6)  # bias correction makes every step ~lr


def test_adam_two_step_hand_trace():
    p = Tensor(np.array([1.0]))
    st = AdamState.zeros_like([p])
    adam_step([p], [np.array([0.5])], st, lr=0.1)
    # m=0.05, v=0.00025 -> mhat 0.5, vhat 0.25 -> step 0.1*0.5/(0.5+1e-8)
    assert p.data[0] == pytest.approx(1 - 0.05 / (0.5 + 1e-8), abs=1e-15)
    assert p.data[0] == pytest.approx(0.900000002, abs=1e-9)
    adam_step([p], [np.array([-0.25])], st, lr=0.1)
    m = 0.9 * 0.05 + 0.1 * -0.25
    v = 0.999 * 0.00025 + 0.001 * 0.0625
    mhat, vhat = m / (1 - 0.81), v / (1 - 0.999 ** 2)
    expect = 0.900000002 - 0.1 * mhat / (math.sqrt(vhat) + 1e-8)
    assert p.data[0] == pytest.approx(expect, abs=1e-12)
    assert p.data[0] == pytest.approx(0.8733663, abs=1e-6)


# ----------------------------------------------------------- prediction


def zero_heads(model):
    for t in (*model.seg_weights, *model.seg_biases, model.cls_weight, model.cls_bias):
        t.data[...] = 0
    return model


def test_predict_uniform_logits():
    m = zero_heads(build(TINY_ARCH, seed=0))
    x = np.random.default_rng(0).normal(size=(3, 48, 48)).astype(np.float32)
    assert predict_image(m, x, "classifier") == pytest.approx(0.5)
    assert predict_image(m, x, "seg_mean") == pytest.approx(0.5)


def test_predict_at_minimum_size():
    m = build(TINY_ARCH, seed=0)
    x = np.random.default_rng(1).normal(size=(2, 3, 33, 33)).astype(np.float32)
    for mode in ("classifier", "seg_mean"):
        s = predict_scores(m, x, mode)
        assert s.shape == (2,) and np.all((0 < s) & (s < 1))
    with pytest.raises(ValueError):
        predict_scores(m, x, "bogus")
    with pytest.raises(ValueError):
        predict_scores(m, x, "seg_mean", head=3)


def test_seg_mean_half_and_half():
    # seg_mean averages per-location fake probabilities over the grid
    logits = np.zeros((1, 2, 4, 4))
    logits[0, 1, :, :2] = 20.0
    logits[0, 0, :, 2:] = 20.0
    assert _prob_fake(logits).reshape(1, -1).mean() == pytest.approx(0.5, abs=1e-8)


# -------------------------------------------------------------- metrics


def test_metrics_perfect():
    m = classification_metrics([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])
    assert m.accuracy == 1.0 and m.auc == 1.0 and (m.tp, m.tn, m.fp, m.fn) == (2, 2, 0, 0)


def test_metrics_random_auc():
    rng = np.random.default_rng(0)
    labels = np.repeat([0, 1], 500)
    assert abs(classification_metrics(rng.random(1000), labels).auc - 0.5) <= 0.05


def test_metrics_all_positive_prediction():
    labels = np.array([1, 0, 1, 1, 0])
    assert classification_metrics(np.ones(5), labels).accuracy == pytest.approx(0.6)


def test_threshold_inclusive():
    assert classification_metrics([0.5], [1]).tp == 1


@pytest.mark.parametrize("seed", range(5))
def test_auc_matches_mann_whitney(seed):
    rng = np.random.default_rng(seed)
    n = 200
    labels = rng.integers(0, 2, n)
    scores = np.round(rng.random(n) + 0.3 * labels, 2)  # ties on purpose
    assert classification_metrics(scores, labels).auc == pytest.approx(mann_whitney_auc(scores, labels), abs=1e-9)


def test_curves_monotone_and_files(tmp_path):
    rng = np.random.default_rng(1)
    labels = rng.integers(0, 2, 300)
    scores = rng.random(300) + 0.5 * labels
    thr, fpr, tpr = roc_curve(scores, labels)
    assert np.all(np.diff(thr) < 0) and np.all(np.diff(fpr) >= 0) and np.all(np.diff(tpr) >= 0)
    assert fpr[-1] == tpr[-1] == 1.0
    assert 0 <= auc_trapezoid(fpr, tpr) <= 1
    _, prec, rec = pr_curve(scores, labels)
    assert np.all(np.diff(rec) >= 0) and np.all((0 <= prec) & (prec <= 1))
    m = classification_metrics(scores, labels)
    m.write(tmp_path)
    assert (tmp_path / "pr.csv").read_text().splitlines()[0] == "threshold,precision,recall"
    assert (tmp_path / "roc.csv").read_text().splitlines()[0] == "threshold,fpr,tpr"
    assert json.loads((tmp_path / "metrics.json").read_text())["n"] == 300


# ------------------------------------------------------------- training


def cfg_for(**kw):
    base = dict(epochs=3, batch_size=8, lambda_cls=0.5, lambda_seg=[0.5], objectives=["fake"], seed=1,
                patience=0, stop_on_perfect=False)
    base.update(kw)
    return TrainConfig(**base)


def test_train_deterministic_history(tiny_split, tmp_path):
    tr, va = tiny_split
    a = train(tr, va, TINY_ARCH, cfg_for(), tmp_path / "a")
    b = train(tr, va, TINY_ARCH, cfg_for(), tmp_path / "b")
    assert a.history == b.history
    assert (tmp_path / "a" / "history.jsonl").read_bytes() == (tmp_path / "b" / "history.jsonl").read_bytes()
    rec = a.history[0]
    assert set(rec) == {"epoch", "loss", "loss_cls", "loss_seg", "val_accuracy", "val_auc", "val_seg_iou"}
    assert rec["loss"] == pytest.approx(0.5 * rec["loss_cls"] + 0.5 * rec["loss_seg"][0], rel=1e-6)


def test_train_best_checkpoint(tiny_split, tmp_path):
    tr, va = tiny_split
    res = train(tr, va, TINY_ARCH, cfg_for(epochs=4), tmp_path)
    assert res.best_val_accuracy == max(h["val_accuracy"] for h in res.history)
    assert res.history[res.best_epoch - 1]["val_accuracy"] == res.best_val_accuracy
    back = load_checkpoint(res.checkpoint)
    va_fake = preload(select_objectives(va, ["fake"]))
    assert evaluate(back, va_fake).accuracy == res.best_val_accuracy


def test_pure_classification_history(tiny_split):
    tr, va = tiny_split
    arch = dataclasses.replace(TINY_ARCH, num_seg_heads=0)
    res = train(tr, va, arch, cfg_for(lambda_cls=1.0, lambda_seg=[], objectives=[]))
    for h in res.history:
        assert h["loss"] == h["loss_cls"] and h["loss_seg"] == []


def test_train_k_mismatch(tiny_split):
    tr, va = tiny_split
    with pytest.raises(ConfigError):
        train(tr, va, TINY_ARCH, cfg_for(objectives=["fake", "face"]))
    with pytest.raises(ConfigError):
        train(tr, va, TINY_ARCH, cfg_for(lambda_cls=0.5, lambda_seg=[0.3, 0.3], objectives=["fake", "face"]))
    with pytest.raises(ConfigError):
        train(tr, va, dataclasses.replace(TINY_ARCH, num_seg_heads=2), cfg_for())


def test_early_stopping(tiny_split):
    tr, va = tiny_split
    res = train(tr, va, TINY_ARCH, cfg_for(epochs=30, patience=2, lr=1e-7))
    assert len(res.history) < 30


def test_loss_mostly_decreasing(tiny_split):
    tr, va = tiny_split
    res = train(tr, va, TINY_ARCH, cfg_for(epochs=12, batch_size=32))
    loss = np.array([h["loss"] for h in res.history])
    smooth = np.convolve(loss, np.ones(3) / 3, mode="valid")
    assert np.mean(np.diff(smooth) <= 0) >= 0.9
