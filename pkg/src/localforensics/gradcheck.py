"""64-bit finite-difference verification of every differentiable op and of
the composed network loss."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .model import ArchConfig, build, forward
from .objective import LossWeights, cls_loss, extract_seg_labels, joint_loss, seg_loss
from .tensor import (
    BatchNormState,
    Tape,
    Tensor,
    affine,
    backward,
    batchnorm2d,
    conv2d_valid,
    cross_entropy,
    finite_diff_gradient,
    global_avg_pool,
    max_relative_error,
    maxpool2d,
    relu,
    softmax,
    tape_patterns,
    weighted_sum,
)

TOLERANCE = 1e-6
FD_EPS = 1e-5


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    passed: bool
    seconds: float
    skipped: int = 0


def _check_op(name: str, fn: Callable[..., Tensor], inputs: list[np.ndarray], rng, tol: float) -> CheckResult:
    """Compare reverse-mode gradients of sum(fn(*inputs) * R) against central
    differences, for every input."""
    t0 = time.perf_counter()
    out_shape = fn(*[Tensor(a) for a in inputs]).shape
    proj = rng.normal(size=out_shape) / np.sqrt(max(int(np.prod(out_shape)), 1))

    def scalar(ts):
        return weighted_sum(fn(*ts), proj)

    leaves = [Tensor(a.copy(), requires_grad=True) for a in inputs]
    with Tape() as tape:
        loss = scalar(leaves)
    backward(loss, tape)
    worst = 0.0
    for i, leaf in enumerate(leaves):

        def f(t, i=i):
            args = [Tensor(a.copy()) for a in inputs]
            args[i] = t
            return scalar(args)

        fd = finite_diff_gradient(f, inputs[i], FD_EPS)
        worst = max(worst, max_relative_error(leaf.grad, fd))
    return CheckResult(name, worst, worst <= tol, time.perf_counter() - t0)


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin + x, x)


def _tie_free(rng, shape):
    vals = rng.permutation(int(np.prod(shape))).astype(np.float64) * 0.1
    return vals.reshape(shape) + rng.uniform(-0.01, 0.01, shape)


def _bn(mode):
    def fn(x, gamma, beta):
        state = BatchNormState(gamma, beta, np.full(gamma.shape, 0.3), np.full(gamma.shape, 1.7))
        return batchnorm2d(x, state, mode)

    return fn


def _network_check(rng, tol: float) -> CheckResult:
    """Joint loss of the default-shaped network (k=2, train-mode BN) against
    central differences on sampled parameter coordinates and input pixels."""
    t0 = time.perf_counter()
    arch = ArchConfig(input_size=37, conv_channels=(4, 5, 6, 6, 7, 7, 8, 8), num_seg_heads=2)
    model = build(arch, seed=int(rng.integers(1 << 31))).astype(np.float64)
    for p in model.parameters():
        p.data += rng.normal(scale=0.05, size=p.shape)
    images = rng.normal(size=(3, 3, 37, 37)) * 0.5
    labels = np.array([0, 1, 1])
    masks = (rng.random((2, 3, 37, 37)) > 0.5).astype(np.uint8)
    weights = LossWeights(0.5, [0.3, 0.2])

    def loss_of(x: Tensor) -> Tensor:
        fo = forward(model, x, "train")
        segs = [seg_loss(fo.seg_logits[h], extract_seg_labels(masks[h], model.rf, fo.grid)) for h in range(2)]
        return joint_loss(weights, cls_loss(fo.image_logits, labels), segs)

    def probe() -> tuple[float, list[np.ndarray]]:
        with Tape() as t:
            value = loss_of(Tensor(images, requires_grad=True)).item()
        return value, tape_patterns(t)

    def same(pa, pb) -> bool:
        return all(np.array_equal(a, b) for a, b in zip(pa, pb))

    params = model.parameters()
    x = Tensor(images, requires_grad=True)
    with Tape() as tape:
        loss = loss_of(x)
    backward(loss, tape)
    base = tape_patterns(tape)
    targets = [(p.data.reshape(-1), p.grad.reshape(-1).copy(), 3) for p in params]
    targets.append((images.reshape(-1), x.grad.reshape(-1).copy(), 20))
    worst, skipped = 0.0, 0
    for flat, grad, want in targets:
        done = 0
        for idx in rng.permutation(flat.size):
            if done == want:
                break
            orig = flat[idx]
            flat[idx] = orig + FD_EPS
            fp, pp = probe()
            flat[idx] = orig - FD_EPS
            fm, pm = probe()
            flat[idx] = orig
            if not (same(pp, base) and same(pm, base)):
                skipped += 1  # straddles a relu kink or pool tie
                continue
            worst = max(worst, max_relative_error(grad[idx], (fp - fm) / (2 * FD_EPS)))
            done += 1
    return CheckResult("network_joint_loss", worst, worst <= tol, time.perf_counter() - t0, skipped)


def run_gradcheck(seed: int = 0, tol: float = TOLERANCE) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    n = rng.normal
    results = [
        _check_op("conv2d_valid", conv2d_valid, [n(size=(2, 3, 6, 5)), n(size=(4, 3, 3, 3)), n(size=4)], rng, tol),
        _check_op("maxpool2d", lambda x: maxpool2d(x, 3, 2), [_tie_free(rng, (2, 2, 7, 9))], rng, tol),
        _check_op("relu", relu, [_away_from_zero(rng, (2, 3, 4, 4))], rng, tol),
        _check_op("batchnorm2d_train", _bn("train"), [n(size=(3, 2, 4, 4)), 1 + 0.3 * n(size=2), n(size=2)], rng, tol),
        _check_op("batchnorm2d_eval", _bn("eval"), [n(size=(3, 2, 4, 4)), 1 + 0.3 * n(size=2), n(size=2)], rng, tol),
        _check_op("global_avg_pool", global_avg_pool, [n(size=(2, 3, 4, 5))], rng, tol),
        _check_op("affine", affine, [n(size=(4, 5)), n(size=(3, 5)), n(size=3)], rng, tol),
        _check_op("softmax", lambda x: softmax(x, axis=1), [n(size=(4, 2, 3))], rng, tol),
    ]
    labels = rng.integers(0, 2, size=(3, 4))
    results.append(_check_op("cross_entropy", lambda z: cross_entropy(z, labels, axis=1), [n(size=(3, 2, 4))], rng, tol))
    results.append(_network_check(rng, tol))
    return results
