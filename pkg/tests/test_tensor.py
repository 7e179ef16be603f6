import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from localforensics.errors import ContractError, DimensionError, NonFiniteError
from localforensics.tensor import (
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
    weighted_sum,
)


def naive_conv(x, w, b):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    out = np.zeros((n, o, h - k + 1, wd - k + 1))
    for a in range(n):
        for q in range(o):
            for y in range(h - k + 1):
                for z in range(wd - k + 1):
                    s = b[q]
                    for ci in range(c):
                        for i in range(k):
                            for j in range(k):
                                s += x[a, ci, y + i, z + j] * w[q, ci, i, j]
                    out[a, q, y, z] = s
    return out


def grads_of(fn, *arrays, proj_seed=0):
    """Reverse-mode gradients of sum(fn(*arrays) * R) for each input."""
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out_shape = fn(*[Tensor(a) for a in arrays]).shape
    proj = np.random.default_rng(proj_seed).normal(size=out_shape)
    with Tape() as tape:
        loss = weighted_sum(fn(*leaves), proj)
    backward(loss, tape)

    def numeric(i):
        def f(t):
            args = [Tensor(a) for a in arrays]
            args[i] = t
            return weighted_sum(fn(*args), proj)

        return finite_diff_gradient(f, arrays[i])

    return [l.grad for l in leaves], numeric


# ------------------------------------------------------------------ conv


def test_conv_identity_kernel():
    x = np.arange(9, dtype=np.float32).reshape(1, 1, 3, 3)
    out = conv2d_valid(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, x)


def test_conv_all_ones_sum():
    out = conv2d_valid(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor([0.5]))
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == pytest.approx(9.5)


def test_conv_matches_loop_oracle():
    rng = np.random.default_rng(0)
    x, w, b = rng.normal(size=(2, 3, 8, 8)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    got = conv2d_valid(Tensor(x), Tensor(w), Tensor(b)).data
    assert max_relative_error(got, naive_conv(x, w, b), floor=1e-12) <= 1e-6


def test_conv_oracle_100_random_cases():
    rng = np.random.default_rng(1)
    for _ in range(100):
        n, c, o = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
        k = int(rng.choice([1, 2, 3]))
        h, w = rng.integers(k, 7), rng.integers(k, 7)
        x, wt, b = rng.normal(size=(n, c, h, w)), rng.normal(size=(o, c, k, k)), rng.normal(size=o)
        got = conv2d_valid(Tensor(x), Tensor(wt), Tensor(b)).data
        ref = naive_conv(x, wt, b)
        assert np.max(np.abs(got - ref) / np.maximum(np.abs(ref), 1.0)) <= 1e-6


def test_conv_shape_errors():
    with pytest.raises(DimensionError, match="3 channels"):
        conv2d_valid(Tensor(np.zeros((1, 3, 5, 5))), Tensor(np.zeros((2, 2, 3, 3))), Tensor(np.zeros(2)))
    with pytest.raises(DimensionError, match="exceeds"):
        conv2d_valid(Tensor(np.zeros((1, 1, 2, 5))), Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.zeros(1)))


def test_conv_gradients():
    rng = np.random.default_rng(2)
    arrays = [rng.normal(size=(2, 3, 5, 6)), rng.normal(size=(2, 3, 3, 3)), rng.normal(size=2)]
    analytic, numeric = grads_of(conv2d_valid, *arrays)
    for i, g in enumerate(analytic):
        assert max_relative_error(g, numeric(i)) <= 1e-6


# ------------------------------------------------------------------ pool


def test_maxpool_example():
    x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
    out = maxpool2d(Tensor(x), 2, 2)
    np.testing.assert_array_equal(out.data[0, 0], [[5, 7], [13, 15]])


def test_maxpool_constant_and_size():
    out = maxpool2d(Tensor(np.full((1, 2, 126, 126), 3.0)), 3, 2)
    assert out.shape == (1, 2, 62, 62)
    assert np.all(out.data == 3.0)


def test_maxpool_kernel_too_large():
    with pytest.raises(DimensionError):
        maxpool2d(Tensor(np.zeros((1, 1, 2, 2))), 3, 2)


def test_maxpool_tie_gradient_goes_to_first():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    with Tape() as tape:
        loss = weighted_sum(maxpool2d(x, 2, 2), np.ones((1, 1, 1, 1)))
    backward(loss, tape)
    np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])


def test_maxpool_gradient_away_from_ties():
    rng = np.random.default_rng(3)
    x = (rng.permutation(2 * 7 * 7).reshape(1, 2, 7, 7) * 0.1).astype(np.float64)
    analytic, numeric = grads_of(lambda t: maxpool2d(t, 3, 2), x)
    assert max_relative_error(analytic[0], numeric(0)) <= 1e-6


# ------------------------------------------------------------------ relu


def test_relu_values():
    np.testing.assert_array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    assert not relu(Tensor(-np.arange(1, 5, dtype=np.float64))).data.any()


def test_relu_gradient_away_from_zero():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(3, 4))
    x[np.abs(x) < 0.05] = 0.5
    analytic, numeric = grads_of(relu, x)
    assert max_relative_error(analytic[0], numeric(0)) <= 1e-6


def test_relu_subgradient_at_zero_is_zero():
    x = Tensor(np.zeros(3), requires_grad=True)
    with Tape() as tape:
        loss = weighted_sum(relu(x), np.ones(3))
    backward(loss, tape)
    np.testing.assert_array_equal(x.grad, 0)


# ------------------------------------------------------------- batchnorm


def test_batchnorm_train_normalizes():
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(3.0, 2.5, size=(4, 3, 5, 5)).astype(np.float32))
    out = batchnorm2d(x, BatchNormState.create(3), "train").data.astype(np.float64)
    assert np.all(np.abs(out.mean(axis=(0, 2, 3))) <= 1e-5)
    assert np.all(np.abs(out.var(axis=(0, 2, 3)) - 1) <= 1e-4)


def test_batchnorm_running_update():
    rng = np.random.default_rng(6)
    x = rng.normal(2.0, 3.0, size=(4, 2, 3, 3))
    st_ = BatchNormState.create(2, dtype=np.float64)
    batchnorm2d(Tensor(x), st_, "train")
    np.testing.assert_allclose(st_.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(st_.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)))
    assert np.all(st_.running_var >= 0)


def test_batchnorm_eval_identity_stats():
    x = np.random.default_rng(7).normal(size=(2, 3, 4, 4))
    out = batchnorm2d(Tensor(x), BatchNormState.create(3, dtype=np.float64), "eval")
    np.testing.assert_allclose(out.data, x / math.sqrt(1 + 1e-5), rtol=1e-12)


def test_batchnorm_errors():
    with pytest.raises(DimensionError):
        batchnorm2d(Tensor(np.zeros((1, 2, 3, 3))), BatchNormState.create(3), "train")
    with pytest.raises(DimensionError):
        batchnorm2d(Tensor(np.zeros((0, 3, 3, 3))), BatchNormState.create(3), "train")


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_batchnorm_gradients(mode):
    rng = np.random.default_rng(8)

    def fn(x, g, b):
        return batchnorm2d(x, BatchNormState(g, b, np.full(2, 0.2), np.full(2, 1.5)), mode)

    arrays = [rng.normal(size=(3, 2, 3, 3)), 1 + 0.2 * rng.normal(size=2), rng.normal(size=2)]
    analytic, numeric = grads_of(fn, *arrays)
    for i, g in enumerate(analytic):
        assert max_relative_error(g, numeric(i)) <= 1e-6


# ------------------------------------------------------------ gap/affine


def test_gap_examples():
    assert np.all(global_avg_pool(Tensor(np.full((2, 3, 4, 5), 1.5))).data == 1.5)
    x = np.random.default_rng(9).normal(size=(2, 3, 1, 1))
    np.testing.assert_array_equal(global_avg_pool(Tensor(x)).data, x[:, :, 0, 0])


def test_gap_loop_oracle():
    x = np.random.default_rng(10).normal(size=(2, 3, 4, 5))
    ref = np.array([[sum(x[n, c].ravel()) / 20 for c in range(3)] for n in range(2)])
    np.testing.assert_allclose(global_avg_pool(Tensor(x)).data, ref, rtol=1e-12)


def test_affine_examples():
    x = np.random.default_rng(11).normal(size=(4, 3))
    np.testing.assert_array_equal(affine(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3))).data, x)
    out = affine(Tensor(x), Tensor(np.zeros((2, 3))), Tensor([1.0, -2.0]))
    np.testing.assert_array_equal(out.data, np.tile([1.0, -2.0], (4, 1)))


def test_affine_loop_oracle_and_gradient():
    rng = np.random.default_rng(12)
    x, w, b = rng.normal(size=(4, 5)), rng.normal(size=(3, 5)), rng.normal(size=3)
    ref = np.array([[sum(x[n, c] * w[k, c] for c in range(5)) + b[k] for k in range(3)] for n in range(4)])
    np.testing.assert_allclose(affine(Tensor(x), Tensor(w), Tensor(b)).data, ref, rtol=1e-12)
    analytic, numeric = grads_of(affine, x, w, b)
    for i, g in enumerate(analytic):
        assert max_relative_error(g, numeric(i)) <= 1e-6


def test_global_avg_pool_gradient():
    x = np.random.default_rng(13).normal(size=(2, 3, 4, 4))
    analytic, numeric = grads_of(global_avg_pool, x)
    assert max_relative_error(analytic[0], numeric(0)) <= 1e-6


# ---------------------------------------------------- softmax / xent


def test_softmax_examples():
    np.testing.assert_allclose(softmax(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])
    np.testing.assert_allclose(softmax(Tensor([[0.0, math.log(3)]], )).data, [[0.25, 0.75]], rtol=1e-6)
    np.testing.assert_allclose(softmax(Tensor([[1000.0, 1000.0]])).data, [[0.5, 0.5]])


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 5)),
              elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_softmax_sums_to_one(x):
    p = softmax(Tensor(x), axis=1).data
    assert np.all((p >= 0) & (p <= 1))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


def test_cross_entropy_examples():
    logits = Tensor([[0.0, math.log(3)]], )
    assert cross_entropy(logits, [1]).item() == pytest.approx(-math.log(0.75), abs=1e-6)
    assert cross_entropy(Tensor([[2.0, 2.0]]), [0]).item() == pytest.approx(math.log(2), abs=1e-6)
    z = np.array([[0.0, 1.0], [3.0, -1.0]])
    each = [cross_entropy(Tensor(z[i:i + 1]), [l]).item() for i, l in enumerate([1, 0])]
    assert cross_entropy(Tensor(z), [1, 0]).item() == pytest.approx(np.mean(each), rel=1e-12)


def test_cross_entropy_gradient_spatial():
    rng = np.random.default_rng(14)
    z = rng.normal(size=(2, 2, 3, 3))
    labels = rng.integers(0, 2, size=(2, 3, 3))
    leaf = Tensor(z, requires_grad=True)
    with Tape() as tape:
        loss = cross_entropy(leaf, labels)
    backward(loss, tape)
    fd = finite_diff_gradient(lambda t: cross_entropy(t, labels), z)
    assert max_relative_error(leaf.grad, fd) <= 1e-6


def test_cross_entropy_rejects_bad_labels():
    with pytest.raises(ValueError):
        cross_entropy(Tensor([[0.0, 1.0]]), [2])


# --------------------------------------------------------- tape / fd


def test_finite_diff_examples():
    g = finite_diff_gradient(lambda t: float((t.data ** 2).sum()), np.array([1.0, 2.0]))
    np.testing.assert_allclose(g, [2.0, 4.0], atol=1e-8)
    np.testing.assert_array_equal(finite_diff_gradient(lambda t: 3.0, np.ones(4)), 0)


def test_backward_requires_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        y = relu(x)
    with pytest.raises(ContractError):
        backward(y, tape)


def test_backward_accumulates_until_zeroed():
    x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    for _ in range(2):
        with Tape() as tape:
            loss = weighted_sum(x, np.array([3.0, 4.0]))
        backward(loss, tape)
    np.testing.assert_array_equal(x.grad, [6.0, 8.0])
    x.zero_grad()
    assert x.grad is None


def test_shared_input_gradients_sum():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        loss = weighted_sum(x + x, np.array([1.0, 1.0]))
    backward(loss, tape)
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


def test_no_tape_no_record():
    x = Tensor(np.ones(3), requires_grad=True)
    out = relu(x)
    assert not out.requires_grad


def test_non_finite_is_an_error():
    with pytest.raises(NonFiniteError):
        relu(Tensor(np.array([np.inf, 1.0])))


def test_ops_deterministic():
    rng = np.random.default_rng(15)
    x, w, b = (rng.normal(size=s).astype(np.float32) for s in [(2, 3, 9, 9), (4, 3, 3, 3), (4,)])
    a = conv2d_valid(Tensor(x), Tensor(w), Tensor(b)).data
    c = conv2d_valid(Tensor(x), Tensor(w), Tensor(b)).data
    assert a.dtype == np.float32
    assert a.tobytes() == c.tobytes()
