"""Dense tensors with reverse-mode differentiation for the handful of layers
the detector needs.

Every differentiable op is a plain function. When a :class:`Tape` is active
and at least one input requires a gradient, the op appends a record holding
its inputs, its output and a closure mapping the output gradient to input
gradients. :func:`backward` replays those records in reverse.

Float32 is the working precision; float64 inputs stay float64, which is what
the finite-difference checks rely on.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, NonFiniteError

DEFAULT_DTYPE = np.float32


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("only scalar multiplication is supported")
        return scale(self, float(other))

    __rmul__ = __mul__

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    # discrete branch decisions (relu sign, pool argmax), for kink detection
    pattern: np.ndarray | None = None


class Tape:
    """Ordered log of executed differentiable ops.

    Use as a context manager; ops run inside the ``with`` block are recorded.
    Tapes nest per thread, the innermost one receives the records.
    """

    _local = threading.local()

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        stack = self._stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        self._stack().pop()

    def __len__(self) -> int:
        return len(self.records)

    @classmethod
    def _stack(cls) -> list["Tape"]:
        if not hasattr(cls._local, "stack"):
            cls._local.stack = []
        return cls._local.stack

    @classmethod
    def current(cls) -> "Tape | None":
        stack = cls._stack()
        return stack[-1] if stack else None


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op}: produced non-finite values")


def _emit(op: str, out_data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn, pattern=None) -> Tensor:
    _check_finite(out_data, op)
    tape = Tape.current()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        tape.records.append(_Record(out, inputs, backward_fn, pattern))
    return out


def tape_patterns(tape: Tape) -> list[np.ndarray]:
    return [r.pattern for r in tape.records if r.pattern is not None]


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad.

    Gradients add onto existing ``.grad`` values; zero them between steps.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    pending: dict[int, tuple[Tensor, np.ndarray]] = {id(loss): (loss, np.ones_like(loss.data))}
    for rec in reversed(tape.records):
        entry = pending.pop(id(rec.out), None)
        if entry is None:
            continue
        grads = rec.backward_fn(entry[1])
        for inp, g in zip(rec.inputs, grads):
            if g is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in pending:
                pending[key] = (inp, pending[key][1] + g)
            else:
                pending[key] = (inp, g)
    for t, g in pending.values():
        t.grad = g.copy() if t.grad is None else t.grad + g


# --------------------------------------------------------------------- ops


def add(a: Tensor, b: Tensor | float) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return _emit("add", a.data + a.data.dtype.type(c), (a,), lambda g: (g,))
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,))


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar ``sum(x * weights)`` with a constant weight array."""
    weights = np.asarray(weights, dtype=x.dtype)
    if weights.shape != x.shape:
        raise DimensionError(f"weighted_sum: weights {weights.shape} vs input {x.shape}")
    return _emit("weighted_sum", np.asarray((x.data * weights).sum(), dtype=x.dtype), (x,), lambda g: (g * weights,))


GEMM_PAD = 64


def conv2d_valid(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Stride-1, unpadded cross-correlation of an NCHW batch."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise DimensionError(f"conv2d_valid: expected 4-d input/weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    oc, ic, kh, kw = weight.shape
    if ic != c:
        raise DimensionError(f"conv2d_valid: input has {c} channels, weight expects {ic}")
    if kh != kw:
        raise DimensionError(f"conv2d_valid: kernel must be square, got {kh}x{kw}")
    if kh > h or kw > w:
        raise DimensionError(f"conv2d_valid: kernel {kh} exceeds spatial extent {h}x{w}")
    if bias.shape != (oc,):
        raise DimensionError(f"conv2d_valid: bias shape {bias.shape} != ({oc},)")
    k = kh
    ho, wo = h - k + 1, w - k + 1
    # Channel-major flattening: tap (i, j) of every output position p reads
    # input position p + i*w + j, so each tap is one GEMM over a shifted
    # slice. Positions that wrap across rows or samples are computed and
    # discarded. BLAS handles the trailing N % tile columns with a different
    # kernel, so the buffer is zero-padded to a whole number of tiles; that
    # keeps each output independent of where its column falls (exact
    # translation covariance).
    hw = n * h * w
    padded = -(-hw // GEMM_PAD) * GEMM_PAD
    span = hw - ((k - 1) * w + (k - 1))
    offsets = [i * w + j for i in range(k) for j in range(k)]
    x2 = np.empty((c, padded), dtype=x.dtype)
    x2[:, :hw].reshape(c, n, h, w)[...] = x.data.transpose(1, 0, 2, 3)
    x2[:, hw:] = 0
    wtaps = np.ascontiguousarray(weight.data.transpose(2, 3, 0, 1)).reshape(k * k, oc, c)

    z = (wtaps.reshape(k * k * oc, c) @ x2).reshape(k * k, oc, padded)
    full = z[0, :, :hw].copy()
    for t in range(1, k * k):
        full[:, :span] += z[t][:, offsets[t]:offsets[t] + span]
    del z
    out = full.reshape(oc, n, h, w)[:, :, :ho, :wo].transpose(1, 0, 2, 3) + bias.data.reshape(1, oc, 1, 1)

    def bw(g):
        gfull = np.zeros((oc, n, h, w), dtype=g.dtype)
        gfull[:, :, :ho, :wo] = g.transpose(1, 0, 2, 3)
        gfull = gfull.reshape(oc, hw)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.empty((k * k, oc, c), dtype=g.dtype)
            for t, off in enumerate(offsets):
                gw[t] = gfull[:, :span] @ x2[:, off:off + span].T
            gw = gw.reshape(k, k, oc, c).transpose(2, 3, 0, 1).copy()
        if bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            u = (wtaps.transpose(0, 2, 1).reshape(k * k * c, oc) @ gfull).reshape(k * k, c, hw)
            gx2 = u[0].copy()
            for t in range(1, k * k):
                gx2[:, offsets[t]:offsets[t] + span] += u[t][:, :span]
            del u
            gx = np.ascontiguousarray(gx2.reshape(c, n, h, w).transpose(1, 0, 2, 3))
        return gx, gw, gb

    return _emit("conv2d_valid", np.ascontiguousarray(out), (x, weight, bias), bw)


def pool_output_size(extent: int, kernel: int, stride: int) -> int:
    return (extent - kernel) // stride + 1


def maxpool2d(x: Tensor, kernel: int, stride: int) -> Tensor:
    """Max pooling without padding; ties send the gradient to the first
    maximal element in row-major window order."""
    if x.data.ndim != 4:
        raise DimensionError(f"maxpool2d: expected NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if kernel > h or kernel > w:
        raise DimensionError(f"maxpool2d: kernel {kernel} exceeds spatial extent {h}x{w}")
    ho, wo = pool_output_size(h, kernel, stride), pool_output_size(w, kernel, stride)
    win = sliding_window_view(x.data, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(n, c, ho, wo, kernel * kernel)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros_like(x.data)
        for p in range(kernel * kernel):
            i, j = divmod(p, kernel)
            gx[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += np.where(idx == p, g, 0)
        return (gx,)

    return _emit("maxpool2d", np.ascontiguousarray(out), (x,), bw, pattern=idx)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, x.dtype.type(0))
    return _emit("relu", out, (x,), lambda g: (g * (out > 0),), pattern=x.data > 0)


@dataclass
class BatchNormState:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def create(cls, channels: int, dtype=DEFAULT_DTYPE, name: str = "bn") -> "BatchNormState":
        return cls(
            gamma=Tensor(np.ones(channels, dtype), requires_grad=True, name=f"{name}.gamma"),
            beta=Tensor(np.zeros(channels, dtype), requires_grad=True, name=f"{name}.beta"),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def batchnorm2d(x: Tensor, state: BatchNormState, mode: str = "train") -> Tensor:
    """Per-channel normalization. ``train`` uses batch statistics and updates
    the running estimates; ``eval`` uses the running estimates only."""
    if x.data.ndim != 4:
        raise DimensionError(f"batchnorm2d: expected NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if c != state.channels:
        raise DimensionError(f"batchnorm2d: input has {c} channels, state has {state.channels}")
    m = n * h * w
    if m == 0:
        raise DimensionError("batchnorm2d: empty batch")
    dt = x.dtype.type
    gamma = state.gamma.data.reshape(1, c, 1, 1)
    beta = state.beta.data.reshape(1, c, 1, 1)

    if mode == "train":
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        inv_std = (1.0 / np.sqrt(var + dt(state.eps))).astype(x.dtype)
        xhat = (x.data - mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
        mom = state.momentum
        state.running_mean[...] = (1 - mom) * state.running_mean + mom * mean
        state.running_var[...] = (1 - mom) * state.running_var + mom * var

        def bw(g):
            gxhat = g * gamma
            gx = None
            if x.requires_grad:
                s1 = gxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                gx = (inv_std.reshape(1, c, 1, 1) / m) * (m * gxhat - s1 - xhat * s2)
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    elif mode == "eval":
        inv_std = (1.0 / np.sqrt(state.running_var.astype(x.dtype) + dt(state.eps))).astype(x.dtype)
        xhat = (x.data - state.running_mean.astype(x.dtype).reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)

        def bw(g):
            return g * (gamma * inv_std.reshape(1, c, 1, 1)), (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    else:
        raise ValueError(f"batchnorm2d: unknown mode {mode!r}")

    out = gamma * xhat + beta
    return _emit("batchnorm2d", out, (x, state.gamma, state.beta), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise DimensionError(f"global_avg_pool: expected NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def bw(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(x.dtype),)

    return _emit("global_avg_pool", out, (x,), bw)


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    if x.data.ndim != 2 or weight.data.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise DimensionError(f"affine: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f"affine: bias shape {bias.shape} != ({weight.shape[0]},)")
    out = x.data @ weight.data.T + bias.data
    return _emit("affine", out, (x, weight, bias), lambda g: (g @ weight.data, g.T @ x.data, g.sum(axis=0)))


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", p, (x,), bw)


def log_softmax(data: np.ndarray, axis: int = 1) -> np.ndarray:
    z = data - data.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def cross_entropy(logits: Tensor, labels, axis: int = 1) -> Tensor:
    """Mean of ``-log softmax(logits)[label]`` over every position except the
    class axis. ``labels`` has the logits' shape with the class axis removed."""
    labels = np.asarray(labels)
    expect = logits.shape[:axis] + logits.shape[axis + 1:]
    if labels.shape != expect:
        raise DimensionError(f"cross_entropy: labels shape {labels.shape} != {expect}")
    ncls = logits.shape[axis]
    if labels.size and (labels.min() < 0 or labels.max() >= ncls):
        raise ValueError(f"cross_entropy: labels must lie in [0, {ncls})")
    if labels.size == 0:
        raise DimensionError("cross_entropy: no positions to average")
    lab = np.expand_dims(labels.astype(np.intp), axis)
    logp = log_softmax(logits.data, axis)
    picked = np.take_along_axis(logp, lab, axis=axis)
    count = labels.size
    loss = np.asarray(-picked.sum() / count, dtype=logits.dtype)

    def bw(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, lab, np.take_along_axis(grad, lab, axis=axis) - 1, axis=axis)
        return (grad * (g / count),)

    return _emit("cross_entropy", loss, (logits,), bw)


# ------------------------------------------------------------- verification


def finite_diff_gradient(f: Callable[[Tensor], Tensor | float], point, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function at ``point`` (64-bit)."""
    x = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    grad = np.zeros_like(x)

    def value(arr):
        out = f(Tensor(arr))
        return float(out.data.reshape(-1)[0]) if isinstance(out, Tensor) else float(out)

    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = value(x)
        flat[i] = orig - eps
        fm = value(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-4) -> float:
    """max |a-b| / max(|a|, |b|, floor), elementwise.

    The floor keeps near-zero entries, where central differences carry
    ~1e-11 absolute roundoff, from dominating the ratio."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max()) if a.size else 0.0
