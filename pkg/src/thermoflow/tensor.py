"""Dense float64 tensors with reverse-mode autodiff on an explicit tape.

Everything trainable in the package runs through this module.  Design
choices: row-major contiguous float64 storage, no views exposed across
the API, and a tape that records primitives in execution order so the
backward walk is a single reversed pass (trivially topological, each
record visited exactly once, bit-reproducible).

Ops raise ``DimensionError`` on shape violations and ``NumericalError``
when an output turns non-finite: overflow is an error here, never a
silent inf.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf, expit

from . import kernels
from .errors import ContractError, DimensionError, NumericalError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

LAYERNORM_EPS = 1e-6

_ACTIVE_TAPES: list["Tape"] = []


class Tensor:
    """A dense float64 array with optional gradient accumulation."""

    __slots__ = ("data", "requires_grad", "grad", "_is_leaf", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        if not np.all(np.isfinite(arr)):
            raise NumericalError("tensor constructed from non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._is_leaf = True
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def _accumulate(self, g: np.ndarray) -> None:
        # Never mutate in place: grads may alias upstream buffers.
        self.grad = g if self.grad is None else self.grad + g

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of executed primitives, used for one backward pass.

    Inputs of every record precede it on the tape, so a reversed walk is
    a valid topological traversal.
    """

    def __init__(self):
        self._ops: list[tuple[Tensor, tuple, object]] = []

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.pop()

    def __len__(self) -> int:
        return len(self._ops)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, opname: str) -> None:
    # Fast probe: the sum is NaN/inf whenever any element is. A finite
    # overflowing sum of sane-magnitude values cannot occur at desk scale.
    if not np.isfinite(arr.sum()):
        if not np.all(np.isfinite(arr)):
            raise NumericalError(f"non-finite values produced by {opname}")


def _make(data: np.ndarray, inputs: tuple, backward_fn, opname: str) -> Tensor:
    _check_finite(data, opname)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out._is_leaf = True
    out._tape = None
    if _ACTIVE_TAPES and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        tape = _ACTIVE_TAPES[-1]
        out.requires_grad = True
        out._is_leaf = False
        out._tape = tape
        tape._ops.append((out, inputs, backward_fn))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor) -> None:
    """Propagate d(loss)/d(leaf) into every requires_grad leaf on the tape.

    Repeated calls without zeroing accumulate into leaf grads.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ContractError("backward() requires a scalar loss tensor")
    tape = loss._tape
    if tape is None:
        raise ContractError("loss was not recorded on an active tape")
    loss._accumulate(np.ones_like(loss.data))
    for out, inputs, fn in reversed(tape._ops):
        g = out.grad
        if g is None:
            continue
        gins = fn(g)
        for t, gi in zip(inputs, gins):
            if gi is not None and isinstance(t, Tensor) and t.requires_grad:
                t._accumulate(gi)
        if not out._is_leaf:
            out.grad = None


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, with numpy batch broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs ndim >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    try:
        data = a.data @ b.data
    except ValueError as e:
        raise DimensionError(f"matmul batch dims incompatible: {a.shape} @ {b.shape}") from e

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(data, (a, b), bw, "matmul")


def _broadcast_binary(a, b, fwd, bwa, bwb, opname):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        with np.errstate(over="ignore"):
            data = fwd(a.data, b.data)
    except ValueError as e:
        raise DimensionError(f"{opname}: incompatible shapes {a.shape} and {b.shape}") from e

    def bw(g):
        return _unbroadcast(bwa(g), a.shape), _unbroadcast(bwb(g), b.shape)

    return _make(data, (a, b), bw, opname)


def add(a, b) -> Tensor:
    return _broadcast_binary(a, b, np.add, lambda g: g, lambda g: g, "add")


def sub(a, b) -> Tensor:
    return _broadcast_binary(a, b, np.subtract, lambda g: g, lambda g: -g, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _broadcast_binary(
        a, b, np.multiply, lambda g: g * b.data, lambda g: g * a.data, "mul"
    )


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)
    return _make(a.data * s, (a,), lambda g: (g * s,), "scale")


def silu(a) -> Tensor:
    a = _as_tensor(a)
    s = expit(a.data)
    return _make(a.data * s, (a,), lambda g: (g * (s * (1.0 + a.data * (1.0 - s))),), "silu")


def gelu(a) -> Tensor:
    a = _as_tensor(a)
    phi = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    dens = np.exp(-0.5 * a.data * a.data) * _INV_SQRT2PI
    return _make(a.data * phi, (a,), lambda g: (g * (phi + a.data * dens),), "gelu")


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    t = np.tanh(a.data)
    return _make(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        e = np.exp(a.data)
    return _make(e, (a,), lambda g: (g * e,), "exp")


def abs_(a) -> Tensor:
    a = _as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def clamp(a, lo: float, hi: float) -> Tensor:
    a = _as_tensor(a)
    data = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)
    return _make(data, (a,), lambda g: (g * inside,), "clamp")


def softmax_lastdim(a) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _make(y, (a,), bw, "softmax")


def layernorm_lastdim(a, eps: float = LAYERNORM_EPS) -> Tensor:
    """Normalize the last axis to zero mean, unit variance; no affine terms."""
    a = _as_tensor(a)
    if eps <= 0:
        raise ContractError("layernorm epsilon must be positive")
    d = a.shape[-1]
    x2d = np.ascontiguousarray(a.data.reshape(-1, d))
    xhat, rstd = kernels.layernorm_forward(x2d, eps)

    def bw(g):
        g2d = np.ascontiguousarray(g.reshape(-1, d))
        return (kernels.layernorm_backward(g2d, xhat, rstd).reshape(a.shape),)

    return _make(xhat.reshape(a.shape), (a,), bw, "layernorm")


def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    data = np.asarray(a.data.sum()).reshape(1)
    return _make(data, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def mean_all(a) -> Tensor:
    a = _as_tensor(a)
    n = a.size
    data = np.asarray(a.data.mean()).reshape(1)
    return _make(data, (a,), lambda g: (np.broadcast_to(g / n, a.shape).copy(),), "mean")


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        data = a.data.reshape(shape)
    except ValueError as e:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}") from e
    return _make(data, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(tensors, axis: int) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, tuple(ts), bw, "concat")


def slice_lastdim(a, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    data = a.data[..., start:stop]

    def bw(g):
        full = np.zeros(a.shape, dtype=np.float64)
        full[..., start:stop] = g
        return (full,)

    return _make(data, (a,), bw, "slice")


def embedding_select(table, indices) -> Tensor:
    """Gather rows of a 2-D table; gradients scatter-add back onto the rows."""
    table = _as_tensor(table)
    if table.ndim != 2:
        raise DimensionError(f"embedding table must be 2-D, got {table.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    data = table.data[idx]

    def bw(g):
        gt = np.zeros(table.shape, dtype=np.float64)
        np.add.at(gt, idx, g)
        return (gt,)

    return _make(data, (table,), bw, "embedding_select")


def conv2d(x, w, b, stride: int = 1, padding: int = 1) -> Tensor:
    """2-D convolution on NHWC input with (k, k, c_in, c_out) weights.

    Runs as one GEMM per kernel offset on shifted input planes, which is
    far kinder to memory bandwidth than an im2col buffer; the
    gather/scatter planes are kernel-backed.
    """
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects NHWC input and kkio weights, got {x.shape}, {w.shape}")
    k = w.shape[0]
    c_in, c_out = w.shape[2], w.shape[3]
    if w.shape[1] != k or x.shape[3] != c_in or b.shape != (c_out,):
        raise DimensionError(f"conv2d weight/bias mismatch: x={x.shape} w={w.shape} b={b.shape}")
    bsz, h, wd, _ = x.shape
    out_h = (h + 2 * padding - k) // stride + 1
    out_w = (wd + 2 * padding - k) // stride + 1
    if out_h <= 0 or out_w <= 0:
        raise DimensionError(f"conv2d output collapsed: input {x.shape}, k={k}, stride={stride}")
    xpad = np.zeros((bsz, h + 2 * padding, wd + 2 * padding, c_in), dtype=np.float64)
    xpad[:, padding : padding + h, padding : padding + wd, :] = x.data

    acc = np.empty((bsz * out_h * out_w, c_out), dtype=np.float64)
    acc[:] = b.data
    planes = []
    for ki in range(k):
        for kj in range(k):
            plane = kernels.shift_gather(xpad, ki, kj, stride, out_h, out_w)
            planes.append(plane.reshape(-1, c_in))
            acc += planes[-1] @ w.data[ki, kj]
    data = acc.reshape(bsz, out_h, out_w, c_out)

    def bw(g):
        g2d = g.reshape(-1, c_out)
        gw = np.empty_like(w.data)
        gxpad = np.zeros_like(xpad)
        for ki in range(k):
            for kj in range(k):
                gw[ki, kj] = planes[ki * k + kj].T @ g2d
                gplane = (g2d @ w.data[ki, kj].T).reshape(bsz, out_h, out_w, c_in)
                kernels.shift_scatter_add(gxpad, gplane, ki, kj, stride)
        gb = g2d.sum(axis=0)
        gx = gxpad[:, padding : padding + h, padding : padding + wd, :]
        return np.ascontiguousarray(gx), gw, gb

    return _make(data, (x, w, b), bw, "conv2d")


def upsample_nearest2x(x) -> Tensor:
    x = _as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"upsample expects NHWC input, got {x.shape}")
    data = x.data.repeat(2, axis=1).repeat(2, axis=2)
    bsz, h, w, c = x.shape

    def bw(g):
        return (g.reshape(bsz, h, 2, w, 2, c).sum(axis=(2, 4)),)

    return _make(data, (x,), bw, "upsample_nearest2x")


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """Decoupled-weight-decay Adam over a fixed list of leaf tensors."""

    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        if lr <= 0:
            raise ContractError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        for p in self.params:
            if not (isinstance(p, Tensor) and p.requires_grad and p._is_leaf):
                raise ContractError("AdamW parameters must be requires_grad leaf tensors")
        self.lr = lr
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = eps
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self._m = [np.zeros(p.size, dtype=np.float64) for p in self.params]
        self._v = [np.zeros(p.size, dtype=np.float64) for p in self.params]

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                raise ContractError("AdamW.step() with unpopulated gradients; run backward first")
        self.step_count += 1
        for p, m, v in zip(self.params, self._m, self._v):
            kernels.adamw_update(
                p.data.reshape(-1), np.ravel(p.grad), m, v,
                self.step_count, self.lr, self.beta1, self.beta2, self.eps, self.weight_decay,
            )

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def adamw_step(params, lr, betas, weight_decay, state: AdamW | None = None) -> AdamW:
    """Functional single-step form; returns the advanced optimizer state."""
    if state is None:
        state = AdamW(params, lr=lr, betas=betas, weight_decay=weight_decay)
    state.step()
    return state
