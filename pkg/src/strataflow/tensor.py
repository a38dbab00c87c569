"""Dense tensors with reverse-mode automatic differentiation.

The engine is deliberately small: a Tensor wraps a numpy array, every
primitive op records itself on an ambient tape, and ``backward`` replays
the tape in reverse creation order (which is a reverse topological order,
since an op is always recorded after its inputs). Single precision is the
default; gradient checks switch the ambient dtype to double.

Broadcasting is restricted to leading-dimension expansion: two shapes are
compatible when one is a suffix of the other. The smaller operand is
expanded over the extra leading axes and its gradient is summed back over
them. General numpy broadcasting (size-1 axes in the middle) is rejected.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

_DEFAULT_DTYPE = np.float32

# Tape stack: each entry is the ordered list of non-leaf tensors created
# while it was active. One tape per training step; never shared across
# threads.
_TAPES: list[list["Tensor"]] = [[]]
_GRAD_ENABLED = True


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    if dtype not in (np.float32, np.float64):
        raise ContractError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


def default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def precision(mode: str):
    """Temporarily switch the default dtype; mode is 'single' or 'double'."""
    global _DEFAULT_DTYPE
    if mode not in ("single", "double"):
        raise ContractError(f"precision mode must be single or double, got {mode!r}")
    prev = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.float64 if mode == "double" else np.float32
    try:
        yield
    finally:
        _DEFAULT_DTYPE = prev


@contextmanager
def no_grad():
    """Disable tape recording inside the block (sampling, evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextmanager
def new_tape():
    """Run the block on a fresh tape, discarded afterwards."""
    _TAPES.append([])
    try:
        yield
    finally:
        _TAPES.pop()


def clear_tape() -> None:
    """Drop all recorded ops; call between optimization steps."""
    _TAPES[-1].clear()


def tape_length() -> int:
    return len(_TAPES[-1])


class Tensor:
    """A dense n-d array with an optional gradient slot.

    Data is immutable by convention once the tensor participates in a
    graph; only ``grad`` accumulates. Leaf tensors created with
    ``requires_grad=True`` are the trainable parameters.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


def _record(out: Tensor, parents: Sequence[Tensor], bw: Callable[[np.ndarray], None]) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = bw
        _TAPES[-1].append(out)
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
    else:
        t.grad += g


def _check_same_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{op}: dtype mismatch {a.data.dtype} vs {b.data.dtype}")


def _suffix_pair(a: Tensor, b: Tensor, op: str):
    """Validate leading-dim broadcast; returns grad reducers for a and b."""
    sa, sb = a.shape, b.shape
    if sa == sb:
        return (lambda g: g), (lambda g: g)
    if len(sa) > len(sb) and sa[len(sa) - len(sb):] == sb:
        extra = len(sa) - len(sb)
        return (lambda g: g), (lambda g: g.sum(axis=tuple(range(extra))))
    if len(sb) > len(sa) and sb[len(sb) - len(sa):] == sa:
        extra = len(sb) - len(sa)
        return (lambda g: g.sum(axis=tuple(range(extra)))), (lambda g: g)
    raise ShapeError(f"{op}: shapes {sa} and {sb} differ beyond leading dims")


# ---------------------------------------------------------------------------
# elementwise suite


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "add")
    ra, rb = _suffix_pair(a, b, "add")
    out = Tensor(a.data + b.data, dtype=a.data.dtype)

    def bw(g):
        _accum(a, ra(g))
        _accum(b, rb(g))

    return _record(out, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "sub")
    ra, rb = _suffix_pair(a, b, "sub")
    out = Tensor(a.data - b.data, dtype=a.data.dtype)

    def bw(g):
        _accum(a, ra(g))
        _accum(b, rb(-g))

    return _record(out, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "mul")
    ra, rb = _suffix_pair(a, b, "mul")
    out = Tensor(a.data * b.data, dtype=a.data.dtype)

    def bw(g):
        _accum(a, ra(g * b.data))
        _accum(b, rb(g * a.data))

    return _record(out, (a, b), bw)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = Tensor(a.data * np.asarray(s, dtype=a.data.dtype), dtype=a.data.dtype)

    def bw(g):
        _accum(a, g * np.asarray(s, dtype=a.data.dtype))

    return _record(out, (a,), bw)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = Tensor(y, dtype=a.data.dtype)

    def bw(g):
        _accum(a, g * (1.0 - y * y))

    return _record(out, (a,), bw)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit (tanh approximation)."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)
    out = Tensor(y, dtype=a.data.dtype)

    def bw(g):
        # d/dx [0.5 x (1 + tanh(u))], u = c (x + 0.044715 x^3)
        du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
        _accum(a, g * d)

    return _record(out, (a,), bw)


def rms_norm(a: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize the last dimension to unit root-mean-square, then scale.

    The learned gain has the shape of the last dimension.
    """
    if gain.shape != a.shape[-1:]:
        raise ShapeError(f"rms_norm: gain shape {gain.shape} does not match last dim of {a.shape}")
    _check_same_dtype(a, gain, "rms_norm")
    x = a.data
    n = x.shape[-1]
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    xn = x / r
    out = Tensor(xn * gain.data, dtype=a.data.dtype)

    def bw(g):
        gg = g * gain.data
        _accum(a, gg / r - x * np.sum(gg * x, axis=-1, keepdims=True) / (n * r**3))
        gr = g * xn
        if gr.ndim > 1:
            gr = gr.reshape(-1, n).sum(axis=0)
        _accum(gain, gr)

    return _record(out, (a, gain), bw)


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum(), dtype=a.data.dtype)

    def bw(g):
        _accum(a, np.broadcast_to(g, a.shape).astype(a.data.dtype, copy=False))

    return _record(out, (a,), bw)


def mean_all(a: Tensor) -> Tensor:
    inv = np.asarray(1.0 / a.data.size, dtype=a.data.dtype)
    out = Tensor(a.data.mean(), dtype=a.data.dtype)

    def bw(g):
        _accum(a, np.broadcast_to(g * inv, a.shape).astype(a.data.dtype, copy=False))

    return _record(out, (a,), bw)


def mse(pred: Tensor, target: Tensor) -> Tensor:
    """Mean squared error over all elements, as a scalar tensor."""
    if pred.shape != target.shape:
        raise ShapeError(f"mse: shapes {pred.shape} and {target.shape} differ")
    _check_same_dtype(pred, target, "mse")
    d = pred.data - target.data
    out = Tensor(np.mean(d * d), dtype=pred.data.dtype)
    inv = np.asarray(2.0 / d.size, dtype=pred.data.dtype)

    def bw(g):
        gd = g * inv * d
        _accum(pred, gd)
        _accum(target, -gd)

    return _record(out, (pred, target), bw)


# ---------------------------------------------------------------------------
# structural ops


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = Tensor(a.data.reshape(shape), dtype=a.data.dtype)

    def bw(g):
        _accum(a, g.reshape(a.shape))

    return _record(out, (a,), bw)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)), dtype=a.data.dtype)

    def bw(g):
        _accum(a, g.transpose(inv))

    return _record(out, (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; either operand may carry equal leading batch dims.

    A stacked left operand against a 2-d right operand is flattened into a
    single GEMM, which is the hot path for linear layers.
    """
    _check_same_dtype(a, b, "matmul")
    sa, sb = a.shape, b.shape
    if len(sa) < 2 or len(sb) < 2:
        raise ShapeError(f"matmul: operands must be at least 2-d, got {sa} and {sb}")
    if sa[-1] != sb[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree for shapes {sa} and {sb}")
    if len(sb) == 2:
        m, k = int(np.prod(sa[:-1], dtype=np.int64)), sa[-1]
        y2 = a.data.reshape(m, k) @ b.data
        out = Tensor(y2.reshape(sa[:-1] + (sb[-1],)), dtype=a.data.dtype)

        def bw(g):
            g2 = g.reshape(m, sb[-1])
            if a.requires_grad:
                _accum(a, (g2 @ b.data.T).reshape(sa))
            if b.requires_grad:
                _accum(b, a.data.reshape(m, k).T @ g2)

        return _record(out, (a, b), bw)
    if len(sa) == 2 or sa[:-2] == sb[:-2]:
        out = Tensor(np.matmul(a.data, b.data), dtype=a.data.dtype)

        def bw(g):
            if a.requires_grad:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
                if len(sa) == 2 and len(sb) > 2:
                    ga = ga.reshape(-1, *sa).sum(axis=0) if ga.shape != sa else ga
                _accum(a, ga)
            if b.requires_grad:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                _accum(b, gb)

        return _record(out, (a, b), bw)
    raise ShapeError(f"matmul: leading dims of {sa} and {sb} differ")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return add(y, b) if b is not None else y


# ---------------------------------------------------------------------------
# attention primitives


def row_softmax(a: Tensor) -> Tensor:
    """Softmax over the last dimension, stabilized by row-max subtraction."""
    x = a.data
    if x.shape[-1] < 1:
        raise ShapeError("row_softmax: last dimension must be >= 1")
    if not np.isfinite(x).all():
        raise NumericError("row_softmax: input contains NaN or Inf")
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p, dtype=a.data.dtype)

    def bw(g):
        _accum(a, p * (g - np.sum(g * p, axis=-1, keepdims=True)))

    return _record(out, (a,), bw)


def apply_rotary(a: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate consecutive feature pairs of the last dim by per-position angles.

    cos/sin have shape [n_positions, dim/2] and are plain arrays (the
    table is deterministic, never learned). The rotation is linear, so the
    backward pass is the inverse rotation.
    """
    x = a.data
    if x.shape[-1] != 2 * cos.shape[-1] or x.shape[-2] != cos.shape[0]:
        raise ShapeError(
            f"apply_rotary: input {x.shape} incompatible with table {cos.shape}"
        )
    c = cos.astype(x.dtype, copy=False)
    s = sin.astype(x.dtype, copy=False)
    x1, x2 = x[..., 0::2], x[..., 1::2]
    y = np.empty_like(x)
    y[..., 0::2] = x1 * c - x2 * s
    y[..., 1::2] = x2 * c + x1 * s
    out = Tensor(y, dtype=a.data.dtype)

    def bw(g):
        g1, g2 = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = g1 * c + g2 * s
        gx[..., 1::2] = g2 * c - g1 * s
        _accum(a, gx)

    return _record(out, (a,), bw)


def scale_heads(a: Tensor, g: Tensor) -> Tensor:
    """Scale stacked per-head maps [..., H, N, M] by a gate vector [H]."""
    if g.data.ndim != 1 or a.data.ndim < 3 or a.shape[-3] != g.shape[0]:
        raise ShapeError(f"scale_heads: maps {a.shape} incompatible with gate {g.shape}")
    _check_same_dtype(a, g, "scale_heads")
    gb = g.data[:, None, None]
    out = Tensor(a.data * gb, dtype=a.data.dtype)

    def bw(grad):
        _accum(a, grad * gb)
        if g.requires_grad:
            axes = tuple(i for i in range(grad.ndim) if i != grad.ndim - 3)
            _accum(g, np.sum(grad * a.data, axis=axes))

    return _record(out, (a, g), bw)


def embed_rows(table: Tensor, idx) -> Tensor:
    """Gather rows of a parameter table by integer index array."""
    ii = np.asarray(idx, dtype=np.int64)
    if ii.min(initial=0) < 0 or (ii.size and ii.max() >= table.shape[0]):
        raise ContractError(f"embed_rows: index out of range for table of {table.shape[0]} rows")
    out = Tensor(table.data[ii], dtype=table.data.dtype)

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ii, g)
        _accum(table, gt)

    return _record(out, (table,), bw)


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor) -> None:
    """Populate grads of every requires_grad ancestor of a scalar loss.

    Replays the ambient tape in reverse creation order; nodes not
    reachable from the loss are skipped. Accumulation is additive, so a
    tensor used twice receives the sum of both branch gradients.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = _TAPES[-1]
    needed = {id(loss)}
    for node in reversed(tape):
        if id(node) in needed:
            for p in node._parents:
                needed.add(id(p))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape):
        if id(node) not in needed or node._backward is None:
            continue
        if node.grad is None:
            continue
        node._backward(node.grad)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    f must be scalar-valued and deterministic. The relative error per
    coordinate is |analytic - numeric| / (|analytic| + |numeric| + 1e-8).
    """
    x.requires_grad = True
    if not x.data.flags["C_CONTIGUOUS"]:
        x.data = np.ascontiguousarray(x.data)
    with new_tape():
        x.zero_grad()
        loss = f(x)
        backward(loss)
        analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(x).item()
            flat[i] = orig - eps
            lo = f(x).item()
            flat[i] = orig
            nflat[i] = (hi - lo) / (2 * eps)
    err = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-8)
    return float(err.max())


def randn(rng: np.random.Generator, shape: Iterable[int], dtype=None) -> Tensor:
    """Standard normal tensor drawn from an explicit generator."""
    return Tensor(rng.standard_normal(tuple(shape)), dtype=dtype or _DEFAULT_DTYPE)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=None) -> Tensor:
    """Truncated normal init (resample beyond 2 std), the default for weights."""
    shape = tuple(shape)
    vals = rng.standard_normal(shape)
    bad = np.abs(vals) > 2.0
    while bad.any():
        vals[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(vals) > 2.0
    return Tensor(vals * std, dtype=dtype or _DEFAULT_DTYPE)
