"""Reverse-mode automatic differentiation over dense numpy buffers.

A Tensor wraps a contiguous row-major ndarray (float32 or float64). Ops
record nodes on the active GradTape when any input requires gradients;
backward() replays the tape in reverse. detach() returns a value-identical
tensor with no tape ancestry, and no_grad() suppresses recording entirely,
which is how iterative forward passes run in pure inference mode.

Buffers are immutable after construction except for .grad accumulation, so
detached tensors may safely share storage. A tape is confined to one
logical thread and its nodes are dropped after backward().
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels
from .errors import ContractError, NumericError, ShapeError

FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        if not arr.flags["C_CONTIGUOUS"]:
            # 0-d scalars stay 0-d; ascontiguousarray would promote them.
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def seeded_rng(seed: int) -> np.random.Generator:
    """Deterministic generator: identical seeds yield identical streams."""
    return np.random.default_rng(seed)


# --------------------------------------------------------------------------
# Tape machinery
# --------------------------------------------------------------------------

class Node:
    __slots__ = ("output", "inputs", "backward_fn")

    def __init__(self, output: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable):
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


class GradTape:
    """Ordered record of differentiable ops; topological by construction."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "GradTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False


class no_grad:
    """Context that disables tape recording; ops produce plain values."""

    def __enter__(self):
        _TAPE_STACK.append(None)
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False


_TAPE_STACK: list[GradTape | None] = []


def _active_tape() -> GradTape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _record(out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(Node(out, inputs, backward_fn))
    return out


def backward(tape: GradTape, loss: Tensor, params: Iterable[Tensor] = ()) -> None:
    """Populate .grad on every tape-leaf tensor reachable from loss.

    Gradients accumulate into existing .grad buffers (call zero_grad between
    steps). Params that the loss never touched get zero grads. The tape is
    freed afterwards.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(n.output) for n in tape.nodes}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig
                holders[key] = inp
    for key, g in grads.items():
        t = holders[key]
        if id(t) in produced:
            continue  # non-leaf left over only if loss itself is mid-graph
        t.grad = g if t.grad is None else t.grad + g
    for p in params:
        if p.requires_grad and p.grad is None:
            p.grad = np.zeros_like(p.data)
    tape.nodes.clear()


# --------------------------------------------------------------------------
# Broadcasting helpers
# --------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] > 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --------------------------------------------------------------------------
# Primitive ops
# --------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)
    return _record(
        out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)
    return _record(
        out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    out = Tensor(a.data * c)
    return _record(out, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading batch dims of `a` collapse into one GEMM when
    `b` is 2-D, which is the layout every projection in the model uses."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs 2-D+ operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    if a.dtype != b.dtype:
        raise ShapeError(f"matmul dtypes differ: {a.dtype} vs {b.dtype}")
    if b.ndim == 2:
        lead = a.shape[:-1]
        a2 = a.data.reshape(-1, a.shape[-1])
        out_data = a2 @ b.data
        out = Tensor(out_data.reshape(*lead, b.shape[-1]))

        def bwd(g):
            g2 = g.reshape(-1, g.shape[-1])
            da = (g2 @ b.data.T).reshape(a.shape)
            db = a2.T @ g2
            return da, db

        return _record(out, (a, b), bwd)

    out = Tensor(np.matmul(a.data, b.data))

    def bwd(g):
        da = _unbroadcast(np.matmul(g, b.data.swapaxes(-1, -2)), a.shape)
        db = _unbroadcast(np.matmul(a.data.swapaxes(-1, -2), g), b.shape)
        return da, db

    return _record(out, (a, b), bwd)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    out = Tensor(np.ascontiguousarray(np.transpose(a.data, axes)))
    inv = tuple(np.argsort(axes))
    return _record(out, (a,), lambda g: (np.ascontiguousarray(np.transpose(g, inv)),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ContractError("concat of an empty sequence")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, offsets, axis=axis))

    return _record(out, tuple(tensors), bwd)


def embedding_lookup(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids)
    out = Tensor(table.data[ids])

    def bwd(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (dt,)

    return _record(out, (table,), bwd)


def silu(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(a.data * s)

    def bwd(g):
        return (g * (s * (1.0 + a.data * (1.0 - s))),)

    return _record(out, (a,), bwd)


def softmax_lastdim(a: Tensor) -> Tensor:
    """Stable softmax over the last axis: each slice sums to one."""
    if a.shape[-1] < 1:
        raise ShapeError("softmax over an empty last dimension")
    m = a.data.max(axis=-1, keepdims=True)
    e = np.exp(a.data - m)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p)

    def bwd(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _record(out, (a,), bwd)


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(np.asarray(a.data.sum(), dtype=a.dtype))
    return _record(out, (a,), lambda g: (np.broadcast_to(g, a.shape).astype(a.dtype),))


def mean_all(a: Tensor) -> Tensor:
    n = a.size
    out = Tensor(np.asarray(a.data.mean(), dtype=a.dtype))

    def bwd(g):
        return ((np.broadcast_to(g, a.shape) / n).astype(a.dtype),)

    return _record(out, (a,), bwd)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer targets under logits.

    logits: [..., V]; targets: integer array matching the leading shape.
    Fused log-softmax keeps the op stable for large logits.
    """
    targets = np.asarray(targets)
    v = logits.shape[-1]
    l2 = logits.data.reshape(-1, v)
    t = targets.reshape(-1)
    if t.shape[0] != l2.shape[0]:
        raise ShapeError(f"targets {targets.shape} do not match logits {logits.shape}")
    m = l2.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(l2 - m).sum(axis=-1))
    nll = lse - l2[np.arange(t.shape[0]), t]
    out = Tensor(np.asarray(nll.mean(), dtype=logits.dtype))

    def bwd(g):
        p = np.exp(l2 - lse[:, None])
        p[np.arange(t.shape[0]), t] -= 1.0
        p *= g / t.shape[0]
        return (p.reshape(logits.shape).astype(logits.dtype),)

    return _record(out, (logits,), bwd)


def detach(a: Tensor) -> Tensor:
    """Value-identical tensor with no tape ancestry (stop-gradient)."""
    return Tensor(a.data)


# --------------------------------------------------------------------------
# Kernel-backed ops
# --------------------------------------------------------------------------

def rmsnorm(x: Tensor, gain: Tensor, eps: float) -> Tensor:
    d = x.shape[-1]
    x2 = x.data.reshape(-1, d)
    y, inv = kernels.rmsnorm_forward(x2, gain.data, eps)
    out = Tensor(y.reshape(x.shape))

    def bwd(g):
        dx, dgain = kernels.rmsnorm_backward(x2, gain.data, inv, g.reshape(-1, d))
        return dx.reshape(x.shape), dgain

    return _record(out, (x, gain), bwd)


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate dim-pairs of x [B, T, H, hd] by the tabulated angles for each
    position. The backward rotation is the inverse (transpose) rotation."""
    out = Tensor(kernels.rope_apply(x.data, cos, sin))

    def bwd(g):
        return (kernels.rope_apply(g, cos, sin, inverse=True),)

    return _record(out, (x,), bwd)


def attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    *,
    kind: int,
    n_past: int,
    n_kv_heads: int,
    extra_mask: np.ndarray | None = None,
) -> Tensor:
    """Grouped-query scaled dot-product attention.

    q: [B, Hq, Tq, hd]; k, v: [B, Hkv, S, hd]. `kind` is kernels.WITH_SELF
    or kernels.NO_SELF; `n_past` counts key slots strictly before query 0.
    A query row with nothing visible attends the zero dummy KV: its output
    (and all its gradients) are exactly zero. An empty key set short-circuits
    to zeros without touching the kernels.
    """
    b, hq, tq, hd = q.shape
    if k.shape != v.shape:
        raise ShapeError(f"k/v shapes differ: {k.shape} vs {v.shape}")
    if k.shape[1] != n_kv_heads or hq % n_kv_heads != 0:
        raise ShapeError(
            f"query heads {hq} not a multiple of kv heads {k.shape[1]} (expected {n_kv_heads})"
        )
    if extra_mask is not None and extra_mask.shape != (tq, k.shape[2]):
        raise ShapeError(
            f"extra mask shape {extra_mask.shape} does not match ({tq}, {k.shape[2]})"
        )
    if k.shape[2] == 0:
        return Tensor(np.zeros_like(q.data))
    group = hq // n_kv_heads
    scl = 1.0 / float(np.sqrt(hd))
    out = Tensor(kernels.attention_forward(q.data, k.data, v.data, group, scl, n_past, kind, extra_mask))

    def bwd(g):
        return kernels.attention_backward(
            q.data, k.data, v.data, g, group, scl, n_past, kind, extra_mask
        )

    return _record(out, (q, k, v), bwd)


# --------------------------------------------------------------------------
# Gradient checking
# --------------------------------------------------------------------------

def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    n_samples: int = 50,
    rng: np.random.Generator | None = None,
    atol: float = 1e-8,
) -> float:
    """Max relative error between tape gradients of f() and central
    differences over sampled parameter coordinates.

    f must be deterministic and is re-evaluated 2*n_samples times; use
    float64 params. Relative error per coordinate is
    |analytic - central| / (|central| + 1e-12); absolute differences below
    `atol` count as agreement, since a central difference of a float64 loss
    cannot resolve gradients that small (the secant moves the loss by less
    than its own rounding).
    """
    rng = rng or seeded_rng(0)
    for p in params:
        p.zero_grad()
    with GradTape() as tape:
        loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError("finite_diff_check: f returned a non-finite value")
    backward(tape, loss, params)
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for _ in range(n_samples):
        pi = int(rng.integers(len(params)))
        p = params[pi]
        ci = int(rng.integers(p.size))
        orig = p.data.flat[ci]
        p.data.flat[ci] = orig + eps
        with no_grad():
            up = float(f().data)
        p.data.flat[ci] = orig - eps
        with no_grad():
            down = float(f().data)
        p.data.flat[ci] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError("finite_diff_check: f returned a non-finite value")
        central = (up - down) / (2.0 * eps)
        diff = abs(analytic[pi].flat[ci] - central)
        if diff < atol:
            continue
        worst = max(worst, diff / (abs(central) + 1e-12))
    return worst
