"""Define-by-run reverse-mode differentiation over numpy arrays.

A :class:`Tape` is created per training step.  Leaves created with
:meth:`Tape.param` are tracked; every op whose inputs include a tracked tensor
appends a node ``(op, inputs, ctx)`` to the tape, so the node list is in
topological order by construction.  :func:`backward` sweeps it in reverse and
looks up each op's vector-Jacobian product in :data:`GRADIENTS`.

Values are 32-bit by default.  ``with precision(64):`` switches new tensors to
64-bit, which is what the finite-difference checks run under.

Sparse products go through scipy's CSR kernel, which walks rows in order and
accumulates each row sequentially, so results do not depend on thread count.
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .sparse import SparseCSR

_DTYPE = {32: np.float32, 64: np.float64}
_state = {"dtype": np.float32, "debug": False}


def get_dtype():
    return _state["dtype"]


def set_precision(bits: int) -> None:
    if bits not in _DTYPE:
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    _state["dtype"] = _DTYPE[bits]


@contextmanager
def precision(bits: int):
    old = _state["dtype"]
    set_precision(bits)
    try:
        yield
    finally:
        _state["dtype"] = old


def set_debug(flag: bool) -> None:
    """When on, every op checks its output for NaN/Inf."""
    _state["debug"] = bool(flag)


@contextmanager
def debug_mode():
    old = _state["debug"]
    _state["debug"] = True
    try:
        yield
    finally:
        _state["debug"] = old


class Tensor:
    __slots__ = ("value", "requires_grad", "tape", "node", "name", "grad")

    def __init__(self, value, requires_grad=False, tape=None, node=-1, name=None):
        self.value = np.asarray(value)
        self.requires_grad = requires_grad
        self.tape = tape
        self.node = node
        self.name = name
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul_elem(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(value) -> Tensor:
    """Untracked tensor in the current precision."""
    return Tensor(np.asarray(value, dtype=get_dtype()))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


@dataclass
class Node:
    op: str
    inputs: tuple
    ctx: object


class Tape:
    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: list[Tensor] = []
        self.consumed = False

    def param(self, value, name=None) -> Tensor:
        t = Tensor(np.array(value, dtype=get_dtype()), requires_grad=True,
                   tape=self, node=len(self.nodes), name=name)
        self.nodes.append(Node("leaf", (), None))
        self.leaves.append(t)
        return t

    def record(self, op, inputs, value, ctx) -> Tensor:
        if self.consumed:
            raise RuntimeError("tape already consumed by backward(); build a new tape")
        out = Tensor(value, requires_grad=True, tape=self, node=len(self.nodes))
        self.nodes.append(Node(op, tuple(inputs), ctx))
        return out

    def __len__(self):
        return len(self.nodes)


class ContractError(ValueError):
    pass


def _emit(op: str, inputs: Sequence[Tensor], value, ctx) -> Tensor:
    if _state["debug"] and not np.all(np.isfinite(value)):
        raise FloatingPointError(f"non-finite output from {op}")
    tapes = {t.tape for t in inputs if t.requires_grad}
    if not tapes:
        return Tensor(value)
    if len(tapes) > 1:
        raise ContractError(f"{op}: inputs belong to different tapes")
    return tapes.pop().record(op, inputs, value, ctx)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- vector-Jacobian products, keyed by op name ------------------------------
# Each entry maps (ctx, upstream gradient) to one gradient per input (None for
# inputs that never need one).

GRADIENTS: dict[str, Callable] = {}


def _vjp(name):
    def deco(fn):
        GRADIENTS[name] = fn
        return fn
    return deco


@_vjp("add")
def _add_grad(ctx, g):
    sa, sb = ctx
    return _unbroadcast(g, sa), _unbroadcast(g, sb)


@_vjp("sub")
def _sub_grad(ctx, g):
    sa, sb = ctx
    return _unbroadcast(g, sa), -_unbroadcast(g, sb)


@_vjp("mul")
def _mul_grad(ctx, g):
    a, b = ctx
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


@_vjp("scale")
def _scale_grad(ctx, g):
    return (g * ctx,)


@_vjp("matmul")
def _matmul_grad(ctx, g):
    a, b = ctx
    return g @ b.T, a.T @ g


@_vjp("spmm")
def _spmm_grad(ctx, g):
    return (ctx.T @ g,)


@_vjp("spmm_values")
def _spmm_values_grad(ctx, g):
    rows, cols, mat, b = ctx
    gv = np.einsum("ij,ij->i", g[rows], b[cols])
    return gv, mat.T @ g


@_vjp("tanh")
def _tanh_grad(ctx, g):
    return (g * (1.0 - ctx * ctx),)


@_vjp("relu")
def _relu_grad(ctx, g):
    return (g * ctx,)


@_vjp("sigmoid")
def _sigmoid_grad(ctx, g):
    return (g * ctx * (1.0 - ctx),)


@_vjp("exp")
def _exp_grad(ctx, g):
    return (g * ctx,)


@_vjp("log")
def _log_grad(ctx, g):
    return (g / ctx,)


@_vjp("inv_sqrt")
def _inv_sqrt_grad(ctx, g):
    x, out = ctx
    return (g * -0.5 * out * out * out,)


@_vjp("layernorm")
def _layernorm_grad(ctx, g):
    xhat, inv_std, gain = ctx
    dxhat = g * gain
    dx = inv_std * (dxhat - dxhat.mean(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
    return dx, (g * xhat).sum(axis=0), g.sum(axis=0)


@_vjp("row_gather")
def _gather_grad(ctx, g):
    idx, shape = ctx
    out = np.zeros(shape, dtype=g.dtype)
    np.add.at(out, idx, g)
    return (out,)


@_vjp("segment_sum")
def _segment_grad(ctx, g):
    return (g[ctx],)


@_vjp("sum")
def _sum_grad(ctx, g):
    shape, axis = ctx
    if axis is None:
        return (np.broadcast_to(g, shape).copy(),)
    return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)


@_vjp("concat_rows")
def _concat_grad(ctx, g):
    return tuple(np.split(g, ctx[:-1], axis=0))


@_vjp("slice_rows")
def _slice_grad(ctx, g):
    lo, hi, shape = ctx
    out = np.zeros(shape, dtype=g.dtype)
    out[lo:hi] = g
    return (out,)


@_vjp("transpose")
def _transpose_grad(ctx, g):
    return (g.T,)


@_vjp("reshape")
def _reshape_grad(ctx, g):
    return (g.reshape(ctx),)


@_vjp("normalize_rows")
def _normalize_grad(ctx, g):
    y, inv = ctx
    proj = (g * y).sum(axis=1, keepdims=True)
    return ((g - y * proj) * inv,)


@_vjp("logsumexp")
def _lse_grad(ctx, g):
    return (np.expand_dims(g, 1) * ctx,)


# -- forward ops -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("add", (a, b), a.value + b.value, (a.shape, b.shape))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("sub", (a, b), a.value - b.value, (a.shape, b.shape))


def mul_elem(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _emit("mul", (a, b), a.value * b.value, (a.value, b.value))


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = x.value.dtype.type(c)
    return _emit("scale", (x,), x.value * c, c)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    return _emit("matmul", (a, b), a.value @ b.value, (a.value, b.value))


@dataclass
class TracedCSR:
    """Fixed sparsity pattern whose values are a tracked 1-D tensor."""

    pattern: SparseCSR
    vals: Tensor

    @property
    def shape(self):
        return self.pattern.shape

    def detach(self) -> SparseCSR:
        return self.pattern.with_values(self.vals.value)


def spmm(a, b) -> Tensor:
    """Sparse-dense product.  ``a`` is a constant :class:`SparseCSR` or a
    :class:`TracedCSR`, in which case gradients also reach its values."""
    b = as_tensor(b)
    if b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"spmm dimension mismatch: {a.shape} @ {b.shape}")
    dtype = b.value.dtype
    if isinstance(a, TracedCSR):
        p = a.pattern
        mat = p.with_values(a.vals.value).to_scipy(dtype)
        out = np.asarray(mat @ b.value, dtype=dtype)
        ctx = (p.row_ids(), p.col_idx, mat, b.value)
        return _emit("spmm_values", (a.vals, b), out, ctx)
    mat = a.to_scipy(dtype)
    return _emit("spmm", (b,), np.asarray(mat @ b.value, dtype=dtype), mat)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.value)
    return _emit("tanh", (x,), out, out)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = (x.value > 0).astype(x.value.dtype)
    return _emit("relu", (x,), x.value * mask, mask)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    v = x.value
    # split by sign to avoid overflow in exp
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return _emit("sigmoid", (x,), out, out)


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.value)
    return _emit("exp", (x,), out, out)


def log(x) -> Tensor:
    x = as_tensor(x)
    return _emit("log", (x,), np.log(x.value), x.value)


def inv_sqrt(x) -> Tensor:
    """x**-0.5 elementwise, with 0 mapped to 0 (and zero gradient there)."""
    x = as_tensor(x)
    out = np.zeros_like(x.value)
    pos = x.value > 0
    out[pos] = x.value[pos] ** -0.5
    return _emit("inv_sqrt", (x,), out, (x.value, out))


def layernorm(x, gain, shift, eps: float = 1e-5) -> Tensor:
    x, gain, shift = as_tensor(x), as_tensor(gain), as_tensor(shift)
    v = x.value
    mu = v.mean(axis=1, keepdims=True)
    var = ((v - mu) ** 2).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (v - mu) * inv_std
    out = xhat * gain.value + shift.value
    return _emit("layernorm", (x, gain, shift), out, (xhat, inv_std, gain.value))


def row_gather(x, idx) -> Tensor:
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    n = x.shape[0]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise IndexError(f"row_gather index out of range for {n} rows")
    idx = np.where(idx < 0, idx + n, idx)
    return _emit("row_gather", (x,), x.value[idx], (idx, x.shape))


def segment_sum(x, seg, n_seg: int) -> Tensor:
    """out[s] = sum of x[j] over j with seg[j] == s (first axis)."""
    x = as_tensor(x)
    seg = np.asarray(seg, dtype=np.int64)
    out = np.zeros((n_seg,) + x.shape[1:], dtype=x.value.dtype)
    np.add.at(out, seg, x.value)
    return _emit("segment_sum", (x,), out, seg)


def sum(x, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    return _emit("sum", (x,), np.asarray(x.value.sum(axis=axis)), (x.shape, axis))


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    n = x.value.size if axis is None else x.shape[axis]
    return scale(sum(x, axis), 1.0 / n)


def concat_rows(xs: Sequence) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    bounds = np.cumsum([x.shape[0] for x in xs])
    out = np.concatenate([x.value for x in xs], axis=0)
    return _emit("concat_rows", xs, out, bounds)


def slice_rows(x, lo: int, hi: int) -> Tensor:
    x = as_tensor(x)
    return _emit("slice_rows", (x,), x.value[lo:hi], (lo, hi, x.shape))


def transpose(x) -> Tensor:
    x = as_tensor(x)
    return _emit("transpose", (x,), x.value.T, None)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _emit("reshape", (x,), x.value.reshape(shape), x.shape)


def normalize_rows(x) -> Tensor:
    """Scale each row to unit L2 norm; all-zero rows stay zero."""
    x = as_tensor(x)
    norm = np.sqrt((x.value * x.value).sum(axis=1, keepdims=True))
    inv = np.zeros_like(norm)
    nz = norm > 0
    inv[nz] = 1.0 / norm[nz]
    y = x.value * inv
    return _emit("normalize_rows", (x,), y, (y, inv))


def logsumexp(x) -> Tensor:
    """Row-wise log-sum-exp of a 2-D tensor."""
    x = as_tensor(x)
    m = x.value.max(axis=1, keepdims=True)
    e = np.exp(x.value - m)
    s = e.sum(axis=1, keepdims=True)
    out = (m + np.log(s))[:, 0]
    return _emit("logsumexp", (x,), out, e / s)


def backward(tape: Tape, root: Tensor) -> dict:
    """Reverse sweep from a scalar ``root``.

    Returns ``{leaf: gradient}`` for every tracked leaf on the tape and stores
    the same array on ``leaf.grad``.  Leaves that ``root`` does not depend on
    get a zero gradient.  A tape can be swept once; a second call raises.
    """
    if root.value.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")
    if tape.consumed:
        raise RuntimeError("backward() already ran on this tape")
    tape.consumed = True
    adj: dict[int, np.ndarray] = {}
    if root.requires_grad and root.tape is tape:
        adj[root.node] = np.ones(root.shape, dtype=root.value.dtype)
    for i in range(len(tape.nodes) - 1, -1, -1):
        g = adj.get(i)
        node = tape.nodes[i]
        if g is None or node.op == "leaf":
            continue
        grads = GRADIENTS[node.op](node.ctx, g)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            gi = np.asarray(gi, dtype=inp.value.dtype).reshape(inp.shape)
            if inp.node in adj:
                adj[inp.node] = adj[inp.node] + gi
            else:
                adj[inp.node] = gi
    out = {}
    for leaf in tape.leaves:
        g = adj.get(leaf.node)
        leaf.grad = np.zeros_like(leaf.value) if g is None else g
        out[leaf] = leaf.grad
    return out
