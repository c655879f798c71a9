"""Tape-based reverse-mode differentiation over numpy tensors.

Every op accepts plain ``ndarray`` inputs or :class:`Variable` inputs.  With no
``Variable`` among the inputs the op is just the numpy call, so forward-only
code paths (velocity maps, evaluation renders) run at numpy speed.  Inside an
active :class:`Tape`, any op touching a gradient-carrying ``Variable`` is
recorded together with its vector-Jacobian product.

    with Tape() as tape:
        x = Variable(np.array([3.0]), requires_grad=True)
        y = ad.sum(x * x)
    grads = backward(tape, y)     # grads[x] == 6

The primitive set is deliberately small (arithmetic, exp/log/pow, sum, matmul,
trilinear gather, softplus, norm, stop-gradient) plus structural ops
(indexing, reshape, stack, where, clip) and sin/cos for rotations.
"""
from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Variable", "Tape", "backward", "finite_diff_check", "GradientError",
    "value", "stop_gradient", "add", "sub", "mul", "div", "neg", "exp", "log",
    "pow", "sqrt", "sin", "cos", "softplus", "sigmoid", "sum", "mean",
    "matmul", "norm", "clip", "where", "reshape", "stack", "concatenate",
    "expand_dims", "swapaxes", "getitem", "trilinear_gather", "set_debug",
]


class GradientError(RuntimeError):
    """Raised for misuse of the tape (non-scalar output, non-finite probes)."""


_state = threading.local()
_tape_ids = itertools.count(1)
_DEBUG = False


def set_debug(flag: bool) -> None:
    """Check every recorded value for NaN (slow)."""
    global _DEBUG
    _DEBUG = bool(flag)


def _active_tape():
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Variable:
    __array_priority__ = 1000
    __hash__ = object.__hash__

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.tape_id: int | None = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Variable{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return neg(self)
    def __pow__(self, p): return pow(self, p)
    def __matmul__(self, o): return matmul(self, o)
    def __rmatmul__(self, o): return matmul(o, self)
    def __getitem__(self, idx): return getitem(self, idx)


@dataclass
class _Record:
    op: str
    out: Variable
    parents: tuple
    vjp: Callable


class Tape:
    """Ordered record of primitive ops; creation order is a topological order."""

    def __init__(self):
        self.id = next(_tape_ids)
        self.records: list[_Record] = []

    def __enter__(self):
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def __len__(self):
        return len(self.records)


def value(x):
    return x.value if isinstance(x, Variable) else x


def _is_var(x) -> bool:
    return isinstance(x, Variable)


def _tracked(x) -> bool:
    return isinstance(x, Variable) and x.requires_grad


def _emit(op: str, out_value, parents: Sequence, vjp: Callable):
    tape = _active_tape()
    out = Variable(out_value)
    if tape is not None and any(_tracked(p) for p in parents):
        if _DEBUG and not np.all(np.isfinite(out.value)):
            raise GradientError(f"non-finite value produced by {op}")
        out.requires_grad = True
        out.tape_id = tape.id
        tape.records.append(_Record(op, out, tuple(parents), vjp))
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(tape: Tape, output: Variable) -> dict:
    """Propagate adjoints from a scalar ``output`` back through ``tape``.

    Returns ``{leaf: gradient}`` for every gradient-carrying leaf reached and
    also stores the result in ``leaf.grad``.
    """
    if not isinstance(output, Variable) or output.value.size != 1:
        raise GradientError("backward() needs a scalar Variable output")
    adj: dict[int, np.ndarray] = {id(output): np.ones_like(output.value)}
    produced = {id(r.out) for r in tape.records}
    leaves: dict[int, Variable] = {}
    if output.requires_grad and id(output) not in produced:
        leaves[id(output)] = output
    for rec in reversed(tape.records):
        g = adj.pop(id(rec.out), None)
        if g is None:
            continue
        grads = rec.vjp(g)
        for p, gp in zip(rec.parents, grads):
            if gp is None or not _tracked(p):
                continue
            gp = _unbroadcast(np.asarray(gp, dtype=np.float64), p.value.shape)
            k = id(p)
            if k in adj:
                adj[k] = adj[k] + gp
            else:
                adj[k] = gp
            if k not in produced:
                leaves[k] = p
    result = {}
    for k, leaf in leaves.items():
        g = adj.get(k, np.zeros_like(leaf.value))
        leaf.grad = g
        result[leaf] = g
    return result


# --------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b):
    if not (_is_var(a) or _is_var(b)):
        return np.add(a, b)
    return _emit("add", value(a) + value(b), (a, b), lambda g: (g, g))


def sub(a, b):
    if not (_is_var(a) or _is_var(b)):
        return np.subtract(a, b)
    return _emit("sub", value(a) - value(b), (a, b), lambda g: (g, -g))


def neg(a):
    if not _is_var(a):
        return np.negative(a)
    return _emit("neg", -a.value, (a,), lambda g: (-g,))


def mul(a, b):
    if not (_is_var(a) or _is_var(b)):
        return np.multiply(a, b)
    av, bv = value(a), value(b)
    return _emit("mul", av * bv, (a, b), lambda g: (g * bv, g * av))


def div(a, b):
    if not (_is_var(a) or _is_var(b)):
        return np.divide(a, b)
    av, bv = value(a), value(b)
    out = av / bv
    return _emit("div", out, (a, b), lambda g: (g / bv, -g * out / bv))


def exp(a):
    if not _is_var(a):
        return np.exp(a)
    out = np.exp(a.value)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a):
    if not _is_var(a):
        return np.log(a)
    av = a.value
    return _emit("log", np.log(av), (a,), lambda g: (g / av,))


def pow(a, p: float):
    if not _is_var(a):
        return np.power(a, p)
    av = a.value
    return _emit("pow", av ** p, (a,), lambda g: (g * p * av ** (p - 1),))


def sqrt(a):
    return pow(a, 0.5)


def sin(a):
    if not _is_var(a):
        return np.sin(a)
    av = a.value
    return _emit("sin", np.sin(av), (a,), lambda g: (g * np.cos(av),))


def cos(a):
    if not _is_var(a):
        return np.cos(a)
    av = a.value
    return _emit("cos", np.cos(av), (a,), lambda g: (-g * np.sin(av),))


def _np_softplus(x):
    return np.logaddexp(0.0, x)


def _np_sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def softplus(a):
    """log(1 + exp(a)), overflow-safe."""
    if not _is_var(a):
        return _np_softplus(a)
    av = a.value
    return _emit("softplus", _np_softplus(av), (a,), lambda g: (g * _np_sigmoid(av),))


def sigmoid(a):
    # composed: sigmoid(a) = exp(-softplus(-a))
    return exp(neg(softplus(neg(a))))


def stop_gradient(a):
    """Value passes through unchanged; adjoint is dropped."""
    if not _is_var(a):
        return a
    return Variable(a.value)


# --------------------------------------------------------------------------
# reductions and linear algebra

def _np_sum(x, axis, keepdims):
    # numpy's reduce is slow over short axes; BLAS and slice adds are not
    x = np.asarray(x)
    if isinstance(axis, (int, np.integer)) and x.ndim > 1 and x.shape[axis] <= 16:
        ax = axis % x.ndim
        if ax == x.ndim - 1 and x.dtype == np.float64:
            out = x @ np.ones(x.shape[-1])
        else:
            out = x.take(0, axis=ax).copy()
            for i in range(1, x.shape[ax]):
                out += x.take(i, axis=ax)
        return np.expand_dims(out, ax) if keepdims else out
    return np.sum(x, axis=axis, keepdims=keepdims)


def sum(a, axis=None, keepdims: bool = False):
    if not _is_var(a):
        return _np_sum(a, axis, keepdims)
    shape = a.value.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _emit("sum", _np_sum(a.value, axis, keepdims), (a,), vjp)


def mean(a, axis=None, keepdims: bool = False):
    n = value(a).size if axis is None else np.prod([value(a).shape[i] for i in np.atleast_1d(axis)])
    return div(sum(a, axis=axis, keepdims=keepdims), float(n))


def matmul(a, b):
    if not (_is_var(a) or _is_var(b)):
        return np.matmul(a, b)
    av, bv = value(a), value(b)

    def vjp(g):
        a2 = av[None, :] if av.ndim == 1 else av
        b2 = bv[:, None] if bv.ndim == 1 else bv
        g2 = g
        if bv.ndim == 1:
            g2 = g2[..., None]
        if av.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        ga = np.matmul(g2, np.swapaxes(b2, -1, -2))
        gb = np.matmul(np.swapaxes(a2, -1, -2), g2)
        ga = _unbroadcast(ga, a2.shape).reshape(av.shape)
        gb = _unbroadcast(gb, b2.shape).reshape(bv.shape)
        return ga, gb

    return _emit("matmul", np.matmul(av, bv), (a, b), vjp)


def norm(a, axis=-1, keepdims: bool = False):
    """Euclidean norm along ``axis``; zero vectors get a zero subgradient."""
    if not _is_var(a):
        return np.linalg.norm(a, axis=axis, keepdims=keepdims)
    av = a.value
    n = np.sqrt(np.sum(av * av, axis=axis, keepdims=True))

    def vjp(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        safe = np.where(n > 0, n, 1.0)
        return (gk * np.where(n > 0, av / safe, 0.0),)

    out = n if keepdims else np.squeeze(n, axis=axis)
    return _emit("norm", out, (a,), vjp)


def clip(a, lo=None, hi=None):
    if not _is_var(a):
        return np.clip(a, lo, hi)
    av = a.value
    out = np.clip(av, lo, hi)
    passthrough = out == av
    return _emit("clip", out, (a,), lambda g: (g * passthrough,))


def where(cond, a, b):
    """Select by a constant boolean mask."""
    cond = np.asarray(cond, dtype=bool)
    if not (_is_var(a) or _is_var(b)):
        return np.where(cond, a, b)
    return _emit("where", np.where(cond, value(a), value(b)), (a, b),
                 lambda g: (np.where(cond, g, 0.0), np.where(cond, 0.0, g)))


# --------------------------------------------------------------------------
# structural

def reshape(a, shape):
    if not _is_var(a):
        return np.reshape(a, shape)
    src = a.value.shape
    return _emit("reshape", a.value.reshape(shape), (a,), lambda g: (g.reshape(src),))


def expand_dims(a, axis):
    if not _is_var(a):
        return np.expand_dims(a, axis)
    src = a.value.shape
    return _emit("expand_dims", np.expand_dims(a.value, axis), (a,), lambda g: (g.reshape(src),))


def swapaxes(a, i, j):
    if not _is_var(a):
        return np.swapaxes(a, i, j)
    return _emit("swapaxes", np.swapaxes(a.value, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def _basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis or p is None for p in parts)


def getitem(a, idx):
    if not _is_var(a):
        return a[idx]
    src = a.value.shape

    def vjp(g):
        full = np.zeros(src)
        if _basic_index(idx):
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _emit("getitem", a.value[idx], (a,), vjp)


def stack(items, axis=0):
    items = list(items)
    if not any(_is_var(x) for x in items):
        return np.stack(items, axis=axis)
    vals = [np.asarray(value(x), dtype=np.float64) for x in items]
    out = np.stack(vals, axis=axis)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(items)))

    return _emit("stack", out, tuple(items), vjp)


def concatenate(items, axis=0):
    items = list(items)
    if not any(_is_var(x) for x in items):
        return np.concatenate(items, axis=axis)
    vals = [np.asarray(value(x), dtype=np.float64) for x in items]
    out = np.concatenate(vals, axis=axis)
    cuts = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _emit("concatenate", out, tuple(items), vjp)


# --------------------------------------------------------------------------
# trilinear gather

_CORNERS = np.array(list(itertools.product((0, 1), repeat=3)), dtype=np.int64)


def _trilinear_setup(shape, coords):
    res = np.array(shape[:3])
    base = np.clip(np.floor(coords).astype(np.int64), 0, res - 2)
    frac = coords - base
    strides = np.array([res[1] * res[2], res[2], 1])
    flat = (base @ strides)[None, :] + (_CORNERS @ strides)[:, None]
    both = np.stack([1.0 - frac, frac])  # (2, N, 3)
    wk = np.stack([both[_CORNERS[:, a], :, a] for a in range(3)], axis=-1)
    return flat, wk  # (8, N), (8, N, 3)


def trilinear_gather(grid, coords):
    """Interpolate ``grid`` (X, Y, Z, C) at fractional voxel indices ``coords`` (N, 3).

    Coordinates must lie in ``[0, res-1]`` per axis; callers mask points
    outside the lattice.  Differentiable w.r.t. both grid values and coords.
    """
    gv = value(grid)
    cv = np.asarray(value(coords), dtype=np.float64)
    C = gv.shape[3]
    flat_grid = gv.reshape(-1, C)
    flat, wk = _trilinear_setup(gv.shape, cv)
    w = wk[..., 0] * wk[..., 1] * wk[..., 2]  # (8, N)
    corner_vals = flat_grid[flat]  # (8, N, C)
    out = np.einsum("kn,knc->nc", w, corner_vals)
    if not (_is_var(grid) or _is_var(coords)):
        return out

    def vjp(g):
        ggrid = None
        gcoords = None
        if _tracked(grid):
            idx = flat.reshape(-1)
            acc = np.empty((flat_grid.shape[0], C))
            wg = (w[:, :, None] * g[None, :, :]).reshape(-1, C)
            for c in range(C):
                acc[:, c] = np.bincount(idx, weights=wg[:, c], minlength=flat_grid.shape[0])
            ggrid = acc.reshape(gv.shape)
        if _tracked(coords):
            dot = np.einsum("knc,nc->kn", corner_vals, g)  # (8, N)
            gcoords = np.zeros_like(cv)
            sign = np.where(_CORNERS == 1, 1.0, -1.0)  # (8, 3)
            for axis in range(3):
                others = [a for a in range(3) if a != axis]
                dw = sign[:, axis, None] * wk[:, :, others[0]] * wk[:, :, others[1]]
                gcoords[:, axis] = (dw * dot).sum(axis=0)
        return ggrid, gcoords

    return _emit("trilinear_gather", out, (grid, coords), vjp)


# --------------------------------------------------------------------------
# finite-difference verifier

def finite_diff_check(f: Callable, x: np.ndarray, step: float = 1e-5,
                      indices: Sequence[int] | None = None) -> float:
    """Max relative error between tape gradient and central differences.

    ``f`` maps a Variable to a scalar Variable.  ``indices`` restricts the
    probe to selected flat components (all by default).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(x, dtype=np.float64)
    leaf = Variable(x.copy(), requires_grad=True)
    with Tape() as tape:
        out = f(leaf)
    if not np.all(np.isfinite(value(out))):
        raise GradientError("f is non-finite at x")
    analytic = backward(tape, out).get(leaf, np.zeros_like(x)).reshape(-1)
    probe = range(x.size) if indices is None else indices
    worst = 0.0
    for i in probe:
        xp = x.copy().reshape(-1)
        xm = x.copy().reshape(-1)
        xp[i] += step
        xm[i] -= step
        fp = float(np.asarray(value(f(Variable(xp.reshape(x.shape))))).reshape(()))
        fm = float(np.asarray(value(f(Variable(xm.reshape(x.shape))))).reshape(()))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise GradientError(f"f is non-finite at probe component {i}")
        numeric = (fp - fm) / (2 * step)
        err = abs(analytic[i] - numeric) / (abs(analytic[i]) + 1e-8)
        worst = max(worst, err)
    return worst
