"""Tape-based reverse-mode differentiation for the handful of array
operations the mesh networks use, plus a finite-difference checker.

Usage::

    x = Tensor(values, requires_grad=True)
    with Tape() as tape:
        loss = l1_loss(elu(matmul(x, w)), target)
    backward(loss)
    x.grad
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "set_debug",
    "matmul",
    "sparse_dense_matmul",
    "add",
    "scale",
    "elu",
    "l1_loss",
    "concat",
    "slice_",
    "reshape",
    "transpose",
    "chebyshev_conv",
    "sum_",
    "GradCheck",
    "check_gradients",
    "NonFiniteError",
]

_DEBUG = False
_TAPES: list["Tape"] = []
_SEQ = itertools.count()


class NonFiniteError(FloatingPointError):
    pass


def set_debug(flag: bool) -> None:
    """Enable finiteness checks on every primitive output."""
    global _DEBUG
    _DEBUG = bool(flag)


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "_node", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def item(self) -> float:
        return float(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other), scale(self, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, c):
        if isinstance(c, Tensor):
            raise TypeError("elementwise Tensor products are not supported; use scale() with a constant")
        return scale(self, float(c))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    # only the output's id is kept: a strong reference would form a
    # Tensor <-> node cycle and delay freeing every activation to the cyclic GC
    __slots__ = ("out_id", "inputs", "vjp", "op", "seq")

    def __init__(self, out, inputs, vjp, op):
        self.seq = next(_SEQ)
        self.out_id = id(out)
        self.inputs = inputs
        self.vjp = vjp
        self.op = op


class Tape:
    """Ordered record of primitive operations executed while active.

    With ``track_kinks`` set, the smallest distance of every
    non-differentiable point (L1 residual, ELU with alpha != 1) to zero is
    recorded so the gradient checker can avoid kinks.
    """

    def __init__(self, track_kinks: bool = False):
        self.records: list[_Node] = []
        self.track_kinks = track_kinks
        self.kinks: list[tuple[str, float]] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.records)


def _active() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(values: np.ndarray, inputs: tuple, vjp: Callable, op: str) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(values)):
        raise NonFiniteError(f"non-finite output from {op}")
    out = Tensor(values)
    tape = _active()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = _Node(out, inputs, vjp, op)
        out._node = node
        tape.records.append(node)
    return out


def _note_kink(kind: str, values: np.ndarray) -> None:
    tape = _active()
    if tape is not None and tape.track_kinks and values.size:
        tape.kinks.append((kind, float(np.min(np.abs(values)))))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def matmul(a, b) -> Tensor:
    """``a @ b`` with ``b`` two-dimensional; ``a`` may carry leading batch axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    av, bv = a.values, b.values
    out = av @ bv

    def vjp(g):
        ga = g @ bv.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _emit(out, (a, b), vjp, "matmul")


def sparse_dense_matmul(S, x, S_t=None) -> Tensor:
    """Constant sparse ``S`` (r x n) applied along the first axis of ``x``.

    ``x`` has shape (n, ...); trailing axes are treated as columns. ``S_t``
    may supply a precomputed transpose for the backward pass. The sparse
    operand is never densified.
    """
    x = _as_tensor(x)
    if x.ndim == 0 or x.shape[0] != S.shape[1]:
        raise ValueError(f"sparse matmul shape mismatch: {S.shape} @ {x.shape}")
    xv = x.values
    tail = xv.shape[1:]
    out = (S @ xv.reshape(xv.shape[0], -1)).reshape((S.shape[0],) + tail)

    def vjp(g):
        St = S_t if S_t is not None else S.T
        return ((St @ g.reshape(g.shape[0], -1)).reshape(xv.shape),)

    return _emit(out, (x,), vjp, "sparse_dense_matmul")


def chebyshev_conv(L, x, theta, L_t=None) -> Tensor:
    """Chebyshev filter ``sum_j T_j(L) x theta_j`` along the first axis of ``x``.

    ``x`` has shape (n, ..., F_in) and ``theta`` (K, F_in, F_out). The
    polynomials follow ``T_0 x = x``, ``T_1 x = L x`` and
    ``T_j x = 2 L T_{j-1} x - T_{j-2} x``. The backward pass runs the adjoint
    recurrence with ``L^T``, so no intermediate ever needs a transpose.
    """
    x, theta = _as_tensor(x), _as_tensor(theta)
    xv, tv = x.values, theta.values
    if tv.ndim != 3 or xv.shape[0] != L.shape[1] or xv.shape[-1] != tv.shape[1]:
        raise ValueError(f"chebyshev_conv shape mismatch: L {L.shape}, x {xv.shape}, theta {tv.shape}")
    K, f_in, f_out = tv.shape
    n = xv.shape[0]
    rows = xv.size // (n * f_in)
    # basis[j] viewed as (n, rows*f_in) for the sparse products, (n*rows, f_in) for the dense ones
    basis = np.empty((K, n, rows * f_in))
    basis[0] = xv.reshape(n, -1)
    if K > 1:
        basis[1] = L @ basis[0]
    for j in range(2, K):
        np.subtract(2.0 * (L @ basis[j - 1]), basis[j - 2], out=basis[j])
    flat = basis.reshape(K, n * rows, f_in)
    out = flat[0] @ tv[0]
    for j in range(1, K):
        out += flat[j] @ tv[j]
    out_shape = xv.shape[:-1] + (f_out,)

    def vjp(g):
        g2 = g.reshape(n * rows, f_out)
        gtheta = np.empty_like(tv)
        adj = np.empty((K, n * rows, f_in))
        for j in range(K):
            gtheta[j] = flat[j].T @ g2
            adj[j] = g2 @ tv[j].T
        Lt = L_t if L_t is not None else L.T
        adj = adj.reshape(K, n, rows * f_in)
        for j in range(K - 1, 1, -1):
            adj[j - 1] += 2.0 * (Lt @ adj[j])
            adj[j - 2] -= adj[j]
        if K > 1:
            adj[0] += Lt @ adj[1]
        return adj[0].reshape(xv.shape), gtheta

    return _emit(out.reshape(out_shape), (x, theta), vjp, "chebyshev_conv")


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.values.transpose(axes))
    return _emit(out, (a,), lambda g: (np.ascontiguousarray(g.transpose(inverse)),), "transpose")


def add(a, b) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.values + b.values
    except ValueError as exc:
        raise ValueError(f"add shape mismatch: {a.shape} + {b.shape}") from exc

    def vjp(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _emit(out, (a, b), vjp, "add")


def scale(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _emit(a.values * c, (a,), lambda g: (g * c,), "scale")


def elu(a, alpha: float = 1.0) -> Tensor:
    """``x`` for ``x > 0`` else ``alpha * (exp(x) - 1)``."""
    a = _as_tensor(a)
    x = a.values
    neg = x <= 0
    ex = np.exp(np.minimum(x, 0.0))
    out = np.where(neg, alpha * (ex - 1.0), x)
    if alpha != 1.0:
        # with alpha == 1 the derivative is continuous at 0
        _note_kink("elu", x)

    def vjp(g):
        return (g * np.where(neg, alpha * ex, 1.0),)

    return _emit(out, (a,), vjp, "elu")


def l1_loss(a, b) -> Tensor:
    """Mean absolute difference over all entries (subgradient 0 at ties)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"l1_loss shape mismatch: {a.shape} vs {b.shape}")
    r = a.values - b.values
    _note_kink("l1", r)
    size = r.size
    out = np.array(np.abs(r).mean())

    def vjp(g):
        s = np.sign(r) * (float(g) / size)
        return (s if a.requires_grad else None, -s if b.requires_grad else None)

    return _emit(out, (a, b), vjp, "l1_loss")


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    out = np.concatenate([t.values for t in tensors], axis=axis)
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    lead = (slice(None),) * ax

    def vjp(g):
        return tuple(
            g[lead + (slice(bounds[i], bounds[i + 1]),)] if t.requires_grad else None
            for i, t in enumerate(tensors)
        )

    return _emit(out, tensors, vjp, "concat")


def slice_(a, index) -> Tensor:
    """Basic indexing ``a[index]``."""
    a = _as_tensor(a)
    out = np.array(a.values[index])

    def vjp(g):
        full = np.zeros_like(a.values)
        full[index] += g
        return (full,)

    return _emit(out, (a,), vjp, "slice")


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    out = a.values.reshape(shape)
    return _emit(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def sum_(a) -> Tensor:
    a = _as_tensor(a)
    return _emit(np.array(a.values.sum()), (a,), lambda g: (np.full(a.shape, float(g)),), "sum")


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = (loss.grad if loss.grad is not None else 0.0) + np.ones_like(loss.values)
            return
        raise ValueError("loss was not produced on an active Tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    for rec in reversed(_collect(loss._node)):
        g = grads.pop(rec.out_id, None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                grads[key] = gi if key not in grads else grads[key] + gi


def _collect(node: _Node) -> list[_Node]:
    """Nodes reachable from ``node``, sorted by execution order."""
    order: list[_Node] = []
    seen: set[int] = set()
    stack = [(node, False)]
    while stack:
        cur, done = stack.pop()
        if done:
            order.append(cur)
            continue
        if id(cur) in seen:
            continue
        seen.add(id(cur))
        stack.append((cur, True))
        for inp in cur.inputs:
            if inp._node is not None and id(inp._node) not in seen:
                stack.append((inp._node, False))
    order.sort(key=lambda n: n.seq)
    return order


@dataclass
class GradCheck:
    max_error: float
    resamples: int
    n_checked: int

    def __float__(self):
        return self.max_error


def _flatten(x):
    if isinstance(x, dict):
        keys = sorted(x)
        return keys, np.concatenate([np.asarray(x[k], dtype=np.float64).ravel() for k in keys])
    return None, np.asarray(x, dtype=np.float64).ravel().copy()


def _unflatten(keys, flat, template):
    if keys is None:
        return flat.reshape(np.shape(template))
    out, pos = {}, 0
    for k in keys:
        shape = np.shape(template[k])
        size = int(np.prod(shape))
        out[k] = flat[pos:pos + size].reshape(shape)
        pos += size
    return out


def _wrap(values, requires_grad):
    if isinstance(values, dict):
        return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in values.items()}
    return Tensor(values, requires_grad=requires_grad)


def check_gradients(
    f: Callable,
    x,
    h: float = 1e-5,
    kink_tol: float = 1e-3,
    max_resamples: int = 50,
    resample_scale: float = 1e-2,
    n_coords: int | None = None,
    seed: int = 0,
) -> GradCheck:
    """Compare reverse-mode gradients of scalar ``f`` with central differences.

    ``x`` is an array or a dict of arrays; ``f`` receives Tensors of the same
    structure. If a non-differentiable point of ``f`` lies within
    ``kink_tol`` of zero, ``x`` is perturbed and the check restarted. The
    error is ``max |analytic - fd| / max(1, |fd|)`` over the checked
    coordinates (all, or ``n_coords`` drawn at random).
    """
    rng = np.random.default_rng(seed)
    keys, flat = _flatten(x)
    resamples = 0
    while True:
        point = _unflatten(keys, flat, x)
        inputs = _wrap(point, True)
        with Tape(track_kinks=True) as tape:
            out = f(inputs)
        near = [d for _, d in tape.kinks if d < kink_tol]
        if not near or resamples >= max_resamples:
            break
        resamples += 1
        flat = flat + resample_scale * max(1.0, float(np.std(flat))) * rng.standard_normal(flat.shape)
    backward(out)
    if keys is None:
        analytic = inputs.grad if inputs.grad is not None else np.zeros_like(flat)
        analytic = np.asarray(analytic).ravel()
    else:
        analytic = np.concatenate(
            [(inputs[k].grad if inputs[k].grad is not None else np.zeros(np.shape(x[k]))).ravel() for k in keys]
        )
    coords = np.arange(flat.size)
    if n_coords is not None and n_coords < flat.size:
        coords = np.sort(rng.choice(flat.size, size=n_coords, replace=False))

    def evaluate(vec):
        return float(f(_wrap(_unflatten(keys, vec, x), False)).values)

    worst = 0.0
    for i in coords:
        step = flat.copy()
        step[i] += h
        fp = evaluate(step)
        step[i] -= 2 * h
        fm = evaluate(step)
        fd = (fp - fm) / (2 * h)
        worst = max(worst, abs(analytic[i] - fd) / max(1.0, abs(fd)))
    return GradCheck(worst, resamples, len(coords))
