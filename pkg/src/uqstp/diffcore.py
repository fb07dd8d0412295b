"""Minimal reverse-mode autodiff over dense float64 numpy arrays.

Only the operations the forecasting model needs are provided.  Every
operation records itself on the active :class:`Tape` when at least one
operand requires a gradient; with no active tape the same calls are plain
forward evaluation.

    >>> x = Value([1.0, 2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_axis(x * x)
    >>> tape.backward(loss)
    >>> x.grad
    array([2., 4.])
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import special

EPS_EIG = 1e-8
JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100
SYMMETRY_TOL = 1e-10
MAX_EIG_DIM = 16

_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Value:
    """A dense array with an attached gradient accumulator."""

    __slots__ = ("data", "_grad", "requires_grad", "parents", "vjp", "op")
    # make numpy defer to the reflected operators below
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self._grad = None
        self.requires_grad = requires_grad
        self.parents: tuple[Value, ...] = ()
        self.vjp: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value) -> None:
        self._grad = np.array(value, dtype=np.float64).reshape(self.data.shape)

    def zero_grad(self) -> None:
        self._grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self._grad is None:
            self._grad = np.array(g, dtype=np.float64, copy=True).reshape(self.data.shape)
        else:
            self._grad += g

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Value(shape={self.shape}, op={self.op!r})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


class Tape:
    """Records operations in creation order (a valid topological order)."""

    def __init__(self):
        self.nodes: list[Value] = []
        self.replayed = False

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def record(self, node: Value) -> None:
        self.nodes.append(node)

    def backward(self, loss: Value) -> None:
        if self.replayed:
            raise RuntimeError("tape already replayed; record a new tape before another backward pass")
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        self.replayed = True
        loss._accumulate(np.ones_like(loss.data))
        for node in reversed(self.nodes):
            if node._grad is None:
                continue
            grads = node.vjp(node._grad)
            for parent, g in zip(node.parents, grads):
                if g is not None and parent.requires_grad:
                    parent._accumulate(g)


def as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def _make(data: np.ndarray, parents: Sequence[Value], vjp: Callable, op: str) -> Value:
    out = Value.__new__(Value)
    out.data = data
    out._grad = None
    out.op = op
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.vjp = vjp
        tape.record(out)
    else:
        out.requires_grad = False
        out.parents = ()
        out.vjp = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Value, b: Value) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _broadcast_shape("add", a, b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _broadcast_shape("sub", a, b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def neg(a) -> Value:
    a = as_value(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Value:
    """Elementwise (Hadamard) product with numpy broadcasting."""
    a, b = as_value(a), as_value(b)
    _broadcast_shape("mul", a, b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


mul_elementwise = mul


def div(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)), "div")


def relu(a) -> Value:
    a = as_value(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def abs_(a) -> Value:
    a = as_value(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def exp(a) -> Value:
    a = as_value(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Value:
    a = as_value(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def log1p(a) -> Value:
    a = as_value(a)
    return _make(np.log1p(a.data), (a,), lambda g: (g / (1.0 + a.data),), "log1p")


def square(a) -> Value:
    a = as_value(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def softplus(a) -> Value:
    a = as_value(a)
    out = np.logaddexp(0.0, a.data)
    return _make(out, (a,), lambda g: (g * special.expit(a.data),), "softplus")


def sigmoid(a) -> Value:
    a = as_value(a)
    out = special.expit(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def lgamma(a) -> Value:
    a = as_value(a)
    return _make(special.gammaln(a.data), (a,), lambda g: (g * special.digamma(a.data),), "lgamma")


def clamp_min(x, floor: float) -> Value:
    """``max(x, floor)`` elementwise; the gradient is zero at and below the floor."""
    if not floor > 0:
        raise ValueError(f"clamp_min floor must be > 0, got {floor}")
    x = as_value(x)
    passes = x.data > floor
    return _make(np.where(passes, x.data, floor), (x,), lambda g: (g * passes,), "clamp_min")


def clip(x, lo: float, hi: float) -> Value:
    x = as_value(x)
    inside = (x.data > lo) & (x.data < hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


# ---------------------------------------------------------------- reductions & shape

def sum_axis(a, axis=None, keepdims: bool = False) -> Value:
    a = as_value(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make(np.asarray(out, dtype=np.float64), (a,), vjp, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Value:
    a = as_value(a)
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum_axis(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape) -> Value:
    a = as_value(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes) -> Value:
    a = as_value(a)
    inverse = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def swap_last(a) -> Value:
    a = as_value(a)
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def getitem(a, idx) -> Value:
    """Basic (slice/integer) indexing."""
    a = as_value(a)

    def vjp(g):
        out = np.zeros_like(a.data)
        out[idx] += g
        return (out,)

    return _make(np.array(a.data[idx], dtype=np.float64), (a,), vjp, "getitem")


def concat(values: Sequence, axis: int = -1) -> Value:
    values = [as_value(v) for v in values]
    try:
        out = np.concatenate([v.data for v in values], axis=axis)
    except ValueError:
        raise ValueError(f"concat: shape mismatch {[v.shape for v in values]}") from None
    sizes = np.cumsum([v.shape[axis] for v in values])[:-1]
    return _make(out, values, lambda g: tuple(np.split(g, sizes, axis=axis)), "concat")


def stack(values: Sequence, axis: int = 0) -> Value:
    values = [as_value(v) for v in values]
    try:
        out = np.stack([v.data for v in values], axis=axis)
    except ValueError:
        raise ValueError(f"stack: shape mismatch {[v.shape for v in values]}") from None
    n = len(values)
    return _make(out, values,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)), "stack")


def take_last(a, index: np.ndarray) -> Value:
    """Gather along the last axis with an integer index vector (repeats allowed)."""
    a = as_value(a)
    index = np.asarray(index, dtype=np.intp)
    gather = np.zeros((a.shape[-1], index.size))
    gather[index, np.arange(index.size)] = 1.0
    return _make(a.data[..., index], (a,), lambda g: (g @ gather.T,), "take")


def shift_right(a, amount: int) -> Value:
    """Delay the last axis by ``amount`` steps, zero-filling the front."""
    a = as_value(a)
    if amount == 0:
        return a
    out = np.zeros_like(a.data)
    if amount < a.shape[-1]:
        out[..., amount:] = a.data[..., :-amount]

    def vjp(g):
        gx = np.zeros_like(g)
        if amount < g.shape[-1]:
            gx[..., :-amount] = g[..., amount:]
        return (gx,)

    return _make(out, (a,), vjp, "shift")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Value:
    a, b = as_value(a), as_value(b)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ValueError(f"matmul: shape mismatch {a.shape} @ {b.shape}") from None

    def vjp(g):
        ad, bd = a.data, b.data
        if ad.ndim == 1 or bd.ndim == 1:
            ad2 = ad[None, :] if ad.ndim == 1 else ad
            bd2 = bd[:, None] if bd.ndim == 1 else bd
            g2 = g
            if ad.ndim == 1:
                g2 = np.expand_dims(g2, -2)
            if bd.ndim == 1:
                g2 = np.expand_dims(g2, -1)
            ga = np.matmul(g2, np.swapaxes(bd2, -1, -2))
            gb = np.matmul(np.swapaxes(ad2, -1, -2), g2)
            ga = ga[..., 0, :] if ad.ndim == 1 else ga
            gb = gb[..., 0] if bd.ndim == 1 else gb
        else:
            ga = np.matmul(g, np.swapaxes(bd, -1, -2))
            gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), vjp, "matmul")


_EINSUM_PATHS: dict = {}


def _einsum(spec: str, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    key = (spec, x.shape, y.shape)
    path = _EINSUM_PATHS.get(key)
    if path is None:
        path = _EINSUM_PATHS[key] = np.einsum_path(spec, x, y, optimize="greedy")[0]
    return np.einsum(spec, x, y, optimize=path)


def einsum(spec: str, a, b) -> Value:
    """Two-operand contraction written with explicit index letters.

    Every index of an operand must appear in the other operand or the
    output, and no operand may repeat an index.
    """
    a, b = as_value(a), as_value(b)
    lhs, out_idx = spec.replace(" ", "").split("->")
    ia, ib = lhs.split(",")
    for own, other in ((ia, ib), (ib, ia)):
        if len(set(own)) != len(own) or any(c not in other and c not in out_idx for c in own):
            raise ValueError(f"einsum: unsupported spec {spec!r}")
    if len(ia) != a.ndim or len(ib) != b.ndim:
        raise ValueError(f"einsum {spec!r}: shape mismatch {a.shape} vs {b.shape}")
    try:
        out = _einsum(spec, a.data, b.data)
    except ValueError:
        raise ValueError(f"einsum {spec!r}: shape mismatch {a.shape} vs {b.shape}") from None

    def vjp(g):
        ga = _einsum(f"{out_idx},{ib}->{ia}", g, b.data) if a.requires_grad else None
        gb = _einsum(f"{out_idx},{ia}->{ib}", g, a.data) if b.requires_grad else None
        return ga, gb

    return _make(np.asarray(out, dtype=np.float64), (a, b), vjp, "einsum")


def _jacobi(S: np.ndarray, tol: float, max_sweeps: int) -> tuple[np.ndarray, np.ndarray]:
    A = S.copy()
    m = A.shape[-1]
    V = np.broadcast_to(np.eye(m), A.shape).copy()
    scale = np.maximum(1.0, np.sqrt((S * S).sum(axis=(-1, -2))))
    offdiag = ~np.eye(m, dtype=bool)
    for _ in range(max_sweeps):
        off = np.sqrt((A[:, offdiag] ** 2).sum(axis=-1))
        if np.all(off <= tol * scale):
            break
        for p in range(m - 1):
            for q in range(p + 1, m):
                apq = A[:, p, q]
                active = apq != 0.0
                if not active.any():
                    continue
                theta = np.where(active, (A[:, q, q] - A[:, p, p]) / (2.0 * np.where(active, apq, 1.0)), 0.0)
                t = np.where(active, np.sign(theta) + (theta == 0.0), 0.0) / (np.abs(theta) + np.hypot(theta, 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = (t * c)[:, None]
                c = c[:, None]
                ap, aq = A[:, :, p].copy(), A[:, :, q].copy()
                A[:, :, p], A[:, :, q] = c * ap - s * aq, s * ap + c * aq
                ap, aq = A[:, p, :].copy(), A[:, q, :].copy()
                A[:, p, :], A[:, q, :] = c * ap - s * aq, s * ap + c * aq
                vp, vq = V[:, :, p].copy(), V[:, :, q].copy()
                V[:, :, p], V[:, :, q] = c * vp - s * vq, s * vp + c * vq
    else:
        off = np.sqrt((A[:, offdiag] ** 2).sum(axis=-1))
        bad = np.flatnonzero(off > tol * scale)
        if bad.size:
            raise np.linalg.LinAlgError(
                f"Jacobi eigensolver did not converge in {max_sweeps} sweeps for matrix #{bad[0]}:\n{S[bad[0]]}")
    return np.diagonal(A, axis1=-2, axis2=-1).copy(), V


def symmetric_eigh(S: np.ndarray, tol: float = JACOBI_TOL, max_sweeps: int = JACOBI_MAX_SWEEPS):
    """Cyclic Jacobi eigendecomposition of a batch of symmetric matrices.

    Returns ascending eigenvalues and orthonormal eigenvector columns, each
    column signed so its largest-magnitude entry is positive.
    """
    S = np.asarray(S, dtype=np.float64)
    if S.ndim < 2 or S.shape[-1] != S.shape[-2]:
        raise ValueError(f"eig_sym needs square matrices, got shape {S.shape}")
    m = S.shape[-1]
    if m > MAX_EIG_DIM:
        raise ValueError(f"eig_sym supports M <= {MAX_EIG_DIM}, got {m}")
    asym = np.abs(S - np.swapaxes(S, -1, -2))
    if asym.size and asym.max() > SYMMETRY_TOL:
        raise ValueError(f"eig_sym: input not symmetric (max asymmetry {asym.max():.3e})")
    batch = S.shape[:-2]
    flat = S.reshape(-1, m, m)
    w, V = _jacobi(flat, tol, max_sweeps)
    order = np.argsort(w, axis=-1, kind="stable")
    w = np.take_along_axis(w, order, axis=-1)
    V = np.take_along_axis(V, order[:, None, :], axis=-1)
    lead = np.take_along_axis(V, np.abs(V).argmax(axis=-2)[:, None, :], axis=-2)
    V = V * np.where(lead < 0, -1.0, 1.0)
    return w.reshape(batch + (m,)), V.reshape(batch + (m, m))


def eig_sym(S) -> tuple[Value, Value]:
    """Differentiable symmetric eigendecomposition ``S = V diag(w) V^T``.

    Returns ``(w, V)`` with ``w`` ascending.  The backward pass uses the
    standard adjoint with eigen-gap denominators ``1/(w_j - w_i)`` replaced
    by ``(w_j - w_i) / ((w_j - w_i)^2 + EPS_EIG^2)``.
    """
    S = as_value(S)
    w, V = symmetric_eigh(S.data)
    m = S.shape[-1]
    diff = w[..., None, :] - w[..., :, None]  # diff[i, j] = w_j - w_i
    F = diff / (diff * diff + EPS_EIG ** 2)
    Vt = np.swapaxes(V, -1, -2)

    def vjp(g):
        gV, gw = g[..., :m, :], g[..., m, :]
        inner = gw[..., :, None] * np.eye(m) + F * (Vt @ gV)
        gS = V @ inner @ Vt
        return (0.5 * (gS + np.swapaxes(gS, -1, -2)),)

    # eigenvectors in rows 0..m-1, eigenvalues in row m
    packed = _make(np.concatenate([V, w[..., None, :]], axis=-2), (S,), vjp, "eig_sym")
    return getitem(packed, (..., m, slice(None))), getitem(packed, (..., slice(0, m), slice(None)))


def _cholesky(S: np.ndarray, what: str) -> np.ndarray:
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        raise ValueError(f"{what}: matrix is not positive definite") from None


def _spd_inverse(L: np.ndarray) -> np.ndarray:
    eye = np.broadcast_to(np.eye(L.shape[-1]), L.shape)
    Linv = np.linalg.solve(L, eye)
    return np.swapaxes(Linv, -1, -2) @ Linv


def logdet_pd(S) -> Value:
    """``log|S|`` for a batch of SPD matrices via Cholesky."""
    S = as_value(S)
    L = _cholesky(S.data, "logdet_pd")
    out = 2.0 * np.log(np.diagonal(L, axis1=-2, axis2=-1)).sum(axis=-1)
    return _make(out, (S,), lambda g: (g[..., None, None] * _spd_inverse(L),), "logdet")


def inv_quad(r, S) -> Value:
    """``r^T S^{-1} r`` for batches of vectors ``r`` and SPD matrices ``S``."""
    r, S = as_value(r), as_value(S)
    if S.shape[-1] != r.shape[-1] or S.shape[-2] != r.shape[-1]:
        raise ValueError(f"inv_quad: shape mismatch {r.shape} vs {S.shape}")
    L = _cholesky(S.data, "inv_quad")
    half = np.linalg.solve(L, r.data[..., None])  # L^{-1} r
    sol = np.linalg.solve(np.swapaxes(L, -1, -2), half)[..., 0]  # S^{-1} r
    out = (half[..., 0] ** 2).sum(axis=-1)

    def vjp(g):
        gr = 2.0 * g[..., None] * sol
        gS = -g[..., None, None] * sol[..., :, None] * sol[..., None, :]
        return _unbroadcast(gr, r.shape), _unbroadcast(gS, S.shape)

    return _make(out, (r, S), vjp, "inv_quad")


# ---------------------------------------------------------------- network helpers

def weight_norm(v, g) -> Value:
    """``w = g * v / ||v||`` with the norm taken over all axes but the first."""
    v, g = as_value(v), as_value(g)
    axes = tuple(range(1, v.ndim))
    bshape = (-1,) + (1,) * (v.ndim - 1)
    norm = np.sqrt((v.data ** 2).sum(axis=axes))
    if np.any(norm == 0):
        raise ValueError("weight_norm: direction vector has zero norm")
    unit = v.data / norm.reshape(bshape)

    def vjp(gw):
        proj = (gw * unit).sum(axis=axes)
        gv = (g.data / norm).reshape(bshape) * (gw - unit * proj.reshape(bshape))
        return gv, proj

    return _make(g.data.reshape(bshape) * unit, (v, g), vjp, "weight_norm")


def layer_norm(x, eps: float = 1e-5) -> Value:
    """Normalize over the last axis (no affine part)."""
    x = as_value(x)
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    y = centered * inv_std

    def vjp(g):
        return (inv_std * (g - g.mean(axis=-1, keepdims=True)
                           - y * (g * y).mean(axis=-1, keepdims=True)),)

    return _make(y, (x,), vjp, "layer_norm")


# ---------------------------------------------------------------- gradient checking

@dataclass
class GradCheckReport:
    max_rel_err: float
    worst: tuple | None = None
    nan_coords: list = field(default_factory=list)

    def ok(self, tol: float = 1e-4) -> bool:
        return not self.nan_coords and self.max_rel_err <= tol

    def __float__(self) -> float:
        return float("nan") if self.nan_coords else float(self.max_rel_err)


def grad_check(f: Callable[..., Value], inputs: Sequence[Value], h: float = 1e-5,
               analytic_scale: float = 1.0) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f(*inputs)`` with central differences.

    The error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    ``analytic_scale`` exists so tests can inject a deliberately wrong gradient.
    """
    inputs = list(inputs)
    for x in inputs:
        x.requires_grad = True
        x.zero_grad()
    with Tape() as tape:
        out = f(*inputs)
    tape.backward(out)
    analytic = [x.grad.copy() * analytic_scale for x in inputs]

    report = GradCheckReport(0.0)
    for k, x in enumerate(inputs):
        flat = x.data.reshape(-1)
        ana = analytic[k].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(*inputs).data)
            flat[i] = orig - h
            fm = float(f(*inputs).data)
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            coord = (k, np.unravel_index(i, x.shape))
            if not (np.isfinite(num) and np.isfinite(ana[i])):
                report.nan_coords.append(coord)
                continue
            err = abs(ana[i] - num) / max(1.0, abs(num))
            if err > report.max_rel_err or report.worst is None:
                report.max_rel_err = max(report.max_rel_err, err)
                report.worst = coord
    for x in inputs:
        x.zero_grad()
    return report
