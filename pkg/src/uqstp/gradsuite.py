"""Finite-difference gradient checks for every differentiable operation.

Each check draws ``instances`` seeded random inputs and reports the worst
relative error.  Inputs near kinks (relu/abs at 0, clamp at its floor) are
resampled, eigen-problems are drawn with separated spectra, and SPD inputs
are built from unconstrained parameters so perturbations stay symmetric.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffcore as dc
from . import itcn, mdgcn, mpp

TOL = 1e-4
H = 1e-5


def _u(rng, shape, lo=-2.0, hi=2.0, avoid=None):
    x = rng.uniform(lo, hi, size=shape)
    if avoid is not None:
        kinks = np.atleast_1d(avoid)
        for _ in range(100):
            bad = (np.abs(x[..., None] - kinks) < 1e-3).any(axis=-1)
            if not bad.any():
                break
            x[bad] = rng.uniform(lo, hi, size=int(bad.sum()))
    return dc.Value(x)


def _spd(A):
    # A A^T + I: an SPD matrix whose perturbations stay symmetric
    return A @ dc.swap_last(A) + np.eye(A.shape[-1])


def _weights(rng, shape):
    return rng.uniform(-1.0, 1.0, size=shape)


def _sum_w(out, w):
    return dc.sum_axis(out * w)


def _separated_symmetric(rng, M, gap=0.1):
    while True:
        P = rng.uniform(-2.0, 2.0, size=(M, M))
        S = 0.5 * (P + P.T)
        w = np.linalg.eigvalsh(S)
        if M == 1 or np.min(np.diff(w)) > gap:
            return P


# Each builder returns (f, inputs) for one seeded instance.
Builder = Callable[[np.random.Generator], tuple]


def _elementwise(op, lo=-2.0, hi=2.0, avoid=None):
    def build(rng):
        w = _weights(rng, (3, 4))
        return (lambda x: _sum_w(op(x), w)), [_u(rng, (3, 4), lo, hi, avoid)]
    return build


def _binary(op, shape_a=(3, 4), shape_b=(3, 4), positive_b=False):
    def build(rng):
        a = _u(rng, shape_a)
        b = _u(rng, shape_b, 0.5, 2.0) if positive_b else _u(rng, shape_b)
        if positive_b:
            b.data *= rng.choice([-1.0, 1.0], size=shape_b)
        w = _weights(rng, np.broadcast_shapes(shape_a, shape_b))
        return (lambda x, y: _sum_w(op(x, y), w)), [a, b]
    return build


def _matmul(rng):
    w = _weights(rng, (2, 3, 5))
    return (lambda a, b: _sum_w(dc.matmul(a, b), w)), [_u(rng, (2, 3, 4)), _u(rng, (4, 5))]


def _einsum(rng):
    w = _weights(rng, (2, 3, 5))
    return (lambda a, b: _sum_w(dc.einsum("bij,jk->bik", a, b), w)), [_u(rng, (2, 3, 4)), _u(rng, (4, 5))]


def _shape_ops(rng):
    w = _weights(rng, (4, 3, 2))

    def f(x):
        y = dc.transpose(dc.reshape(x, (2, 3, 4)), (2, 1, 0))
        return _sum_w(dc.concat([y[:, :, :1], y[:, :, 1:] * 2.0], axis=2), w)
    return f, [_u(rng, (6, 4))]


def _stack(rng):
    w = _weights(rng, (3, 2, 4))
    return (lambda a, b, c: _sum_w(dc.stack([a, b, c], axis=0), w)), [_u(rng, (2, 4)) for _ in range(3)]


def _take_shift(rng):
    w = _weights(rng, (3, 6))
    idx = np.array([0, 2, 2, 1, 3, 0])
    return (lambda x: _sum_w(dc.shift_right(dc.take_last(x, idx), 2), w)), [_u(rng, (3, 4))]


def _reductions(rng):
    w = _weights(rng, (3, 5))
    return (lambda x: dc.sum_axis(dc.mean(x, axis=1) * w) + dc.sum_axis(x, axis=(0, 1))[2]), [_u(rng, (3, 4, 5))]


def _eig_sym(rng):
    M = int(rng.integers(2, 5))
    P = dc.Value(_separated_symmetric(rng, M))
    cw = _weights(rng, (M,))
    A = rng.uniform(-1, 1, size=(M, M))
    A = A + A.T

    def f(P):
        w, V = dc.eig_sym((P + dc.swap_last(P)) * 0.5)
        # sign-invariant use of each eigenvector: v_i^T A v_i
        quad = dc.sum_axis(V * dc.matmul(A, V), axis=0)
        return dc.sum_axis(w * cw) + dc.sum_axis(quad * cw[::-1].copy())
    return f, [P]


def _logdet_quad(rng):
    M = int(rng.integers(1, 5))
    return (lambda A, r: dc.logdet_pd(_spd(A)) + dc.inv_quad(r, _spd(A))), [_u(rng, (M, M)), _u(rng, (M,))]


def _weight_norm(rng):
    w = _weights(rng, (3, 2, 2))
    return (lambda v, g: _sum_w(dc.weight_norm(v, g), w)), [_u(rng, (3, 2, 2)), _u(rng, (3,))]


def _layer_norm(rng):
    w = _weights(rng, (3, 5))
    return (lambda x: _sum_w(dc.layer_norm(x), w)), [_u(rng, (3, 5))]


def _mdgcn(rng):
    N, M, t, K = 4, 2, 3, 2
    A = rng.uniform(0, 1, size=(2, K, N, N))
    supports = A / A.sum(axis=-1, keepdims=True)
    cfg = mdgcn.MdgcnConfig(layers=2, cheb_order=K, hidden_dims=(3,), embed_dim=2)
    params = mdgcn.init_params(cfg, M, t, rng)
    X = _u(rng, (1, N, M, t))
    names = list(params)
    w = _weights(rng, (1, N, M, 2))

    def f(x, *ps):
        return _sum_w(mdgcn.mdgcn_forward(x, supports, dict(zip(names, ps)), cfg), w)
    return f, [X, *params.values()]


def _itcn(rng):
    N, M, t = 3, 2, 8
    cfg = itcn.ItcnConfig(blocks=2, kernel_size=2, channels=(1, 2), dropout=0.1, embed_dim=2)
    params = itcn.init_params(cfg, M, rng)
    for v in params.values():
        if v.data.ndim == 1 or v.data.shape[-1] == 2 and v.data.ndim == 2:
            v.data[...] = rng.uniform(-0.5, 0.5, size=v.shape)
    names = list(params)
    w = _weights(rng, (1, N, M, 2))

    def f(x, *ps):
        return _sum_w(itcn.itcn_forward(x, dict(zip(names, ps)), cfg), w)
    return f, [_u(rng, (1, N, M, t)), *params.values()]


def _head_chain(kind):
    """E -> output blocks -> Z -> symmetric -> clamp_to_pd -> loss."""
    def build(rng):
        M, e, T, B, N = 2, 3, 1, 1, 2
        cfg = mpp.MppConfig(kind=kind, hidden=2, init_var=0.5)
        while True:
            params = mpp.init_params(cfg, M, e, T, rng)
            E = _u(rng, (B, N, M, e), -1.0, 1.0)
            names = list(params)
            z = _z_of(E, params, cfg, T).data
            lam = z if kind == "diag_gaussian" else np.linalg.eigvalsh(mpp.half_vector_to_symmetric(z).data)
            if lam.min() >= 2 * cfg.v_min and (M == 1 or np.diff(lam, axis=-1).min() >= 1e-3):
                break
        target = rng.uniform(0.0, 3.0, size=(B, T, N, M))

        def f(E, *ps):
            out = mpp.mpp_forward(E, dict(zip(names, ps)), cfg, T)
            return mpp.head_loss(out, target, kind)
        return f, [E, *params.values()]
    return build


def _z_of(E, params, cfg, T):
    B, N, M, e = E.shape
    z = mpp.block_forward(dc.reshape(E, (B, N, 1, M * e)), params, "mpp.z", T)
    return dc.transpose(dc.reshape(z, (B, N, T, -1)), (0, 2, 1, 3))


def _loss_direct(loss):
    """Loss formula alone on a clamped covariance built from a free half-vector."""
    def build(rng):
        M = int(rng.integers(1, 4))
        while True:
            P = _separated_symmetric(rng, M, gap=1e-2)
            S = 0.5 * (P + P.T) + 3.0 * np.eye(M)
            if np.linalg.eigvalsh(S).min() > 0.5:
                break
        Z = dc.Value(mpp.symmetric_to_half(S))
        x = rng.uniform(0.0, 3.0, size=(M,))
        mu = _u(rng, (M,))

        if loss == "negbinom":
            r, p = _u(rng, (M,), 0.5, 2.0), _u(rng, (M,), 0.2, 0.8)
            return (lambda Z, mu, r, p: mpp.negbinom_nll(x, r, p, mu, mpp.clamp_to_pd(mpp.half_vector_to_symmetric(Z)))), [Z, mu, r, p]
        fn = mpp.gaussian_nll if loss == "gaussian" else mpp.laplace_nll
        return (lambda Z, mu: fn(x, mu, mpp.clamp_to_pd(mpp.half_vector_to_symmetric(Z)))), [Z, mu]
    return build


CHECKS: dict[str, Builder] = {
    "add": _binary(dc.add, (3, 4), (4,)),
    "sub": _binary(dc.sub, (3, 4), (3, 1)),
    "mul": _binary(dc.mul, (3, 4), (3, 4)),
    "div": _binary(dc.div, (3, 4), (3, 4), positive_b=True),
    "matmul": _matmul,
    "einsum": _einsum,
    "relu": _elementwise(dc.relu, avoid=0.0),
    "abs": _elementwise(dc.abs_, avoid=0.0),
    "exp": _elementwise(dc.exp),
    "log": _elementwise(dc.log, 0.1, 2.0),
    "log1p": _elementwise(dc.log1p, -0.5, 2.0),
    "square": _elementwise(dc.square),
    "softplus": _elementwise(dc.softplus),
    "sigmoid": _elementwise(dc.sigmoid),
    "lgamma": _elementwise(dc.lgamma, 0.5, 3.0),
    "clamp_min": _elementwise(lambda x: dc.clamp_min(x, 0.5), avoid=0.5),
    "clip": _elementwise(lambda x: dc.clip(x, -1.0, 1.0), avoid=(-1.0, 1.0)),
    "sum_mean": _reductions,
    "reshape_transpose_concat": _shape_ops,
    "stack": _stack,
    "take_shift": _take_shift,
    "eig_sym": _eig_sym,
    "logdet_inv_quad": _logdet_quad,
    "weight_norm": _weight_norm,
    "layer_norm": _layer_norm,
    "mdgcn": _mdgcn,
    "itcn": _itcn,
    "gaussian_nll_chain": _loss_direct("gaussian"),
    "laplace_nll_chain": _loss_direct("laplace"),
    "negbinom_nll_chain": _loss_direct("negbinom"),
    "mpp_gaussian_head": _head_chain("gaussian"),
    "mpp_laplace_head": _head_chain("laplace"),
    "mpp_negbinom_head": _head_chain("negbinom"),
    "mpp_diag_head": _head_chain("diag_gaussian"),
}


@dataclass
class CheckResult:
    op: str
    max_rel_err: float
    ok: bool

    @property
    def status(self) -> str:
        return "pass" if self.ok else "FAIL"


def run_check(name: str, instances: int = 10, seed: int = 0, inject: str | None = None,
              tol: float = TOL, h: float = H) -> CheckResult:
    worst = 0.0
    ok = True
    for i in range(instances):
        rng = np.random.default_rng([seed, i, sum(map(ord, name))])
        f, inputs = CHECKS[name](rng)
        rep = dc.grad_check(f, inputs, h=h, analytic_scale=1.5 if inject == name else 1.0)
        worst = max(worst, float(rep))
        ok = ok and rep.ok(tol)
    return CheckResult(name, worst, ok)


def run_suite(instances: int = 10, seed: int = 0, inject: str | None = None, only=None) -> list[CheckResult]:
    if inject is not None and inject not in CHECKS:
        raise ValueError(f"unknown op {inject!r} for fault injection")
    names = list(CHECKS) if only is None else list(only)
    return [run_check(n, instances, seed, inject) for n in names]
