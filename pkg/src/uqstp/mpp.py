"""Multivariate probabilistic prediction head.

Two output blocks read the fused embedding: one predicts the mean vector,
the other a half-vector Z that is folded into a symmetric matrix and pushed
onto the positive definite cone by clamping its eigenvalues at ``v_min``.
Losses are written for single observations and batches alike; every loss
returns the mean over all leading axes.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special

from . import diffcore as dc

KINDS = ("gaussian", "laplace", "negbinom", "diag_gaussian", "deterministic")
V_MIN_DEFAULT = 1e-4
Z_95 = 1.96


def half_size(M: int) -> int:
    return M * (M + 1) // 2


def dim_from_half(D: int) -> int:
    M = int(round((np.sqrt(8 * D + 1) - 1) / 2))
    if half_size(M) != D:
        raise ValueError(f"half-vector length {D} is not M(M+1)/2 for any M")
    return M


def upper_index(M: int) -> np.ndarray:
    """Position in the row-major upper-triangle half-vector of every (i, j) cell."""
    pos = np.zeros((M, M), dtype=np.intp)
    k = 0
    for i in range(M):
        for j in range(i, M):
            pos[i, j] = pos[j, i] = k
            k += 1
    return pos.reshape(-1)


def half_vector_to_symmetric(Z, M: int | None = None) -> dc.Value:
    """Fill the upper triangle row-major from Z and mirror it: (..., D) -> (..., M, M)."""
    Z = dc.as_value(Z)
    D = Z.shape[-1]
    if M is None:
        M = dim_from_half(D)
    elif D != half_size(M):
        raise ValueError(f"half-vector for M={M} must have length {half_size(M)}, got {D}")
    full = dc.take_last(Z, upper_index(M))
    return dc.reshape(full, Z.shape[:-1] + (M, M))


def symmetric_to_half(S: np.ndarray) -> np.ndarray:
    M = S.shape[-1]
    iu = np.triu_indices(M)
    return S[..., iu[0], iu[1]]


def clamp_to_pd(W, v_min: float = V_MIN_DEFAULT) -> dc.Value:
    """V diag(max(lambda, v_min)) V^T from the eigendecomposition of symmetric W."""
    w, V = dc.eig_sym(W)
    lam = dc.clamp_min(w, v_min)
    lam_row = dc.reshape(lam, lam.shape[:-1] + (1, lam.shape[-1]))
    return (V * lam_row) @ dc.swap_last(V)


def _vec_residual(x, mu):
    x, mu = dc.as_value(x), dc.as_value(mu)
    if x.shape[-1] != mu.shape[-1]:
        raise ValueError(f"observation/mean shape mismatch {x.shape} vs {mu.shape}")
    return x - mu


def gaussian_nll(x, mu, Sigma) -> dc.Value:
    """0.5 log|Sigma| + 0.5 r^T Sigma^{-1} r, averaged over leading axes."""
    r = _vec_residual(x, mu)
    per = dc.logdet_pd(Sigma) * 0.5 + dc.inv_quad(r, Sigma) * 0.5
    return dc.mean(per)


def laplace_nll(x, mu, beta) -> dc.Value:
    """Gaussian-form loss with the 0.5 log((2 pi)^M) constant kept."""
    M = dc.as_value(mu).shape[-1]
    return gaussian_nll(x, mu, beta) + 0.5 * M * np.log(2.0 * np.pi)


def negbinom_nll(x, r, p, mu, Sigma) -> dc.Value:
    """Count terms plus the Gaussian quadratic form, taken at face value.

    Per element: -[lgamma(x + r) - lgamma(x + 1) - lgamma(r)] + (r / p) log(1 + (p / r) x),
    summed over the M variables, then 0.5 log|Sigma| + 0.5 (x - mu)^T Sigma^{-1} (x - mu).
    """
    xd = np.asarray(x.data if isinstance(x, dc.Value) else x, dtype=np.float64)
    if np.any(xd < 0) or not np.all(np.isfinite(xd)):
        raise ValueError("negbinom_nll: observations must be finite and nonnegative")
    r, p = dc.as_value(r), dc.as_value(p)
    if np.any(r.data <= 0):
        raise ValueError("negbinom_nll: r must be > 0")
    if np.any((p.data <= 0) | (p.data >= 1)):
        raise ValueError("negbinom_nll: p must lie in (0, 1)")
    log_coef = dc.lgamma(r + xd) - special.gammaln(xd + 1.0) - dc.lgamma(r)
    tail = r / p * dc.log1p(p / r * xd)
    count = dc.sum_axis(tail - log_coef, axis=-1)
    res = _vec_residual(xd, mu)
    per = count + dc.logdet_pd(Sigma) * 0.5 + dc.inv_quad(res, Sigma) * 0.5
    return dc.mean(per)


def univariate_gaussian_nll(x, mu, var) -> np.ndarray:
    """Plain numpy sum over variables of 0.5 log var + 0.5 (x - mu)^2 / var."""
    x, mu, var = (np.asarray(a, dtype=np.float64) for a in (x, mu, var))
    return (0.5 * np.log(var) + 0.5 * (x - mu) ** 2 / var).sum(axis=-1)


def mae_loss(x, mu) -> dc.Value:
    return dc.mean(dc.abs_(_vec_residual(x, mu)))


# ---------------------------------------------------------------- forecasts

@dataclass
class DistForecast:
    """Denormalized or normalized forecast; leading axes are (S, T, N) or (T, N)."""
    mu: np.ndarray
    sigma: np.ndarray | None
    kind: str = "gaussian"
    r: np.ndarray | None = None
    p: np.ndarray | None = None
    variable_names: list = field(default_factory=list)

    def marginal_std(self, v_min: float = V_MIN_DEFAULT) -> np.ndarray:
        if self.sigma is None:
            return np.full(self.mu.shape, np.sqrt(v_min))
        return np.sqrt(np.maximum(np.diagonal(self.sigma, axis1=-2, axis2=-1), 0.0))

    def correlations(self) -> np.ndarray:
        """Correlation matrices (..., M, M) from the predicted covariances."""
        if self.sigma is None:
            raise ValueError("forecast has no covariance")
        sd = np.sqrt(np.diagonal(self.sigma, axis1=-2, axis2=-1))
        return self.sigma / (sd[..., :, None] * sd[..., None, :])

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "variables": list(self.variable_names), "mu": self.mu.tolist()}
        if self.sigma is not None:
            rows, cols = np.tril_indices(self.sigma.shape[-1])
            out["sigma_lower"] = self.sigma[..., rows, cols].tolist()
        if self.r is not None:
            out["r"] = self.r.tolist()
            out["p"] = self.p.tolist()
        return out


def prediction_interval(f: DistForecast, z: float = Z_95, v_min: float = V_MIN_DEFAULT):
    """Two-sided bounds mu +/- z * sigma per (..., m)."""
    sd = np.maximum(f.marginal_std(v_min), np.sqrt(v_min))
    return f.mu - z * sd, f.mu + z * sd


# ---------------------------------------------------------------- output blocks

@dataclass(frozen=True)
class MppConfig:
    kind: str = "gaussian"
    v_min: float = V_MIN_DEFAULT
    hidden: int = 32
    init_var: float = 0.05

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown distribution kind {self.kind!r}")
        if not 1e-6 <= self.v_min <= 1e-2:
            raise ValueError(f"v_min must lie in [1e-6, 1e-2], got {self.v_min}")
        if self.hidden < 1 or self.init_var <= 0:
            raise ValueError("hidden must be >= 1 and init_var > 0")


def _glorot(rng, shape, fan_in, fan_out, scale=1.0):
    bound = scale * np.sqrt(6.0 / (fan_in + fan_out))
    return dc.Value(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def init_block(prefix: str, groups: int, d_in: int, T: int, hidden: int, d_out: int,
               rng: np.random.Generator, out_scale: float = 1.0) -> dict[str, dc.Value]:
    """Pointwise temporal conv (d_in -> T*hidden), Linear, LayerNorm, ReLU, Linear."""
    return {
        f"{prefix}.tconv.w": _glorot(rng, (groups, d_in, T * hidden), d_in, hidden),
        f"{prefix}.tconv.b": dc.Value(np.zeros((groups, T * hidden)), requires_grad=True),
        f"{prefix}.lin1.w": _glorot(rng, (groups, hidden, hidden), hidden, hidden),
        f"{prefix}.lin1.b": dc.Value(np.zeros((groups, 1, hidden)), requires_grad=True),
        f"{prefix}.lin2.w": _glorot(rng, (groups, hidden, d_out), hidden, d_out, out_scale),
        f"{prefix}.lin2.b": dc.Value(np.zeros((groups, 1, d_out)), requires_grad=True),
    }


def block_forward(E, params: dict, prefix: str, T: int) -> dc.Value:
    """(B, N, G, d_in) -> (B, N, G, T, d_out)."""
    B, N, G, _ = E.shape
    h = dc.einsum("bngi,gio->bngo", E, params[f"{prefix}.tconv.w"]) + params[f"{prefix}.tconv.b"]
    h = dc.reshape(h, (B, N, G, T, -1))
    h = dc.einsum("bngth,ghk->bngtk", h, params[f"{prefix}.lin1.w"]) + params[f"{prefix}.lin1.b"]
    h = dc.relu(dc.layer_norm(h))
    return dc.einsum("bngth,gho->bngto", h, params[f"{prefix}.lin2.w"]) + params[f"{prefix}.lin2.b"]


def init_params(cfg: MppConfig, M: int, e: int, T: int, rng: np.random.Generator) -> dict[str, dc.Value]:
    params = init_block("mpp.mu", M, e, T, cfg.hidden, 1, rng, out_scale=0.1)
    if cfg.kind == "deterministic":
        return params
    D = M if cfg.kind == "diag_gaussian" else half_size(M)
    z = init_block("mpp.z", 1, M * e, T, cfg.hidden, D, rng, out_scale=0.01)
    diag = np.arange(M) if cfg.kind == "diag_gaussian" else np.array([half_size(M) - half_size(M - i) for i in range(M)])
    z["mpp.z.lin2.b"].data[..., diag] = cfg.init_var
    params.update(z)
    if cfg.kind == "negbinom":
        params.update(init_block("mpp.nb", M, e, T, cfg.hidden, 2, rng))
    return params


@dataclass
class HeadOutput:
    """Tape-attached head outputs with leading axes (B, T, N)."""
    mu: dc.Value
    sigma: dc.Value | None = None
    r: dc.Value | None = None
    p: dc.Value | None = None


def mpp_forward(E, params: dict, cfg: MppConfig, T: int) -> HeadOutput:
    """Fused embedding (B, N, M, e) -> mean (B, T, N, M) and covariance (B, T, N, M, M)."""
    E = dc.as_value(E)
    B, N, M, e = E.shape
    mu = dc.reshape(block_forward(E, params, "mpp.mu", T), (B, N, M, T))
    out = HeadOutput(dc.transpose(mu, (0, 3, 1, 2)))
    if cfg.kind == "deterministic":
        return out
    z = block_forward(dc.reshape(E, (B, N, 1, M * e)), params, "mpp.z", T)
    z = dc.transpose(dc.reshape(z, (B, N, T, -1)), (0, 2, 1, 3))
    if cfg.kind == "diag_gaussian":
        var = dc.clamp_min(z, cfg.v_min)
        out.sigma = dc.reshape(var, var.shape + (1,)) * np.eye(M)
    else:
        out.sigma = clamp_to_pd(half_vector_to_symmetric(z, M), cfg.v_min)
    if cfg.kind == "negbinom":
        nb = dc.transpose(block_forward(E, params, "mpp.nb", T), (0, 3, 1, 2, 4))  # (B, T, N, M, 2)
        out.r = dc.softplus(nb[..., 0]) + 1e-3
        out.p = dc.clip(dc.sigmoid(nb[..., 1]), 1e-4, 1.0 - 1e-4)
    return out


def head_loss(out: HeadOutput, target, kind: str) -> dc.Value:
    """Training objective for a head output against targets (B, T, N, M)."""
    if kind == "deterministic":
        return mae_loss(target, out.mu)
    if kind in ("gaussian", "diag_gaussian"):
        return gaussian_nll(target, out.mu, out.sigma)
    if kind == "laplace":
        return laplace_nll(target, out.mu, out.sigma)
    if kind == "negbinom":
        counts = np.maximum(np.asarray(target.data if isinstance(target, dc.Value) else target), 0.0)
        return negbinom_nll(counts, out.r, out.p, out.mu, out.sigma)
    raise ValueError(f"unknown distribution kind {kind!r}")
