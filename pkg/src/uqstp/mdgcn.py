"""Multivariate diffusion graph convolution.

Each layer maps hidden states ``H`` of shape (B, N, M, F_in) to
(B, N, M, F_out)::

    H'[:, :, p] = act( sum_m sum_k  T_k(W_f) H[:, :, m] Theta_f[k, m, p]
                                  + T_k(W_b) H[:, :, m] Theta_b[k, m, p] + b[p] )

so every target phenomenon ``p`` reads the diffused states of every source
phenomenon ``m``.  ``mode="independent"`` keeps only ``m == p`` terms (plain
per-phenomenon diffusion convolution) and ``mode="shared"`` uses one Theta
per (direction, k) summed over sources.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .graph import ChebBasis

MODES = ("cross", "shared", "independent")


@dataclass(frozen=True)
class MdgcnConfig:
    layers: int = 2
    cheb_order: int = 2
    hidden_dims: tuple[int, ...] = (16,)
    embed_dim: int = 16
    activations: tuple[str, ...] | None = None
    mode: str = "cross"

    def __post_init__(self):
        if self.layers < 1 or self.cheb_order < 1:
            raise ValueError("MDGCN needs layers >= 1 and cheb_order >= 1")
        if len(self.hidden_dims) != self.layers - 1:
            raise ValueError(f"{self.layers} layers need {self.layers - 1} hidden dims, got {self.hidden_dims}")
        if any(d < 1 for d in self.hidden_dims) or self.embed_dim < 1:
            raise ValueError("MDGCN dims must be positive")
        if self.mode not in MODES:
            raise ValueError(f"unknown MDGCN mode {self.mode!r}")
        if self.activations is not None and len(self.activations) != self.layers:
            raise ValueError("one activation per layer required")

    def layer_activations(self) -> tuple[str, ...]:
        if self.activations is not None:
            return self.activations
        return ("relu",) * (self.layers - 1) + ("linear",)


def stack_supports(basis_f: ChebBasis, basis_b: ChebBasis) -> np.ndarray:
    """(2, K, N, N) array of T_1..T_K for both diffusion directions."""
    if basis_f.order != basis_b.order:
        raise ValueError(f"basis orders differ: {basis_f.order} vs {basis_b.order}")
    return np.stack([basis_f.terms(1), basis_b.terms(1)])


def theta_shape(mode: str, K: int, M: int, f_in: int, f_out: int) -> tuple[int, ...]:
    if mode == "cross":
        return (2, K, M, M, f_in, f_out)
    if mode == "shared":
        return (2, K, f_in, f_out)
    return (2, K, M, f_in, f_out)


def init_params(cfg: MdgcnConfig, M: int, f_in: int, rng: np.random.Generator) -> dict[str, dc.Value]:
    dims = [f_in, *cfg.hidden_dims, cfg.embed_dim]
    params = {}
    for layer in range(cfg.layers):
        a, b = dims[layer], dims[layer + 1]
        bound = np.sqrt(6.0 / (a + b))
        shape = theta_shape(cfg.mode, cfg.cheb_order, M, a, b)
        params[f"mdgcn.{layer}.theta"] = dc.Value(rng.uniform(-bound, bound, size=shape), requires_grad=True)
        params[f"mdgcn.{layer}.bias"] = dc.Value(np.zeros((M, b)), requires_grad=True)
    return params


def mdgcn_layer(H, supports: np.ndarray, theta, bias=None, activation: str = "relu",
                mode: str = "cross") -> dc.Value:
    H = dc.as_value(H)
    if H.ndim != 4:
        raise ValueError(f"MDGCN input must be (B, N, M, F), got {H.shape}")
    _, N, M, F = H.shape
    if supports.shape[-1] != N:
        raise ValueError(f"supports are for {supports.shape[-1]} nodes, input has {N}")
    K = supports.shape[1]
    expected = theta_shape(mode, K, M, F, theta.shape[-1])
    if tuple(theta.shape) != expected:
        raise ValueError(f"theta shape {theta.shape} does not match expected {expected}")
    diffused = dc.einsum("dknj,bjmf->bdknmf", supports, H)
    if mode == "cross":
        out = dc.einsum("bdknmf,dkmpfo->bnpo", diffused, theta)
    elif mode == "independent":
        out = dc.einsum("bdknmf,dkmfo->bnmo", diffused, theta)
    else:
        pooled = dc.einsum("bdknf,dkfo->bno", dc.sum_axis(diffused, axis=4), theta)
        out = dc.reshape(pooled, (pooled.shape[0], N, 1, pooled.shape[-1])) * np.ones((1, 1, M, 1))
    if bias is not None:
        out = out + bias
    if activation == "relu":
        return dc.relu(out)
    if activation == "linear":
        return out
    raise ValueError(f"unknown activation {activation!r}")


def mdgcn_forward(X, supports: np.ndarray, params: dict, cfg: MdgcnConfig) -> dc.Value:
    """Spatial embedding E_s (B, N, M, e); the history axis of X is the input feature axis."""
    H = dc.as_value(X)
    for layer, act in enumerate(cfg.layer_activations()):
        H = mdgcn_layer(H, supports, params[f"mdgcn.{layer}.theta"], params[f"mdgcn.{layer}.bias"],
                        act, cfg.mode)
    return H
