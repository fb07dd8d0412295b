"""Full forecaster: parallel spatial (MDGCN) and temporal (ITCN) branches,
Hadamard fusion, then the probabilistic head."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import diffcore as dc
from . import itcn, mdgcn, mpp
from .graph import DiffusionOps, chebyshev_basis

VARIANTS = ("full", "no-mdgcn", "no-itcn", "no-mpp", "indep-univariate")
DISTRIBUTIONS = ("gaussian", "laplace", "negbinom")


@dataclass(frozen=True)
class ModelConfig:
    cheb_order: int = 2
    mdgcn_layers: int = 2
    mdgcn_hidden: int = 16
    embed_dim: int = 16
    shared_theta: bool = False
    itcn_blocks: int = 2
    kernel_size: int = 2
    itcn_channels: int = 8
    dropout: float = 0.1
    temporal_summary: str = "last"
    head_hidden: int = 32
    v_min: float = mpp.V_MIN_DEFAULT
    init_var: float = 0.05

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


def head_kind(variant: str, dist: str) -> str:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {', '.join(VARIANTS)}")
    if dist not in DISTRIBUTIONS:
        raise ValueError(f"unknown distribution {dist!r}; expected one of {', '.join(DISTRIBUTIONS)}")
    if variant == "no-mpp":
        return "deterministic"
    if variant == "indep-univariate":
        if dist != "gaussian":
            raise ValueError("indep-univariate is a Gaussian head; use --dist gaussian")
        return "diag_gaussian"
    return dist


class Forecaster:
    """Parameters live in ``self.params`` (insertion-ordered, names are stable)."""

    def __init__(self, cfg: ModelConfig, n_vars: int, t: int, T: int, supports: np.ndarray,
                 variant: str = "full", dist: str = "gaussian", seed: int = 0):
        self.cfg, self.M, self.t, self.T = cfg, n_vars, t, T
        self.variant, self.dist = variant, dist
        self.supports = np.asarray(supports, dtype=np.float64)
        if self.supports.ndim != 4 or self.supports.shape[:2] != (2, cfg.cheb_order):
            raise ValueError(f"supports must be (2, {cfg.cheb_order}, N, N), got {self.supports.shape}")
        if cfg.shared_theta and variant == "no-mdgcn":
            raise ValueError("shared_theta and no-mdgcn are mutually exclusive")
        mode = "independent" if variant == "no-mdgcn" else ("shared" if cfg.shared_theta else "cross")
        self.mdgcn_cfg = mdgcn.MdgcnConfig(
            layers=cfg.mdgcn_layers, cheb_order=cfg.cheb_order,
            hidden_dims=(cfg.mdgcn_hidden,) * (cfg.mdgcn_layers - 1), embed_dim=cfg.embed_dim, mode=mode)
        self.itcn_cfg = itcn.ItcnConfig(
            blocks=cfg.itcn_blocks, kernel_size=cfg.kernel_size, channels=(cfg.itcn_channels,) * cfg.itcn_blocks,
            dropout=cfg.dropout, embed_dim=cfg.embed_dim, interaction=variant != "no-itcn",
            summary=cfg.temporal_summary)
        self.mpp_cfg = mpp.MppConfig(kind=head_kind(variant, dist), v_min=cfg.v_min,
                                     hidden=cfg.head_hidden, init_var=cfg.init_var)
        rng = np.random.default_rng(seed)
        self.params: dict[str, dc.Value] = {}
        self.params.update(mdgcn.init_params(self.mdgcn_cfg, n_vars, t, rng))
        self.params.update(itcn.init_params(self.itcn_cfg, n_vars, rng))
        self.params.update(mpp.init_params(self.mpp_cfg, n_vars, cfg.embed_dim, T, rng))

    @property
    def kind(self) -> str:
        return self.mpp_cfg.kind

    def n_parameters(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def embed(self, X, streams: itcn.DropoutStreams | None = None) -> dc.Value:
        E_s = mdgcn.mdgcn_forward(X, self.supports, self.params, self.mdgcn_cfg)
        E_t = itcn.itcn_forward(X, self.params, self.itcn_cfg, streams)
        return itcn.fuse_embeddings(E_s, E_t)

    def forward(self, X, streams: itcn.DropoutStreams | None = None) -> mpp.HeadOutput:
        """Windows X (B, N, M, t) -> head outputs with leading axes (B, T, N)."""
        X = dc.as_value(X)
        if X.ndim != 4 or X.shape[2:] != (self.M, self.t) or X.shape[1] != self.supports.shape[-1]:
            raise ValueError(f"expected input (B, {self.supports.shape[-1]}, {self.M}, {self.t}), got {X.shape}")
        return mpp.mpp_forward(self.embed(X, streams), self.params, self.mpp_cfg, self.T)

    def loss(self, X, Y, streams: itcn.DropoutStreams | None = None) -> dc.Value:
        """Batch-mean objective; targets Y are (B, N, M, T) as produced by windowing."""
        target = np.transpose(np.asarray(Y, dtype=np.float64), (0, 3, 1, 2))
        return mpp.head_loss(self.forward(X, streams), target, self.kind)

    def predict(self, X: np.ndarray, batch_size: int = 256) -> mpp.DistForecast:
        """Eval-mode forecast on the normalized scale with leading axes (S, T, N)."""
        parts = []
        for i in range(0, max(len(X), 1), batch_size):
            parts.append(self.forward(X[i:i + batch_size]))
        cat = lambda name: None if getattr(parts[0], name) is None else np.concatenate(
            [getattr(o, name).data for o in parts])
        return mpp.DistForecast(cat("mu"), cat("sigma"), self.kind, cat("r"), cat("p"))

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if list(arrays) != list(self.params):
            missing = set(self.params) ^ set(arrays)
            raise ValueError(f"parameter names do not match the model: {sorted(missing) or 'order differs'}")
        for k, v in arrays.items():
            if v.shape != self.params[k].shape:
                raise ValueError(f"parameter {k}: shape {v.shape} vs model {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)


def supports_for(ops: DiffusionOps, K: int) -> np.ndarray:
    return mdgcn.stack_supports(chebyshev_basis(ops, K, "forward"), chebyshev_basis(ops, K, "backward"))


def build_variant(variant: str, dist: str, cfg: ModelConfig, n_vars: int, t: int, T: int,
                  supports: np.ndarray, seed: int = 0) -> Forecaster:
    head_kind(variant, dist)
    return Forecaster(cfg, n_vars, t, T, supports, variant, dist, seed)
