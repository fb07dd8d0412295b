"""Region graph construction: thresholded Gaussian-kernel adjacency,
random-walk transition operators, truncated diffusion stationary
distribution and the Chebyshev basis used by the graph convolution."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class RegionGraph:
    distances: np.ndarray
    adjacency: np.ndarray
    sigma2: float
    r: float

    @property
    def n_regions(self) -> int:
        return self.adjacency.shape[0]

    @property
    def edge_count(self) -> int:
        # undirected edges
        return int(np.count_nonzero(np.triu(self.adjacency, 1)))

    @property
    def density(self) -> float:
        n = self.n_regions
        return self.edge_count / (n * (n - 1) / 2) if n > 1 else 0.0


@dataclass(frozen=True)
class DiffusionOps:
    forward: np.ndarray
    backward: np.ndarray


@dataclass(frozen=True)
class ChebBasis:
    """``matrices[k]`` holds T_k for k = 0..order (T_0 is the identity)."""
    order: int
    matrices: np.ndarray

    def terms(self, start: int = 1) -> np.ndarray:
        return self.matrices[start:]


def pairwise_distances(centroids) -> np.ndarray:
    c = np.asarray(centroids, dtype=np.float64)
    if c.ndim != 2:
        raise ValueError(f"centroids must be an (N, dim) array, got shape {c.shape}")
    diff = c[:, None, :] - c[None, :, :]
    return np.sqrt((diff ** 2).sum(axis=-1))


def build_adjacency(distances, sigma2: float, r: float) -> RegionGraph:
    """A_ij = exp(-d_ij^2 / sigma2) for i != j when that weight is >= r, else 0."""
    d = np.asarray(distances, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise ValueError(f"distances must be square, got shape {d.shape}")
    if not sigma2 > 0:
        raise ValueError(f"sigma2 must be > 0, got {sigma2}")
    if not 0 < r <= 1:
        raise ValueError(f"r must lie in (0, 1], got {r}")
    if np.any(d < 0) or not np.all(np.isfinite(d)):
        raise ValueError("distances must be finite and nonnegative")
    if not np.allclose(d, d.T, rtol=0, atol=1e-12):
        raise ValueError("distances must be symmetric")
    if np.any(np.diag(d) != 0):
        raise ValueError("distances must have a zero diagonal")
    w = np.exp(-(d ** 2) / sigma2)
    adj = np.where(w >= r, w, 0.0)
    np.fill_diagonal(adj, 0.0)
    d = d.copy()
    d.flags.writeable = False
    adj.flags.writeable = False
    return RegionGraph(d, adj, float(sigma2), float(r))


def _row_normalize(a: np.ndarray) -> np.ndarray:
    rows = a.sum(axis=1)
    isolated = rows == 0
    out = a / np.where(isolated, 1.0, rows)[:, None]
    # isolated node: self-loop keeps the row stochastic
    out[isolated, isolated] = 1.0
    return out


def diffusion_operators(graph: RegionGraph) -> DiffusionOps:
    """Forward operator D_O^{-1} A and backward operator from A^T, both row-stochastic."""
    return DiffusionOps(_row_normalize(graph.adjacency), _row_normalize(graph.adjacency.T))


def stationary_distribution(ops: DiffusionOps, alpha: float, K: int) -> tuple[np.ndarray, float]:
    """Random walk with restart truncated after K steps.

    Returns ``P = sum_{k=0}^{K} alpha (1 - alpha)^k W^k`` and the retained
    probability mass ``sum_{k=0}^{K} alpha (1 - alpha)^k``.
    """
    if not 0 <= alpha <= 1:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if K < 0:
        raise ValueError(f"K must be >= 0, got {K}")
    W = ops.forward
    n = W.shape[0]
    power = np.eye(n)
    P = np.zeros((n, n))
    mass = 0.0
    for k in range(K + 1):
        coef = alpha * (1.0 - alpha) ** k
        P += coef * power
        mass += coef
        power = power @ W
    return P, mass


def chebyshev_basis(ops: DiffusionOps, K: int, direction: str = "forward") -> ChebBasis:
    """T_0 = I, T_1 = W, T_k = 2 W T_{k-1} - T_{k-2}, evaluated at the transition matrix."""
    if K < 1:
        raise ValueError(f"Chebyshev order must be >= 1, got {K}")
    if direction not in ("forward", "backward"):
        raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")
    W = ops.forward if direction == "forward" else ops.backward
    n = W.shape[0]
    mats = [np.eye(n), W.copy()]
    for _ in range(2, K + 1):
        mats.append(2.0 * W @ mats[-1] - mats[-2])
    out = np.stack(mats)
    out.flags.writeable = False
    return ChebBasis(K, out)


def load_graph(path) -> RegionGraph:
    """Read a graph JSON file.

    Accepts ``{"centroids": [[x, y], ...]}`` or ``{"distances": ...}`` (nested
    rows or a flat row-major list) together with ``"sigma2"`` and ``"r"``.  The
    same keys nested under a top-level ``"graph"`` object are also accepted,
    which lets a dataset metadata file double as the graph file.
    """
    spec = json.loads(Path(path).read_text())
    return graph_from_dict(spec.get("graph", spec))


def graph_from_dict(spec: dict) -> RegionGraph:
    for key in ("sigma2", "r"):
        if key not in spec:
            raise ValueError(f"graph spec missing {key!r}")
    if "centroids" in spec:
        d = pairwise_distances(spec["centroids"])
    elif "distances" in spec:
        d = np.asarray(spec["distances"], dtype=np.float64)
        if d.ndim == 1:
            n = int(round(np.sqrt(d.size)))
            if n * n != d.size:
                raise ValueError(f"flat distance list of length {d.size} is not square")
            d = d.reshape(n, n)
    else:
        raise ValueError("graph spec needs 'centroids' or 'distances'")
    return build_adjacency(d, float(spec["sigma2"]), float(spec["r"]))


def graph_to_dict(centroids, sigma2: float, r: float) -> dict:
    return {"centroids": np.asarray(centroids).tolist(), "sigma2": sigma2, "r": r}
