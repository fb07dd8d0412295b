"""Spatiotemporal tensors: loading, max-min normalization, chronological
splits, sliding windows and a synthetic generator with known noise
covariance."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .graph import RegionGraph, diffusion_operators


@dataclass(frozen=True)
class MinMaxSpec:
    lo: np.ndarray  # (N, M), after offset
    hi: np.ndarray  # (N, M), after offset
    offset: np.ndarray  # (M,)

    @property
    def scale(self) -> np.ndarray:
        return self.hi - self.lo

    def to_dict(self) -> dict:
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist(), "offset": self.offset.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "MinMaxSpec":
        return cls(np.asarray(d["lo"], dtype=np.float64), np.asarray(d["hi"], dtype=np.float64),
                   np.asarray(d["offset"], dtype=np.float64))


@dataclass(frozen=True)
class STTensor:
    values: np.ndarray  # (N, M, L)
    variable_names: tuple[str, ...]
    step_minutes: float = 60.0
    norm_state: MinMaxSpec | None = None
    time_index: np.ndarray = field(default=None)  # source time index per step
    region_ids: tuple[str, ...] = ()

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3 or v.shape[2] < 1:
            raise ValueError(f"values must have shape (N, M, L) with L >= 1, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("values contain NaN or Inf")
        if len(self.variable_names) != v.shape[1]:
            raise ValueError(f"{len(self.variable_names)} variable names for {v.shape[1]} variables")
        object.__setattr__(self, "values", v)
        if self.time_index is None:
            object.__setattr__(self, "time_index", np.arange(v.shape[2]))
        if not self.region_ids:
            object.__setattr__(self, "region_ids", tuple(str(i) for i in range(v.shape[0])))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    @property
    def length(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class WindowSet:
    inputs: np.ndarray  # (S, N, M, t)
    targets: np.ndarray  # (S, N, M, T)
    start: np.ndarray  # source time index of each input window's first step

    def __len__(self) -> int:
        return self.inputs.shape[0]


def _fit_indices(fit_range, length: int) -> np.ndarray:
    idx = np.arange(length)[fit_range] if isinstance(fit_range, slice) else np.asarray(fit_range, dtype=int)
    if idx.size == 0:
        raise ValueError("normalization fit range is empty")
    return idx


def minmax_normalize(x: STTensor, fit_range=slice(None), per: str = "region_variable",
                     offset=None) -> tuple[STTensor, MinMaxSpec]:
    """Scale to [0, 1] with min/max fitted on ``fit_range`` (time indices).

    Constant series map to 0.  ``offset`` (per variable) is added before
    fitting and recorded so it can be undone.
    """
    if x.norm_state is not None:
        raise ValueError("tensor is already normalized")
    n, m, _ = x.shape
    idx = _fit_indices(fit_range, x.length)
    off = np.zeros(m) if offset is None else np.asarray(offset, dtype=np.float64).reshape(m)
    shifted = x.values + off[None, :, None]
    fit = shifted[:, :, idx]
    if per == "region_variable":
        lo, hi = fit.min(axis=2), fit.max(axis=2)
    elif per == "variable":
        lo = np.broadcast_to(fit.min(axis=(0, 2)), (n, m)).copy()
        hi = np.broadcast_to(fit.max(axis=(0, 2)), (n, m)).copy()
    else:
        raise ValueError(f"unknown normalization granularity {per!r}")
    spec = MinMaxSpec(lo, hi, off)
    return apply_minmax(x, spec), spec


def nonnegative_offset(x: STTensor) -> np.ndarray:
    """Per-variable shift |min| + 1 for heads that forbid negative support."""
    return np.abs(x.values.min(axis=(0, 2))) + 1.0


def apply_minmax(x: STTensor, spec: MinMaxSpec) -> STTensor:
    _check_spec(x, spec)
    scale = spec.scale
    safe = np.where(scale > 0, scale, 1.0)
    shifted = x.values + spec.offset[None, :, None]
    out = np.where((scale > 0)[..., None], (shifted - spec.lo[..., None]) / safe[..., None], 0.0)
    return replace(x, values=out, norm_state=spec)


def denormalize(x: STTensor, spec: MinMaxSpec) -> STTensor:
    _check_spec(x, spec)
    return replace(x, values=denormalize_values(x.values, spec, var_axis=1, region_axis=0),
                   norm_state=None)


def denormalize_values(values: np.ndarray, spec: MinMaxSpec, var_axis: int, region_axis: int) -> np.ndarray:
    """Invert the scaling on an arbitrary array carrying region and variable axes."""
    values = np.asarray(values, dtype=np.float64)
    lo, scale = spec.lo, spec.scale
    if region_axis > var_axis:
        lo, scale = lo.T, scale.T
    shape = [1] * values.ndim
    shape[min(region_axis, var_axis)] = lo.shape[0]
    shape[max(region_axis, var_axis)] = lo.shape[1]
    off_shape = [1] * values.ndim
    off_shape[var_axis] = spec.offset.size
    return values * scale.reshape(shape) + lo.reshape(shape) - spec.offset.reshape(off_shape)


def _check_spec(x: STTensor, spec: MinMaxSpec) -> None:
    n, m, _ = x.shape
    if spec.lo.shape != (n, m) or spec.offset.shape != (m,):
        raise ValueError(f"normalization spec shape {spec.lo.shape} does not match tensor {(n, m)}")


def chronological_split(x: STTensor, ratios=(8, 1, 1)) -> tuple[STTensor, STTensor, STTensor]:
    """Contiguous train/val/test blocks of floor(0.8L) / floor(0.1L) / remainder."""
    L = x.length
    if L < 10:
        raise ValueError(f"need at least 10 time steps to split, got {L}")
    total = float(sum(ratios))
    n_train = int(np.floor(L * ratios[0] / total))
    n_val = int(np.floor(L * ratios[1] / total))
    cuts = [(0, n_train), (n_train, n_train + n_val), (n_train + n_val, L)]
    return tuple(replace(x, values=x.values[:, :, a:b], time_index=x.time_index[a:b]) for a, b in cuts)


def window(x: STTensor, t: int = 12, T: int = 1) -> WindowSet:
    """Stride-1 windows: ``L - t - T + 1`` (input, target) pairs."""
    L = x.length
    if t < 1 or T < 1:
        raise ValueError(f"window lengths must be >= 1, got t={t}, T={T}")
    if L < t + T:
        raise ValueError(f"series of length {L} too short for t={t}, T={T}")
    view = np.lib.stride_tricks.sliding_window_view(x.values, t + T, axis=2)  # (N, M, S, t+T)
    view = np.moveaxis(view, 2, 0)
    return WindowSet(np.ascontiguousarray(view[..., :t]), np.ascontiguousarray(view[..., t:]),
                     x.time_index[: L - t - T + 1].copy())


# ---------------------------------------------------------------- file formats

def load_csv(data_path, meta_path, fill: str = "zero") -> STTensor:
    """Read long-format ``time_index,region_id,variable,value`` rows into a dense tensor."""
    if fill not in ("zero", "error"):
        raise ValueError(f"unknown fill policy {fill!r}")
    meta = json.loads(Path(meta_path).read_text())
    regions = [str(r) for r in meta["regions"]]
    variables = [str(v) for v in meta["variables"]]
    step = float(meta.get("step_minutes", 60))
    r_pos = {r: i for i, r in enumerate(regions)}
    v_pos = {v: i for i, v in enumerate(variables)}
    cells: dict[tuple[int, int, int], float] = {}
    max_t = -1
    with open(data_path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"time_index", "region_id", "variable", "value"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{data_path}: missing columns {sorted(missing)}")
        for row_no, row in enumerate(reader, start=2):
            try:
                t = int(row["time_index"])
                value = float(row["value"])
            except (TypeError, ValueError):
                raise ValueError(f"{data_path} row {row_no}: non-numeric time_index or value") from None
            if t < 0:
                raise ValueError(f"{data_path} row {row_no}: negative time_index {t}")
            if row["region_id"] not in r_pos:
                raise ValueError(f"{data_path} row {row_no}: unknown region {row['region_id']!r}")
            if row["variable"] not in v_pos:
                raise ValueError(f"{data_path} row {row_no}: unknown variable {row['variable']!r}")
            key = (r_pos[row["region_id"]], v_pos[row["variable"]], t)
            if key in cells:
                raise ValueError(f"{data_path} row {row_no}: duplicate cell "
                                 f"(t={t}, region={row['region_id']}, variable={row['variable']})")
            if not np.isfinite(value):
                raise ValueError(f"{data_path} row {row_no}: value is not finite")
            cells[key] = value
            max_t = max(max_t, t)
    if max_t < 0:
        raise ValueError(f"{data_path}: no data rows")
    values = np.zeros((len(regions), len(variables), max_t + 1))
    if fill == "error" and len(cells) != values.size:
        raise ValueError(f"{data_path}: {values.size - len(cells)} missing cells and fill policy is 'error'")
    for (i, j, t), v in cells.items():
        values[i, j, t] = v
    return STTensor(values, tuple(variables), step, region_ids=tuple(regions))


def write_csv(x: STTensor, data_path, meta_path, extra_meta: dict | None = None) -> None:
    n, m, L = x.shape
    with open(data_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time_index", "region_id", "variable", "value"])
        for t in range(L):
            for i in range(n):
                for j in range(m):
                    w.writerow([t, x.region_ids[i], x.variable_names[j], f"{x.values[i, j, t]:.6g}"])
    meta = {"regions": list(x.region_ids), "variables": list(x.variable_names),
            "step_minutes": x.step_minutes}
    if extra_meta:
        meta.update(extra_meta)
    Path(meta_path).write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------- synthetic data

def noise_covariance(m: int, cross_corr: float, noise_scale: float) -> np.ndarray:
    if not -1 <= cross_corr <= 1:
        raise ValueError("correlation must be in [-1,1]")
    if m < 2 and cross_corr != 0:
        raise ValueError("cross_corr != 0 needs at least two variables")
    C = noise_scale ** 2 * ((1 - cross_corr) * np.eye(m) + cross_corr * np.ones((m, m)))
    if np.linalg.eigvalsh(C).min() <= 0:
        raise ValueError(f"cross_corr={cross_corr} gives a non positive-definite covariance for M={m}")
    return C


def random_centroids(n: int, seed: int = 0, extent: float = 10.0) -> np.ndarray:
    return np.random.default_rng([seed, 17]).uniform(0.0, extent, size=(n, 2))


@dataclass
class SyntheticData:
    tensor: STTensor
    truth: np.ndarray  # (L, M, M) noise covariance per step
    signal: np.ndarray  # (N, M, L)
    noise: np.ndarray  # (N, M, L)
    step_scale: np.ndarray  # (L,)
    base_covariance: np.ndarray  # (M, M)

    def truth_dict(self) -> dict:
        return {"base_covariance": self.base_covariance.tolist(),
                "step_scale": self.step_scale.tolist()}


def generate_synthetic(n: int, m: int, length: int, graph: RegionGraph, cross_corr: float = 0.0,
                       noise_scale: float = 1.0, seed: int = 0, heteroscedastic: bool = False,
                       mode: str = "mixed", lag: int = 1, period: int = 24,
                       hetero_ratio: float = 5.0) -> SyntheticData:
    """Multivariate graph signals plus Gaussian noise of known covariance.

    ``mode="mixed"``: per-region latent daily cycles plus a mean-reverting
    random walk, smoothed over the graph and mixed across variables.
    ``mode="lagged"``: variable 1 is the observation of variable 0 delayed
    by ``lag`` steps and diffused one lazy step, 0.5 (I + W), over the graph.

    With ``heteroscedastic`` the noise standard deviation follows the daily
    cycle between 1x and ``hetero_ratio``x.
    """
    if graph.n_regions != n:
        raise ValueError(f"graph has {graph.n_regions} regions, expected {n}")
    if mode == "lagged" and m < 2:
        raise ValueError("lagged mode needs at least two variables")
    if mode not in ("mixed", "lagged"):
        raise ValueError(f"unknown mode {mode!r}")
    C = noise_covariance(m, cross_corr, noise_scale)
    rng = np.random.default_rng(seed)
    W = diffusion_operators(graph).forward
    pad = lag if mode == "lagged" else 0
    total = length + pad
    t = np.arange(total)

    amp = rng.uniform(1.0, 3.0, size=(n, m, 1))
    phase = rng.uniform(0.0, 2 * np.pi, size=(n, m, 1))
    phase2 = rng.uniform(0.0, 2 * np.pi, size=(n, m, 1))
    cycle = 2 * np.pi * t / period
    latent = amp * (np.sin(cycle + phase) + 0.4 * np.sin(2 * cycle + phase2))
    drift = np.zeros((n, m, total))
    steps = rng.normal(0.0, 0.05 * noise_scale, size=(n, m, total))
    for k in range(1, total):
        drift[:, :, k] = 0.95 * drift[:, :, k - 1] + steps[:, :, k]
    latent = latent + drift
    latent = 0.5 * latent + 0.5 * np.einsum("ij,jml->iml", W, latent)

    if heteroscedastic:
        scale = 1.0 + (hetero_ratio - 1.0) * 0.5 * (1.0 - np.cos(cycle))
    else:
        scale = np.ones(total)
    chol = np.linalg.cholesky(C)
    noise = np.einsum("ab,nbl->nal", chol, rng.standard_normal((n, m, total))) * scale

    if mode == "mixed":
        mix = np.eye(m) + 0.3 * rng.uniform(-1.0, 1.0, size=(m, m)) * (1 - np.eye(m))
        signal = np.einsum("ab,nbl->nal", mix, latent)
        values = 10.0 + signal + noise
    else:
        signal = latent.copy()
        values = 10.0 + signal + noise
        observed0 = values[:, 0, :]
        copy = np.zeros_like(observed0)
        lazy = 0.5 * (np.eye(n) + W)
        copy[:, lag:] = lazy @ observed0[:, :-lag] if lag > 0 else lazy @ observed0
        copy[:, :lag] = copy[:, lag:lag + 1]
        signal[:, 1, :] = copy - 10.0
        values[:, 1, :] = copy + noise[:, 1, :]

    sl = slice(pad, None)
    values, signal, noise, scale = values[:, :, sl], signal[:, :, sl], noise[:, :, sl], scale[sl]
    names = tuple(f"var{j}" for j in range(m))
    tensor = STTensor(values, names, 60.0)
    truth = scale[:, None, None] ** 2 * C
    return SyntheticData(tensor, truth, signal, noise, scale, C)
