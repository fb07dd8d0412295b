"""Point and probabilistic forecast metrics and the selective-regression curve."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .dataset import MinMaxSpec, denormalize_values
from .mpp import V_MIN_DEFAULT, Z_95, DistForecast

EPS_MAPE = 1e-6
EPS_KL = 1e-9
METRIC_NAMES = ("mae", "rmse", "mape", "kl", "mpiw", "crps")
DEFAULT_COVERAGES = tuple(np.round(np.arange(1, 11) / 10, 10))


def deterministic_metrics(Y, Yhat) -> tuple[float, float, float]:
    """(MAE, RMSE, MAPE in percent); MAPE skips entries with |Y| < EPS_MAPE."""
    Y, Yhat = np.asarray(Y, dtype=np.float64), np.asarray(Yhat, dtype=np.float64)
    if Y.shape != Yhat.shape:
        raise ValueError(f"shape mismatch {Y.shape} vs {Yhat.shape}")
    if Y.size == 0:
        raise ValueError("metrics need at least one value")
    err = Y - Yhat
    mae = float(np.abs(err).mean())
    rmse = float(np.sqrt((err ** 2).mean()))
    keep = np.abs(Y) >= EPS_MAPE
    mape = float(100.0 * np.abs(err[keep] / Y[keep]).mean()) if keep.any() else 0.0
    return mae, rmse, mape


def _as_distribution(v: np.ndarray) -> np.ndarray:
    v = np.maximum(np.asarray(v, dtype=np.float64).reshape(-1), EPS_KL)
    return v / v.sum()


def kl_divergence(Y, Yhat) -> float:
    """KL(Y || Yhat) after flooring both at EPS_KL and renormalizing to unit mass."""
    Y, Yhat = np.asarray(Y, dtype=np.float64), np.asarray(Yhat, dtype=np.float64)
    if Y.shape != Yhat.shape:
        raise ValueError(f"shape mismatch {Y.shape} vs {Yhat.shape}")
    if not np.any(Y) or not np.any(Yhat):
        raise ValueError("KL divergence of an all-zero vector is undefined")
    p, q = _as_distribution(Y), _as_distribution(Yhat)
    return float(max((p * np.log(p / q)).sum(), 0.0))


def mpiw(sigma_diag_std) -> float:
    """Mean of 1.96 * sigma over every marginal."""
    return float(Z_95 * np.mean(sigma_diag_std))


def crps_gaussian(x, mu, sigma) -> float:
    """Mean closed-form CRPS of Gaussian marginals; sigma == 0 gives |x - mu|."""
    x, mu, sigma = np.broadcast_arrays(*(np.atleast_1d(np.asarray(a, dtype=np.float64)) for a in (x, mu, sigma)))
    if np.any(sigma < 0):
        raise ValueError("sigma must be >= 0")
    out = np.abs(x - mu)
    pos = sigma > 0
    s = sigma[pos]
    z = (x[pos] - mu[pos]) / s
    out[pos] = s * (z * (2.0 * stats.norm.cdf(z) - 1.0) + 2.0 * stats.norm.pdf(z) - 1.0 / np.sqrt(np.pi))
    return float(out.mean())


# ---------------------------------------------------------------- selective regression

@dataclass
class SelectiveCurve:
    points: list  # [(coverage, mae), ...] with increasing coverage
    score: str = "logdet"

    def to_list(self) -> list:
        return [[c, m] for c, m in self.points]

    def mae_at(self, coverage: float) -> float:
        for c, m in self.points:
            if abs(c - coverage) < 1e-9:
                return m
        raise KeyError(f"no curve point at coverage {coverage}")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["coverage", "mae"])
            for c, m in self.points:
                w.writerow([f"{c:.6g}", f"{m:.6g}"])


def selective_curve(preds, truths, scores, coverages=DEFAULT_COVERAGES, score_name: str = "logdet") -> SelectiveCurve:
    """MAE on the kept samples after abstaining on the highest-score fraction.

    The sample axis is axis 0 of ``preds``/``truths``; ties in ``scores`` keep
    the lower sample index.  ``ceil(c * S)`` samples are kept at coverage c.
    """
    preds, truths = np.asarray(preds, dtype=np.float64), np.asarray(truths, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if preds.shape != truths.shape:
        raise ValueError(f"shape mismatch {preds.shape} vs {truths.shape}")
    S = preds.shape[0]
    if scores.size != S:
        raise ValueError(f"{scores.size} scores for {S} samples")
    per_sample = np.abs(preds - truths).reshape(S, -1).mean(axis=1)
    order = np.argsort(scores, kind="stable")
    covs = sorted(float(c) for c in coverages)
    if any(not 0 < c <= 1 for c in covs) or len(set(covs)) != len(covs):
        raise ValueError("coverages must be distinct values in (0, 1]")
    points = []
    for c in covs:
        k = int(np.ceil(c * S - 1e-9))
        if k < 1:
            raise ValueError(f"coverage {c} keeps no samples out of {S}")
        kept = per_sample[order[:k]] if k < S else per_sample
        points.append((c, float(kept.mean())))
    return SelectiveCurve(points, score_name)


def uncertainty_scores(sigma: np.ndarray, kind: str = "logdet") -> np.ndarray:
    """Per-sample score from covariances (S, T, N, M, M): mean over (T, N) of log|Sigma| or trace."""
    if kind == "logdet":
        sign, ld = np.linalg.slogdet(sigma)
        if np.any(sign <= 0):
            raise ValueError("covariance is not positive definite")
        per = ld
    elif kind == "trace":
        per = np.trace(sigma, axis1=-2, axis2=-1)
    else:
        raise ValueError(f"unknown score {kind!r}")
    return per.reshape(per.shape[0], -1).mean(axis=1)


# ---------------------------------------------------------------- reports

def denormalize_forecast(f: DistForecast, spec: MinMaxSpec) -> DistForecast:
    """Map a normalized forecast (leading axes ..., N) back to original units: Sigma -> D Sigma D."""
    mu = denormalize_values(f.mu, spec, var_axis=f.mu.ndim - 1, region_axis=f.mu.ndim - 2)
    sigma = None
    if f.sigma is not None:
        scale = spec.scale
        sigma = f.sigma * scale[:, :, None] * scale[:, None, :]
    return DistForecast(mu, sigma, f.kind, f.r, f.p, list(f.variable_names))


def with_floor_covariance(f: DistForecast, v_min: float = V_MIN_DEFAULT) -> DistForecast:
    """Point forecasts get Sigma = v_min * I so interval metrics stay defined."""
    if f.sigma is not None:
        return f
    M = f.mu.shape[-1]
    sigma = np.broadcast_to(v_min * np.eye(M), f.mu.shape + (M,)).copy()
    return DistForecast(f.mu, sigma, f.kind, f.r, f.p, list(f.variable_names))


@dataclass
class MetricsReport:
    overall: dict
    per_variable: dict
    selective: SelectiveCurve | None = None
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        out = {"overall": self.overall, "per_variable": self.per_variable}
        if self.selective is not None:
            out["selective"] = self.selective.to_list()
        if self.notes:
            out["notes"] = list(self.notes)
        return out


def six_metrics(Y, mu, std) -> dict:
    mae, rmse, mape = deterministic_metrics(Y, mu)
    return {"mae": mae, "rmse": rmse, "mape": mape, "kl": kl_divergence(Y, mu),
            "mpiw": mpiw(std), "crps": crps_gaussian(Y, mu, std)}


def build_report(forecast: DistForecast, truth: np.ndarray, variable_names, selective: bool = False,
                 score: str = "logdet", score_sigma: np.ndarray | None = None,
                 coverages=DEFAULT_COVERAGES) -> MetricsReport:
    """Score a denormalized forecast against truth shaped like ``forecast.mu``.

    ``score_sigma`` overrides the covariances used for the selective score
    (the normalized-scale ones rank samples identically and stay finite when
    a series was constant during training).
    """
    truth = np.asarray(truth, dtype=np.float64)
    if truth.shape != forecast.mu.shape:
        raise ValueError(f"truth shape {truth.shape} does not match forecast {forecast.mu.shape}")
    names = list(variable_names)
    if len(names) != truth.shape[-1]:
        raise ValueError(f"{len(names)} variable names for {truth.shape[-1]} variables")
    std = forecast.marginal_std()
    notes = []
    if forecast.kind == "negbinom":
        notes.append("crps uses the Gaussian approximation of the negative-binomial head")
    if forecast.kind == "deterministic":
        notes.append("point forecast: interval metrics use the variance floor")
    overall = six_metrics(truth, forecast.mu, std)
    per_var = {n: six_metrics(truth[..., m], forecast.mu[..., m], std[..., m]) for m, n in enumerate(names)}
    curve = None
    if selective:
        sig = forecast.sigma if score_sigma is None else score_sigma
        curve = selective_curve(forecast.mu, truth, uncertainty_scores(sig, score), coverages, score)
    return MetricsReport(overall, per_var, curve, notes)
