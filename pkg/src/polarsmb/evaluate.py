"""Holdout model comparison and chain convergence diagnostics.

Scoring: predictive RMSE, 90% interval coverage (empirical 5th/95th
predictive percentiles), and the continuous ranked probability score in its
empirical-CDF form

    CRPS = (1/m) sum_j |Y_j - y| - (1/(2 m^2)) sum_j sum_k |Y_j - Y_k|,

computed in O(m log m) through the sorted-sample identity. The Geweke
stationarity z-score compares the first 10% of a chain to the last 50%,
with Bartlett-windowed spectral variance estimates (lag floor(sqrt(n))).
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)


class DegenerateChainError(ValueError):
    """A chain segment was constant; the z-score is undefined."""


def crps_ecdf(samples, y: float) -> float:
    """Empirical-CDF CRPS of a predictive sample against one observation."""
    s = np.asarray(samples, dtype=float)
    if s.ndim != 1 or s.shape[0] == 0:
        raise ValueError("samples must be a nonempty 1-d collection")
    m = s.shape[0]
    term1 = float(np.mean(np.abs(s - y)))
    x = np.sort(s)
    # sum_{j,k} |x_j - x_k| = 2 * sum_j (2j - 1 - m) x_(j), j 1-indexed
    coef = 2.0 * np.arange(1, m + 1) - 1.0 - m
    term2 = float(coef @ x) / (m * m)
    return term1 - term2


def prmse(pred_means, y) -> float:
    """Root mean squared prediction error."""
    p = np.asarray(pred_means, dtype=float)
    t = np.asarray(y, dtype=float)
    if p.shape != t.shape or p.size == 0:
        raise ValueError("pred and y must be nonempty and equal length")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def coverage(intervals, y, nominal: float = 0.90) -> float:
    """Fraction of observations inside their [lo, hi] intervals, inclusive."""
    iv = np.asarray(intervals, dtype=float)
    t = np.asarray(y, dtype=float)
    if iv.ndim != 2 or iv.shape[1] != 2 or iv.shape[0] != t.shape[0]:
        raise ValueError("intervals must be (n, 2) matching y")
    if np.any(iv[:, 0] > iv[:, 1]):
        raise ValueError("malformed interval: lo > hi")
    return float(np.mean((t >= iv[:, 0]) & (t <= iv[:, 1])))


def _spectral_var(x: np.ndarray) -> float:
    """Spectral density at zero via a Bartlett window, lag floor(sqrt(n))."""
    n = x.shape[0]
    xc = x - x.mean()
    if np.all(xc == 0):
        raise DegenerateChainError("constant chain segment")
    lag = int(math.floor(math.sqrt(n)))
    gamma0 = float(xc @ xc) / n
    s = gamma0
    for l in range(1, lag + 1):
        gamma_l = float(xc[:-l] @ xc[l:]) / n
        s += 2.0 * (1.0 - l / (lag + 1.0)) * gamma_l
    return max(s, 0.0)


def geweke_z(chain_values, frac_first: float = 0.10, frac_last: float = 0.50) -> float:
    """Stationarity z-score between early and late chain segments."""
    x = np.asarray(chain_values, dtype=float)
    n = x.shape[0]
    if n < 100:
        raise ValueError("chain must have at least 100 values")
    n1 = int(math.floor(frac_first * n))
    n2 = int(math.floor(frac_last * n))
    a, b = x[:n1], x[n - n2:]
    s1, s2 = _spectral_var(a), _spectral_var(b)
    denom = math.sqrt(s1 / n1 + s2 / n2)
    if denom == 0:
        raise DegenerateChainError("zero spectral variance in both segments")
    return float((a.mean() - b.mean()) / denom)


@dataclass
class HoldoutPlan:
    replicates: int = 100
    holdout_size: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.replicates < 1 or self.holdout_size < 1:
            raise ValueError("replicates and holdout_size must be positive")


@dataclass
class ScoreReport:
    """Aggregate and per-replicate scores, one row per model."""

    models: list
    prmse: dict
    coverage90: dict
    crps: dict
    per_replicate: dict = field(default_factory=dict)
    failures: dict = field(default_factory=dict)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["model", "prmse", "coverage90", "crps"])
            for name in self.models:
                writer.writerow([name, repr(self.prmse[name]), repr(self.coverage90[name]), repr(self.crps[name])])


def score_predictions(draws: np.ndarray, y_true: np.ndarray) -> tuple:
    """(prmse, coverage90, mean crps) of raw-scale predictive draws."""
    means = draws.mean(axis=1)
    lo = np.percentile(draws, 5.0, axis=1)
    hi = np.percentile(draws, 95.0, axis=1)
    cov90 = coverage(np.column_stack([lo, hi]), y_true)
    crps_vals = [crps_ecdf(draws[i], float(y_true[i])) for i in range(draws.shape[0])]
    return prmse(means, y_true), cov90, float(np.mean(crps_vals))


def run_holdout(raw, plan: HoldoutPlan, models: dict, fit_and_predict, max_fail_frac: float = 0.05) -> ScoreReport:
    """Replicate A-rated holdout scoring across model configurations.

    raw is a dataio.RawData; models maps name -> model kwargs handed to
    fit_and_predict(raw_train, holdout_sites_raw, kwargs, rng, y_true) which
    returns raw-scale predictive draws at the held-out observations. Failed
    fits are excluded with a warning when under max_fail_frac, otherwise
    raised.
    """
    a_idx = np.flatnonzero(raw.rating == "A")
    if a_idx.size <= plan.holdout_size:
        raise ValueError(
            f"holdout size {plan.holdout_size} needs more than the {a_idx.size} A-rated observations available"
        )
    names = list(models)
    per_rep = {name: [] for name in names}
    failures = {name: [] for name in names}
    for rep in range(plan.replicates):
        rng = np.random.default_rng([plan.seed, rep])
        held = rng.choice(a_idx, size=plan.holdout_size, replace=False)
        train = raw.drop_obs(held)
        y_true = raw.smb[held]
        for name in names:
            try:
                draws = fit_and_predict(train, raw.obs_points(held), models[name], rng, y_true)
                per_rep[name].append(score_predictions(draws, y_true))
            except Exception as exc:  # noqa: BLE001 - replicate isolation is the contract
                failures[name].append((rep, repr(exc)))
                logger.warning("replicate %d model %s failed: %s", rep, name, exc)
    for name in names:
        n_fail = len(failures[name])
        if n_fail and n_fail / plan.replicates >= max_fail_frac:
            raise RuntimeError(f"model {name}: {n_fail}/{plan.replicates} replicate fits failed")
    agg_prmse, agg_cov, agg_crps = {}, {}, {}
    for name in names:
        arr = np.asarray(per_rep[name], dtype=float)
        if arr.size == 0:
            raise RuntimeError(f"model {name}: no successful replicates")
        agg_prmse[name] = float(arr[:, 0].mean())
        agg_cov[name] = float(arr[:, 1].mean())
        agg_crps[name] = float(arr[:, 2].mean())
    return ScoreReport(
        models=names,
        prmse=agg_prmse,
        coverage90=agg_cov,
        crps=agg_crps,
        per_replicate=per_rep,
        failures=failures,
    )
