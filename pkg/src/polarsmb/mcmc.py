"""Gibbs sampler for the hierarchical model, with Metropolis-Hastings
updates for the kernel parameters.

Sweep order per iteration: w, beta, tau2, latent ratings + theta, V,
covariance parameters. The w update is sequential in graph order and exact;
tau2 updates are inverse-CDF draws from truncated inverse-gamma conditionals
that keep tau2_A < tau2_B < tau2_C; kernel parameters move by random walks
on transformed scales (log for rho1/rho2/delta, scaled logit for alpha and
nu) with Jacobian corrections, Robbins-Monro step adaptation toward 30%
acceptance during burn-in only.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.linalg import cho_solve

from . import model as mdl
from .covariance import CovarianceSpec
from .geo import SphereConfig
from .model import Dataset, ModelState, PriorSpec
from .nngp import (
    DegeneracyError,
    FactorWorkspace,
    NNGPFactors,
    _conditional_means,
    build_neighbor_graph,
    nngp_log_density,
    order_reference_set,
)

logger = logging.getLogger(__name__)

MH_PARAMS = ("rho1", "rho2", "alpha", "delta", "nu")


class SamplerError(ArithmeticError):
    """A numerical failure inside an update, annotated with context."""


@dataclass
class SamplerConfig:
    iterations: int = 50_000
    burnin: int = 10_000
    thin: int = 1
    seed: int = 0
    mh_step: dict = field(default_factory=lambda: {p: 0.5 for p in MH_PARAMS})
    adapt: bool = True
    target_accept: float = 0.30
    jitter: float = 1e-10

    def __post_init__(self):
        if self.burnin >= self.iterations:
            raise ValueError("burnin must be smaller than iterations")
        if self.thin < 1:
            raise ValueError("thin must be at least 1")
        steps = {p: 0.5 for p in MH_PARAMS}
        steps.update(self.mh_step)
        if any(s <= 0 for s in steps.values()):
            raise ValueError("MH steps must be positive")
        self.mh_step = steps

    @property
    def n_draws(self) -> int:
        return (self.iterations - self.burnin) // self.thin

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "burnin": self.burnin,
            "thin": self.thin,
            "seed": self.seed,
            "mh_step": dict(self.mh_step),
            "adapt": self.adapt,
            "target_accept": self.target_accept,
            "jitter": self.jitter,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerConfig":
        return cls(**d)


@dataclass
class Chain:
    """Recorded post-burnin, thinned posterior draws with provenance."""

    beta: np.ndarray
    w: np.ndarray
    V: np.ndarray
    tau2: np.ndarray
    theta: np.ndarray
    rho1: np.ndarray
    rho2: np.ndarray
    alpha: np.ndarray
    delta: np.ndarray
    nu: np.ndarray
    labels_b: np.ndarray
    acceptance: dict
    config: SamplerConfig
    cov_template: CovarianceSpec

    @property
    def n_draws(self) -> int:
        return self.beta.shape[0]

    def cov_at(self, j: int) -> CovarianceSpec:
        return self.cov_template.with_params(
            rho1=float(self.rho1[j]),
            rho2=float(self.rho2[j]),
            alpha=float(self.alpha[j]),
            delta=float(self.delta[j]),
            nu=float(self.nu[j]),
        )

    def param_series(self) -> dict:
        """Monitored scalar series for diagnostics, keyed by name."""
        out = {}
        for i in range(self.beta.shape[1]):
            out[f"beta_{i + 1}"] = self.beta[:, i]
        for lbl, col in zip("ABC", range(3)):
            out[f"tau2_{lbl}"] = self.tau2[:, col]
        out["theta"] = self.theta
        p = self.V.shape[1]
        for i in range(p):
            for j in range(i, p):
                out[f"V_{i + 1}{j + 1}"] = self.V[:, i, j]
        for name in MH_PARAMS:
            out[name] = getattr(self, name)
        return out


class SamplerWorkspace:
    """Graph, cached factor geometry, and child-position indexing."""

    def __init__(self, data: Dataset, m: int = 20, order_strategy: str = "maxmin",
                 metric: str = "gc", cfg: SphereConfig = SphereConfig()):
        self.data = data
        self.cfg = cfg
        self.order = order_reference_set(data.sites, order_strategy, cfg)
        self.graph = build_neighbor_graph(data.sites, self.order, m, metric, cfg)
        self.factors_ws = FactorWorkspace(self.graph, data.sites, cfg)
        g = self.graph
        self.child_nodes = []
        self.child_pos = []
        for i in range(g.k):
            ch = g.children[i]
            pos = np.array([int(np.flatnonzero(g.neighbors[t] == i)[0]) for t in ch], dtype=int)
            self.child_nodes.append(ch)
            self.child_pos.append(pos)


def _draw_mvn_from_precision(prec: np.ndarray, lin: np.ndarray, rng) -> np.ndarray:
    """Draw from N(prec^-1 lin, prec^-1) via one Cholesky of the precision."""
    L = np.linalg.cholesky(prec)
    mean = cho_solve((L, True), lin)
    z = rng.standard_normal(lin.shape[0])
    return mean + np.linalg.solve(L.T, z)


def beta_full_conditional(state: ModelState, data: Dataset, priors: PriorSpec):
    """Precision and linear term of the beta full conditional."""
    tau = state.obs_tau2(data)
    Xw = data.X_obs / tau[:, None]
    prec = Xw.T @ data.X_obs + np.linalg.inv(priors.beta_cov)
    resid = data.y - np.einsum("nj,nj->n", data.Z_obs, state.w[data.site_idx])
    lin = np.linalg.solve(priors.beta_cov, priors.beta_mean) + data.X_obs.T @ (resid / tau)
    return prec, lin


def update_beta(state: ModelState, data: Dataset, priors: PriorSpec, rng) -> np.ndarray:
    prec, lin = beta_full_conditional(state, data, priors)
    try:
        return _draw_mvn_from_precision(prec, lin, rng)
    except np.linalg.LinAlgError as exc:
        raise SamplerError(f"beta precision not positive definite: {exc}") from exc


def w_full_conditional(
    i: int,
    w: np.ndarray,
    state: ModelState,
    data: Dataset,
    factors: NNGPFactors,
    ws: SamplerWorkspace,
    Vinv: np.ndarray,
    resid_obs: np.ndarray,
    tau: np.ndarray | None = None,
):
    """Precision and linear term for site i's coefficient vector, combining
    its observations, its parent prior, and its children terms."""
    p = w.shape[1]
    z_i = data.z[i]
    obs = data.obs_at_site[i]
    if tau is None:
        tau = state.obs_tau2(data)
    prec = np.zeros((p, p))
    lin = np.zeros(p)
    if obs.size:
        inv_tau = 1.0 / tau[obs]
        prec += np.outer(z_i, z_i) * inv_tau.sum()
        lin += z_i * np.sum(resid_obs[obs] * inv_tau)

    c_i = factors.counts[i]
    nbrs = factors.NI_pad[i, :c_i]
    parent_mean = factors.B_pad[i, :c_i] @ w[nbrs] if c_i else np.zeros(p)
    scalar_prec = 1.0 / factors.F[i]
    lin_latent = parent_mean / factors.F[i]

    ch = ws.child_nodes[i]
    if len(ch):
        pos = ws.child_pos[i]
        Bti = factors.B_pad[ch, pos]
        Ft = factors.F[ch]
        NI = np.where(factors.NI_pad[ch] < 0, 0, factors.NI_pad[ch])
        pred = np.einsum("cm,cmp->cp", factors.B_pad[ch], w[NI])
        a = w[ch] - pred + Bti[:, None] * w[i]
        scalar_prec += np.sum(Bti**2 / Ft)
        lin_latent += (Bti / Ft) @ a

    prec += scalar_prec * Vinv
    lin += Vinv @ lin_latent
    return prec, lin


def update_w(state: ModelState, data: Dataset, factors: NNGPFactors, ws: SamplerWorkspace, rng) -> np.ndarray:
    """Full sequential sweep of the coefficient field, in graph order."""
    w = state.w.copy()
    Vinv = np.linalg.inv(state.V)
    resid_obs = data.y - data.X_obs @ state.beta
    tau = state.obs_tau2(data)
    for t in range(ws.graph.k):
        i = int(ws.graph.order[t])
        prec, lin = w_full_conditional(i, w, state, data, factors, ws, Vinv, resid_obs, tau)
        try:
            w[i] = _draw_mvn_from_precision(prec, lin, rng)
        except np.linalg.LinAlgError as exc:
            raise SamplerError(f"w precision degenerate at site {i}: {exc}") from exc
    return w


def _trunc_invgamma(rng, a: float, b: float, lo: float, hi: float) -> float:
    """Inverse-CDF draw from IG(a, b) truncated to (lo, hi)."""
    flo = stats.invgamma.cdf(lo, a, scale=b) if lo > 0 else 0.0
    fhi = stats.invgamma.cdf(hi, a, scale=b) if np.isfinite(hi) else 1.0
    if fhi - flo > 1e-12:
        u = rng.uniform(flo, fhi)
        return float(stats.invgamma.ppf(u, a, scale=b))
    # interval mass underflows in CDF space: retry through the survival function
    slo = stats.invgamma.sf(lo, a, scale=b) if lo > 0 else 1.0
    shi = stats.invgamma.sf(hi, a, scale=b) if np.isfinite(hi) else 0.0
    if slo - shi > 1e-12:
        u = rng.uniform(shi, slo)
        return float(stats.invgamma.isf(u, a, scale=b))
    mode = b / (a + 1.0)
    return float(min(max(mode, lo * (1 + 1e-12) if lo > 0 else mode), hi * (1 - 1e-12) if np.isfinite(hi) else mode))


def tau_posterior_params(state: ModelState, data: Dataset, priors: PriorSpec):
    """(shape, rate) of the three IG conditionals under current labels."""
    resid = data.y - mdl.obs_mean(state, data)
    is_a = data.is_a
    nona = data.nona_idx
    r_nona = resid[nona]
    groups = {
        "A": resid[is_a],
        "B": r_nona[state.labels_b],
        "C": r_nona[~state.labels_b],
    }
    prior = {"A": priors.tau_a, "B": priors.tau_b, "C": priors.tau_c}
    out = {}
    for lbl, r in groups.items():
        a0, b0 = prior[lbl]
        out[lbl] = (a0 + 0.5 * r.shape[0], b0 + 0.5 * float(np.sum(r**2)))
    return out


def update_tau(state: ModelState, data: Dataset, priors: PriorSpec, rng) -> np.ndarray:
    """One Gibbs scan of the ordered nugget triple via truncated IG draws."""
    params = tau_posterior_params(state, data, priors)
    ta, tb, tc = state.tau2
    ta = _trunc_invgamma(rng, *params["A"], 0.0, tb)
    tb = _trunc_invgamma(rng, *params["B"], ta, tc)
    tc = _trunc_invgamma(rng, *params["C"], tb, np.inf)
    return np.array([ta, tb, tc])


def update_latent_ratings(state: ModelState, data: Dataset, priors: PriorSpec, rng):
    """Resample non-A labels, then theta from its Beta conditional."""
    nona = data.nona_idx
    if nona.size == 0:
        theta = float(rng.beta(*priors.theta_ab))
        return np.zeros(0, dtype=bool), theta
    resid = (data.y - mdl.obs_mean(state, data))[nona]
    tb, tc = state.tau2[1], state.tau2[2]
    with np.errstate(divide="ignore"):
        log_b = np.log(state.theta) - 0.5 * (np.log(2 * np.pi * tb) + resid**2 / tb)
        log_c = np.log1p(-state.theta) - 0.5 * (np.log(2 * np.pi * tc) + resid**2 / tc)
    p_b = 1.0 / (1.0 + np.exp(np.clip(log_c - log_b, -745, 745)))
    labels = rng.uniform(size=nona.size) < p_b
    n_b = int(labels.sum())
    theta = float(rng.beta(priors.theta_ab[0] + n_b, priors.theta_ab[1] + (labels.size - n_b)))
    return labels, theta


def v_posterior_params(state: ModelState, factors: NNGPFactors, priors: PriorSpec):
    resid = state.w - _conditional_means(state.w, factors)
    S = resid.T @ (resid / factors.F[:, None])
    df = priors.v_df + state.w.shape[0]
    scale = priors.v_scale + S
    return df, scale


def update_V(state: ModelState, factors: NNGPFactors, priors: PriorSpec, rng) -> np.ndarray:
    df, scale = v_posterior_params(state, factors, priors)
    try:
        return np.asarray(stats.invwishart.rvs(df, scale, random_state=rng))
    except np.linalg.LinAlgError as exc:
        raise SamplerError(f"V scale matrix not positive definite: {exc}") from exc


# --- Metropolis-Hastings on kernel parameters ------------------------------

def _to_unconstrained(name: str, x: float) -> float:
    if name in ("rho1", "rho2", "delta"):
        return math.log(x)
    if name == "alpha":
        x = min(max(x / 2.0, 1e-12), 1 - 1e-12)
        return math.log(x / (1 - x))
    x = min(max(x, 1e-12), 1 - 1e-12)
    return math.log(x / (1 - x))


def _from_unconstrained(name: str, t: float) -> float:
    if name in ("rho1", "rho2", "delta"):
        return math.exp(t)
    s = 1.0 / (1.0 + math.exp(-t))
    return 2.0 * s if name == "alpha" else s


def _log_jacobian(name: str, x: float) -> float:
    """log |dx/dt| of the inverse transform, evaluated at x."""
    if name in ("rho1", "rho2", "delta"):
        return math.log(x)
    if name == "alpha":
        return math.log(x * (2.0 - x) / 2.0)
    return math.log(x * (1.0 - x))


def update_cov_params(
    state: ModelState,
    ws: SamplerWorkspace,
    factors: NNGPFactors,
    priors: PriorSpec,
    mh_step: dict,
    rng,
    free=MH_PARAMS,
    current_logdens: float | None = None,
):
    """One random-walk MH scan over the kernel parameters.

    Returns (cov, factors, log_density, accepted, degenerate) where accepted
    and degenerate map parameter name -> bool for this scan.
    """
    cov = state.cov
    if current_logdens is None:
        current_logdens = nngp_log_density(state.w, factors, ws.graph, state.V)
    current_lp = mdl.log_cov_prior(cov, priors)
    accepted = {}
    degenerate = {}
    for name in MH_PARAMS:
        if name not in free:
            continue
        x = getattr(cov, name)
        t_new = _to_unconstrained(name, x) + mh_step[name] * rng.standard_normal()
        x_new = _from_unconstrained(name, t_new)
        try:
            cov_new = cov.with_params(**{name: x_new})
            factors_new = ws.factors_ws.compute_factors(cov_new)
            logdens_new = nngp_log_density(state.w, factors_new, ws.graph, state.V)
        except (DegeneracyError, np.linalg.LinAlgError):
            accepted[name] = False
            degenerate[name] = True
            continue
        lp_new = mdl.log_cov_prior(cov_new, priors)
        if not np.isfinite(logdens_new) or not np.isfinite(lp_new):
            accepted[name] = False
            degenerate[name] = not np.isfinite(logdens_new)
            continue
        log_ratio = (
            logdens_new + lp_new + _log_jacobian(name, x_new)
            - current_logdens - current_lp - _log_jacobian(name, x)
        )
        if math.log(rng.uniform()) < log_ratio:
            cov, factors = cov_new, factors_new
            current_logdens, current_lp = logdens_new, lp_new
            accepted[name] = True
        else:
            accepted[name] = False
        degenerate.setdefault(name, False)
    return cov, factors, current_logdens, accepted, degenerate


def initial_state(data: Dataset, priors: PriorSpec, rng, cov_init: CovarianceSpec | None = None) -> ModelState:
    """Deterministic-ish starting point: prior modes, labels at random."""
    cov = cov_init if cov_init is not None else mdl.default_cov(rho1=0.1, rho2=0.1)
    tau_modes = np.array([
        priors.tau_a[1] / (priors.tau_a[0] + 1),
        priors.tau_b[1] / (priors.tau_b[0] + 1),
        priors.tau_c[1] / (priors.tau_c[0] + 1),
    ])
    return ModelState(
        beta=np.zeros(mdl.P_X),
        w=np.zeros((data.n_sites, mdl.P_Z)),
        V=np.eye(mdl.P_Z),
        tau2=tau_modes,
        theta=0.5,
        labels_b=rng.uniform(size=data.nona_idx.size) < 0.5,
        cov=cov,
    )


def run_chain(
    data: Dataset,
    priors: PriorSpec,
    config: SamplerConfig,
    m: int = 20,
    order_strategy: str = "maxmin",
    metric: str = "gc",
    cfg: SphereConfig = SphereConfig(),
    cov_init: CovarianceSpec | None = None,
    free_params=MH_PARAMS,
) -> Chain:
    """Run one chain; deterministic under config.seed."""
    if data.n_obs == 0:
        raise ValueError("dataset has no observations")
    rng = np.random.default_rng(config.seed)
    ws = SamplerWorkspace(data, m, order_strategy, metric, cfg)
    state = initial_state(data, priors, rng, cov_init)
    factors = ws.factors_ws.compute_factors(state.cov, config.jitter)
    logdens = nngp_log_density(state.w, factors, ws.graph, state.V)

    steps = dict(config.mh_step)
    acc_count = {p: 0 for p in MH_PARAMS}
    deg_count = {p: 0 for p in MH_PARAMS}
    post_count = 0

    n_draws = config.n_draws
    k, p = data.n_sites, mdl.P_Z
    rec = {
        "beta": np.empty((n_draws, mdl.P_X)),
        "w": np.empty((n_draws, k, p)),
        "V": np.empty((n_draws, p, p)),
        "tau2": np.empty((n_draws, 3)),
        "theta": np.empty(n_draws),
        "labels_b": np.empty((n_draws, data.nona_idx.size), dtype=bool),
    }
    for name in MH_PARAMS:
        rec[name] = np.empty(n_draws)

    slot = 0
    for it in range(1, config.iterations + 1):
        try:
            state.w = update_w(state, data, factors, ws, rng)
            state.beta = update_beta(state, data, priors, rng)
            state.tau2 = update_tau(state, data, priors, rng)
            state.labels_b, state.theta = update_latent_ratings(state, data, priors, rng)
            state.V = update_V(state, factors, priors, rng)
            logdens = nngp_log_density(state.w, factors, ws.graph, state.V)
            cov, factors, logdens, accepted, degenerate = update_cov_params(
                state, ws, factors, priors, steps, rng, free_params, logdens
            )
            state.cov = cov
        except (SamplerError, DegeneracyError) as exc:
            dump = (
                f"beta={np.array2string(state.beta, precision=4)} tau2={np.array2string(state.tau2, precision=5)} "
                f"theta={state.theta:.4f} rho1={state.cov.rho1:.5f} rho2={state.cov.rho2:.5f} "
                f"alpha={state.cov.alpha:.4f} delta={state.cov.delta:.4f} nu={state.cov.nu:.4f}"
            )
            raise SamplerError(f"iteration {it}: {exc} | state: {dump}") from exc

        if config.adapt and it <= config.burnin:
            gain = it ** (-0.6)
            for name, ok in accepted.items():
                steps[name] = float(np.clip(steps[name] * math.exp(gain * ((1.0 if ok else 0.0) - config.target_accept)), 1e-3, 20.0))
        if it > config.burnin:
            post_count += 1
            for name, ok in accepted.items():
                acc_count[name] += int(ok)
            for name, bad in degenerate.items():
                deg_count[name] += int(bad)
            if (it - config.burnin) % config.thin == 0 and slot < n_draws:
                rec["beta"][slot] = state.beta
                rec["w"][slot] = state.w
                rec["V"][slot] = state.V
                rec["tau2"][slot] = state.tau2
                rec["theta"][slot] = state.theta
                rec["labels_b"][slot] = state.labels_b
                for name in MH_PARAMS:
                    rec[name][slot] = getattr(state.cov, name)
                slot += 1

    acceptance = {
        name: (acc_count[name] / post_count if post_count and name in (free_params or ()) else float("nan"))
        for name in MH_PARAMS
    }
    acceptance["degenerate_rejections"] = dict(deg_count)
    acceptance["final_steps"] = dict(steps)

    return Chain(
        beta=rec["beta"],
        w=rec["w"],
        V=rec["V"],
        tau2=rec["tau2"],
        theta=rec["theta"],
        rho1=rec["rho1"],
        rho2=rec["rho2"],
        alpha=rec["alpha"],
        delta=rec["delta"],
        nu=rec["nu"],
        labels_b=rec["labels_b"],
        acceptance=acceptance,
        config=config,
        cov_template=state.cov.with_params(rho1=0.1, rho2=0.1, alpha=1.0, delta=1.0, nu=0.5),
    )
