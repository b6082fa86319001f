"""Hierarchical model state: fixed effects, spatially varying coefficients,
the latent measurement-reliability mixture, and priors.

Observations follow y_ij = x_i' beta + z_i' w_i + eps(label_ij) on the
transformed, standardized scale. The kernel variance is fixed at 1; process
scale lives entirely in the 4x4 between-coefficient covariance V. Nuggets
are rating-specific with tau2_A < tau2_B < tau2_C enforced, and each non-A
observation carries a latent B/C label with mixing probability theta.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .covariance import CovarianceSpec, KernelFamily
from .geo import SphereConfig, _as_arrays
from .nngp import build_neighbor_graph, compute_factors, order_reference_set

P_Z = 4  # spatially varying coefficients: intercept, el, dc, temp
P_X = 7  # fixed effects: el, dc, temp and their interactions


def standardize(col):
    """Center/scale a column to mean 0, sd 1; returns (values, mean, sd)."""
    col = np.asarray(col, dtype=float)
    mu = col.mean()
    sd = col.std()
    if sd <= 0:
        raise ValueError("cannot standardize a constant column")
    return (col - mu) / sd, float(mu), float(sd)


def make_design(el, dc, temp):
    """Design rows from standardized covariates.

    x = (el, dc, temp, el*dc, el*temp, dc*temp, el*dc*temp),
    z = (1, el, dc, temp).
    """
    el, dc, temp = (np.asarray(v, dtype=float) for v in (el, dc, temp))
    x = np.column_stack([el, dc, temp, el * dc, el * temp, dc * temp, el * dc * temp])
    z = np.column_stack([np.ones_like(el), el, dc, temp])
    return x, z


@dataclass
class Dataset:
    """Unique sites with standardized covariates plus observations.

    sites is (N_u, 3) [lat, lon, elev_km]; y holds transformed-scale values;
    is_a flags A-rated observations. true_labels_b (simulation only) records
    the latent labels actually used to generate non-A noise.
    """

    sites: np.ndarray
    el: np.ndarray
    dc: np.ndarray
    temp: np.ndarray
    site_idx: np.ndarray
    y: np.ndarray
    is_a: np.ndarray
    true_labels_b: np.ndarray | None = None

    def __post_init__(self):
        self.sites = np.asarray(self.sites, dtype=float)
        self.site_idx = np.asarray(self.site_idx, dtype=int)
        self.y = np.asarray(self.y, dtype=float)
        self.is_a = np.asarray(self.is_a, dtype=bool)
        n_u = self.sites.shape[0]
        if self.site_idx.min(initial=0) < 0 or self.site_idx.max(initial=0) >= n_u:
            raise ValueError("observation references a site outside the reference set")
        for name in ("el", "dc", "temp"):
            col = np.asarray(getattr(self, name), dtype=float)
            setattr(self, name, col)
            if col.shape[0] != n_u:
                raise ValueError(f"covariate {name} must have one value per site")
            if abs(col.mean()) > 1e-8 or abs(col.std() - 1.0) > 1e-6:
                raise ValueError(f"covariate {name} must be centered and scaled")
        self.x, self.z = make_design(self.el, self.dc, self.temp)
        self.X_obs = self.x[self.site_idx]
        self.Z_obs = self.z[self.site_idx]
        self.obs_at_site = [np.flatnonzero(self.site_idx == i) for i in range(n_u)]
        self.nona_idx = np.flatnonzero(~self.is_a)

    @property
    def n_sites(self) -> int:
        return self.sites.shape[0]

    @property
    def n_obs(self) -> int:
        return self.y.shape[0]


@dataclass
class ModelState:
    """One point in parameter space: everything the sampler updates."""

    beta: np.ndarray
    w: np.ndarray
    V: np.ndarray
    tau2: np.ndarray  # (tau2_A, tau2_B, tau2_C)
    theta: float
    labels_b: np.ndarray  # per non-A observation, True = B
    cov: CovarianceSpec

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=float)
        self.w = np.asarray(self.w, dtype=float)
        self.V = np.asarray(self.V, dtype=float)
        self.tau2 = np.asarray(self.tau2, dtype=float)
        self.labels_b = np.asarray(self.labels_b, dtype=bool)
        if not (self.tau2[0] < self.tau2[1] < self.tau2[2]):
            raise ValueError("tau2 ordering tau2_A < tau2_B < tau2_C violated")
        if not (0.0 <= self.theta <= 1.0):
            raise ValueError("theta must lie in [0, 1]")
        if np.linalg.eigvalsh(self.V).min() <= 0:
            raise ValueError("V must be positive definite")
        if abs(self.cov.sigma2 - 1.0) > 1e-12:
            raise ValueError("model kernel must have sigma2 = 1; scale lives in V")

    def copy(self) -> "ModelState":
        return ModelState(
            beta=self.beta.copy(),
            w=self.w.copy(),
            V=self.V.copy(),
            tau2=self.tau2.copy(),
            theta=self.theta,
            labels_b=self.labels_b.copy(),
            cov=self.cov,
        )

    def obs_tau2(self, data: Dataset) -> np.ndarray:
        """Per-observation nugget under the current latent labels."""
        tau = np.full(data.n_obs, self.tau2[0])
        nona = data.nona_idx
        tau[nona] = np.where(self.labels_b, self.tau2[1], self.tau2[2])
        return tau


@dataclass
class PriorSpec:
    """Hyperparameters; Gamma and Inverse-Gamma are shape-rate."""

    tau_a: tuple = (20.0, 6.0)
    tau_b: tuple = (20.0, 8.0)
    tau_c: tuple = (20.0, 10.0)
    theta_ab: tuple = (1.0, 1.0)
    beta_mean: np.ndarray = field(default_factory=lambda: np.zeros(P_X))
    beta_cov: np.ndarray = field(default_factory=lambda: np.eye(P_X))
    rho1: tuple = (2.0, 20.0)
    rho2: tuple = (1.0, 10.0)
    v_scale: np.ndarray = field(default_factory=lambda: np.eye(P_Z))
    v_df: float = float(P_Z + 1)
    alpha_range: tuple = (0.0, 2.0)
    nu_range: tuple = (0.0, 1.0)
    delta: tuple = (1.0, 1.0)

    def __post_init__(self):
        self.beta_mean = np.asarray(self.beta_mean, dtype=float)
        self.beta_cov = np.asarray(self.beta_cov, dtype=float)
        self.v_scale = np.asarray(self.v_scale, dtype=float)
        for name in ("tau_a", "tau_b", "tau_c", "theta_ab", "rho1", "rho2", "delta"):
            a, b = getattr(self, name)
            if a <= 0 or b <= 0:
                raise ValueError(f"prior {name} needs positive shape and rate")

    def to_dict(self) -> dict:
        return {
            "tau_a": list(self.tau_a),
            "tau_b": list(self.tau_b),
            "tau_c": list(self.tau_c),
            "theta_ab": list(self.theta_ab),
            "beta_mean": self.beta_mean.tolist(),
            "beta_cov": self.beta_cov.tolist(),
            "rho1": list(self.rho1),
            "rho2": list(self.rho2),
            "v_scale": self.v_scale.tolist(),
            "v_df": self.v_df,
            "alpha_range": list(self.alpha_range),
            "nu_range": list(self.nu_range),
            "delta": list(self.delta),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PriorSpec":
        kwargs = dict(d)
        for name in ("tau_a", "tau_b", "tau_c", "theta_ab", "rho1", "rho2", "delta", "alpha_range", "nu_range"):
            if name in kwargs:
                kwargs[name] = tuple(kwargs[name])
        for name in ("beta_mean", "beta_cov", "v_scale"):
            if name in kwargs:
                kwargs[name] = np.asarray(kwargs[name], dtype=float)
        return cls(**kwargs)


def obs_mean(state: ModelState, data: Dataset) -> np.ndarray:
    """Per-observation mean x' beta + z' w."""
    return data.X_obs @ state.beta + np.einsum("nj,nj->n", data.Z_obs, state.w[data.site_idx])


def loglik_obs(state: ModelState, data: Dataset) -> float:
    """Observation log likelihood under the current latent labels."""
    resid = data.y - obs_mean(state, data)
    tau = state.obs_tau2(data)
    return float(-0.5 * np.sum(np.log(2.0 * np.pi * tau) + resid**2 / tau))


def log_prior(state: ModelState, priors: PriorSpec) -> float:
    """Joint log prior; -inf outside the support (including the tau ordering)."""
    ta, tb, tc = state.tau2
    if not (0 < ta < tb < tc):
        return -np.inf
    if not (0 <= state.theta <= 1):
        return -np.inf
    c = state.cov
    lo_a, hi_a = priors.alpha_range
    lo_n, hi_n = priors.nu_range
    if not (lo_a < c.alpha <= hi_a) or not (lo_n <= c.nu <= hi_n):
        return -np.inf
    if c.rho1 <= 0 or c.rho2 <= 0 or c.delta <= 0:
        return -np.inf

    lp = 0.0
    lp += stats.invgamma.logpdf(ta, priors.tau_a[0], scale=priors.tau_a[1])
    lp += stats.invgamma.logpdf(tb, priors.tau_b[0], scale=priors.tau_b[1])
    lp += stats.invgamma.logpdf(tc, priors.tau_c[0], scale=priors.tau_c[1])
    lp += stats.beta.logpdf(min(max(state.theta, 1e-300), 1 - 1e-16), *priors.theta_ab)
    lp += float(stats.multivariate_normal.logpdf(state.beta, priors.beta_mean, priors.beta_cov))
    lp += stats.gamma.logpdf(c.rho1, priors.rho1[0], scale=1.0 / priors.rho1[1])
    lp += stats.gamma.logpdf(c.rho2, priors.rho2[0], scale=1.0 / priors.rho2[1])
    lp += stats.gamma.logpdf(c.delta, priors.delta[0], scale=1.0 / priors.delta[1])
    lp += float(stats.invwishart.logpdf(state.V, priors.v_df, priors.v_scale))
    lp += -np.log(hi_a - lo_a) - (np.log(hi_n - lo_n) if hi_n > lo_n else 0.0)
    return float(lp)


def log_cov_prior(cov: CovarianceSpec, priors: PriorSpec) -> float:
    """Prior over the MH-updated kernel parameters only."""
    lo_a, hi_a = priors.alpha_range
    if not (lo_a < cov.alpha <= hi_a) or not (priors.nu_range[0] <= cov.nu <= priors.nu_range[1]):
        return -np.inf
    lp = stats.gamma.logpdf(cov.rho1, priors.rho1[0], scale=1.0 / priors.rho1[1])
    lp += stats.gamma.logpdf(cov.rho2, priors.rho2[0], scale=1.0 / priors.rho2[1])
    lp += stats.gamma.logpdf(cov.delta, priors.delta[0], scale=1.0 / priors.delta[1])
    return float(lp)


def draw_prior_params(priors: PriorSpec, rng: np.random.Generator) -> dict:
    """One draw of every hyperparameter from its prior (tau by rejection on
    the ordering constraint)."""
    while True:
        ta = stats.invgamma.rvs(priors.tau_a[0], scale=priors.tau_a[1], random_state=rng)
        tb = stats.invgamma.rvs(priors.tau_b[0], scale=priors.tau_b[1], random_state=rng)
        tc = stats.invgamma.rvs(priors.tau_c[0], scale=priors.tau_c[1], random_state=rng)
        if ta < tb < tc:
            break
    return {
        "beta": rng.multivariate_normal(priors.beta_mean, priors.beta_cov),
        "tau2": np.array([ta, tb, tc]),
        "theta": float(rng.beta(*priors.theta_ab)),
        "V": stats.invwishart.rvs(priors.v_df, priors.v_scale, random_state=rng),
        "rho1": float(stats.gamma.rvs(priors.rho1[0], scale=1.0 / priors.rho1[1], random_state=rng)),
        "rho2": float(stats.gamma.rvs(priors.rho2[0], scale=1.0 / priors.rho2[1], random_state=rng)),
        "alpha": float(rng.uniform(max(priors.alpha_range[0], 1e-6), priors.alpha_range[1])),
        "nu": float(rng.uniform(*priors.nu_range)),
        "delta": float(stats.gamma.rvs(priors.delta[0], scale=1.0 / priors.delta[1], random_state=rng)),
    }


def draw_w_field(
    sites,
    cov: CovarianceSpec,
    V: np.ndarray,
    rng: np.random.Generator,
    m: int = 20,
    order_strategy: str = "maxmin",
    cfg: SphereConfig = SphereConfig(),
) -> np.ndarray:
    """Sequential draw of the coefficient field from the NNGP prior."""
    order = order_reference_set(sites, order_strategy, cfg)
    graph = build_neighbor_graph(sites, order, m, cfg=cfg)
    factors = compute_factors(graph, sites, cov, cfg=cfg)
    k = graph.k
    p = V.shape[0]
    L = np.linalg.cholesky(V)
    w = np.zeros((k, p))
    noise = rng.standard_normal((k, p))
    for t in range(k):
        i = graph.order[t]
        nbrs = graph.neighbors[i]
        mean = factors.B_pad[i, : len(nbrs)] @ w[nbrs] if len(nbrs) else np.zeros(p)
        w[i] = mean + np.sqrt(factors.F[i]) * (L @ noise[i])
    return w


def simulate_dataset(
    truth: ModelState,
    sites,
    el,
    dc,
    temp,
    frac_a: float,
    obs_per_site: int,
    seed,
    m: int = 20,
    order_strategy: str = "maxmin",
    draw_w: bool = True,
    cfg: SphereConfig = SphereConfig(),
) -> Dataset:
    """Generate a synthetic dataset from the model (transformed scale).

    Raw covariate columns are standardized internally. Ratings are A with
    probability frac_a; non-A noise uses a latent B/C label drawn with the
    truth's theta. Deterministic under seed.
    """
    rng = np.random.default_rng(seed)
    lat, lon, elev = _as_arrays(sites)
    site_arr = np.column_stack([lat, lon, elev])
    n_u = site_arr.shape[0]
    el_s, _, _ = standardize(el)
    dc_s, _, _ = standardize(dc)
    temp_s, _, _ = standardize(temp)
    x, z = make_design(el_s, dc_s, temp_s)

    w = draw_w_field(site_arr, truth.cov, truth.V, rng, m, order_strategy, cfg) if draw_w else truth.w

    site_idx = np.repeat(np.arange(n_u), obs_per_site)
    n = site_idx.shape[0]
    is_a = rng.uniform(size=n) < frac_a
    nona = np.flatnonzero(~is_a)
    labels_b = rng.uniform(size=nona.shape[0]) < truth.theta
    tau = np.full(n, truth.tau2[0])
    tau[nona] = np.where(labels_b, truth.tau2[1], truth.tau2[2])
    mean = x[site_idx] @ truth.beta + np.einsum("nj,nj->n", z[site_idx], w[site_idx])
    y = mean + np.sqrt(tau) * rng.standard_normal(n)

    return Dataset(
        sites=site_arr,
        el=el_s,
        dc=dc_s,
        temp=temp_s,
        site_idx=site_idx,
        y=y,
        is_a=is_a,
        true_labels_b=labels_b,
    )


def default_cov(**overrides) -> CovarianceSpec:
    """Unit-variance non-separable kernel with mild defaults."""
    base = dict(family=KernelFamily.NONSEP_SPHERE, sigma2=1.0, rho1=0.2, rho2=0.5, alpha=1.0, delta=1.0, nu=0.5)
    base.update(overrides)
    return CovarianceSpec(**base)
