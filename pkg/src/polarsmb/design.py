"""Sequential site selection minimizing integrated mean squared error.

Each round scores every remaining candidate by hypothetically adding it to
the reference set: its latent coefficient vector is drawn once per retained
posterior state from the m-nearest conditional (composition), grid-node
neighbor sets are recomputed against the augmented reference, and the
area-weighted average of per-state conditional predictive variances on the
original data scale is returned. The round's argmin joins the conditioning
set, with its per-state draws frozen for later rounds.

Pooling the variance across states with fresh per-state candidate draws
would, by the tower property, be blind to the candidate; averaging the
per-state conditional variance is the estimator whose expectation equals
the integrated expected conditional variance the criterion is after.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .geo import AreaGrid, SphereConfig, _as_arrays, central_angle
from .mcmc import Chain
from .model import Dataset, make_design
from .nngp import conditional_weights, prediction_geometry
from .transform import TransformSpec, inverse_with_resample

logger = logging.getLogger(__name__)


class DuplicateSiteError(ValueError):
    """Candidate coincides with a reference or already-selected site."""


@dataclass
class DesignProblem:
    """Candidate sites with covariates, the scoring grid, and budgets.

    Covariate arrays must be on the model's standardized scale. draws is the
    posterior-state budget per IMSE evaluation (minimum 2); inner_draws sets
    the per-state predictive draws used to estimate the original-scale
    conditional variance.
    """

    candidates: np.ndarray
    cand_el: np.ndarray
    cand_dc: np.ndarray
    cand_temp: np.ndarray
    grid: AreaGrid
    grid_el: np.ndarray
    grid_dc: np.ndarray
    grid_temp: np.ndarray
    n_select: int
    m: int = 20
    draws: int = 50
    inner_draws: int = 16
    include_nugget: bool = True
    seed: int = 0

    def __post_init__(self):
        self.candidates = np.atleast_2d(np.asarray(self.candidates, dtype=float))
        if self.candidates.shape[0] == 0:
            raise ValueError("candidate set must be nonempty")
        if self.n_select > self.candidates.shape[0]:
            raise ValueError("n_select exceeds the number of candidates")
        if self.draws < 2:
            raise ValueError("draws must be at least 2 (single-draw variances are degenerate)")
        if self.inner_draws < 2:
            raise ValueError("inner_draws must be at least 2")
        n_c, n_g = self.candidates.shape[0], len(self.grid)
        for name, col, n in (
            ("cand_el", self.cand_el, n_c), ("cand_dc", self.cand_dc, n_c), ("cand_temp", self.cand_temp, n_c),
            ("grid_el", self.grid_el, n_g), ("grid_dc", self.grid_dc, n_g), ("grid_temp", self.grid_temp, n_g),
        ):
            if np.asarray(col).shape[0] != n:
                raise ValueError(f"{name} must have {n} entries")


@dataclass
class DesignResult:
    """Priority-ordered selections and the per-round IMSE landscape."""

    selected_idx: list
    selected_points: np.ndarray
    selected_imse: list
    imse_trace: list = field(default_factory=list)

    def to_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["rank", "lat", "lon", "elev", "imse"])
            for r, (pt, v) in enumerate(zip(self.selected_points, self.selected_imse), start=1):
                writer.writerow([r, repr(float(pt[0])), repr(float(pt[1])), repr(float(pt[2])), repr(float(v))])


class _DesignEngine:
    def __init__(self, problem: DesignProblem, data: Dataset, chain: Chain,
                 transform: TransformSpec, metric: str = "gc", cfg: SphereConfig = SphereConfig()):
        self.pb = problem
        self.data = data
        self.chain = chain
        self.transform = transform
        self.metric = metric
        self.cfg = cfg
        n = chain.n_draws
        if n < 1:
            raise ValueError("chain carries no draws")
        take = min(problem.draws, n)
        self.state_idx = np.unique(np.round(np.linspace(0, n - 1, take)).astype(int))
        self.cov_states = [chain.cov_at(j) for j in self.state_idx]
        self.grid_x, self.grid_z = make_design(problem.grid_el, problem.grid_dc, problem.grid_temp)
        lat, lon, elev = _as_arrays(problem.grid.points)
        self.grid_pts = np.column_stack([lat, lon, elev])
        self.area = problem.grid.cell_area
        self.pending_pts = np.empty((0, 3))
        self.pending_w = np.empty((0, self.state_idx.size, chain.w.shape[2]))

    def _reference(self):
        return np.vstack([self.data.sites, self.pending_pts])

    def _reference_w(self, s: int) -> np.ndarray:
        j = self.state_idx[s]
        if self.pending_pts.shape[0] == 0:
            return self.chain.w[j]
        return np.vstack([self.chain.w[j], self.pending_w[:, s]])

    def _check_duplicate(self, point: np.ndarray) -> None:
        ref = self._reference()
        theta = central_angle(point[0], point[1], ref[:, 0], ref[:, 1])
        close = (theta < 1e-12) & (np.abs(ref[:, 2] - point[2]) < 1e-9)
        if np.any(close):
            raise DuplicateSiteError(
                f"candidate ({point[0]}, {point[1]}, {point[2]}) duplicates reference site {int(np.flatnonzero(close)[0])}"
            )

    def _draw_site_w(self, point: np.ndarray, rng) -> np.ndarray:
        """One latent coefficient draw per retained state at a new site."""
        ref = self._reference()
        geom = prediction_geometry(point[None, :], ref, min(self.pb.m, ref.shape[0]), self.metric, self.cfg)
        p = self.chain.w.shape[2]
        out = np.empty((self.state_idx.size, p))
        for s, j in enumerate(self.state_idx):
            B, F = conditional_weights(geom, self.cov_states[s], self.cfg)
            mean = B[0] @ self._reference_w(s)[geom.NI[0]]
            L = np.linalg.cholesky(self.chain.V[j])
            out[s] = mean + np.sqrt(F[0]) * (L @ rng.standard_normal(p))
        return out

    def imse(self, cand_idx: int, rng) -> float:
        point = self.pb.candidates[cand_idx]
        self._check_duplicate(point)
        cand_w = self._draw_site_w(point, rng)
        aug_sites = np.vstack([self._reference(), point[None, :]])
        geom = prediction_geometry(self.grid_pts, aug_sites, min(self.pb.m, aug_sites.shape[0]), self.metric, self.cfg)
        n_nodes = geom.n
        acc = 0.0
        for s, j in enumerate(self.state_idx):
            B, F = conditional_weights(geom, self.cov_states[s], self.cfg)
            w_aug = np.vstack([self._reference_w(s), cand_w[s][None, :]])
            latent_mean = np.einsum("nm,nmp->np", B, w_aug[geom.NI])
            mean = self.grid_x @ self.chain.beta[j] + np.einsum("np,np->n", self.grid_z, latent_mean)
            zVz = np.einsum("np,pq,nq->n", self.grid_z, self.chain.V[j], self.grid_z)
            var = F * zVz
            if self.pb.include_nugget:
                var = var + self.chain.tau2[j, 0]
            sd = np.sqrt(np.maximum(var, 0.0))
            vals, _, _ = inverse_with_resample(
                lambda: mean[:, None] + sd[:, None] * rng.standard_normal((n_nodes, self.pb.inner_draws)),
                self.transform,
            )
            acc += float(self.area @ vals.var(axis=1))
        return acc / self.state_idx.size

    def commit(self, cand_idx: int, rng) -> None:
        point = self.pb.candidates[cand_idx]
        w = self._draw_site_w(point, rng)
        self.pending_pts = np.vstack([self.pending_pts, point[None, :]])
        self.pending_w = np.concatenate([self.pending_w, w[None, :, :]], axis=0)


def imse_candidate(
    candidate: np.ndarray,
    problem: DesignProblem,
    data: Dataset,
    chain: Chain,
    transform: TransformSpec,
    seed: int = 0,
    metric: str = "gc",
    cfg: SphereConfig = SphereConfig(),
) -> float:
    """IMSE of a single hypothetical site against the problem's grid.

    candidate is (lat, lon, elev); it must match a row of
    problem.candidates so its covariates are known.
    """
    engine = _DesignEngine(problem, data, chain, transform, metric, cfg)
    cand = np.asarray(candidate, dtype=float)
    match = np.flatnonzero(np.all(np.isclose(problem.candidates, cand[None, :]), axis=1))
    if match.size == 0:
        raise ValueError("candidate not found in problem.candidates")
    rng = np.random.default_rng([seed, 0, int(match[0])])
    return engine.imse(int(match[0]), rng)


def select_sites(
    problem: DesignProblem,
    data: Dataset,
    chain: Chain,
    transform: TransformSpec,
    metric: str = "gc",
    cfg: SphereConfig = SphereConfig(),
) -> DesignResult:
    """Greedy sequential selection: each round takes the IMSE argmin and
    freezes its per-state predictive draws as conditioning data."""
    engine = _DesignEngine(problem, data, chain, transform, metric, cfg)
    remaining = list(range(problem.candidates.shape[0]))
    selected, sel_imse, trace = [], [], []
    for r in range(problem.n_select):
        scores = {}
        for idx in remaining:
            rng = np.random.default_rng([problem.seed, r, idx])
            scores[idx] = engine.imse(idx, rng)
        winner = min(scores, key=lambda i: (scores[i], i))
        trace.append(scores)
        selected.append(winner)
        sel_imse.append(scores[winner])
        engine.commit(winner, np.random.default_rng([problem.seed, r, 1_000_003]))
        remaining.remove(winner)
        logger.info("round %d: selected candidate %d (IMSE %.6g)", r + 1, winner, scores[winner])
    return DesignResult(
        selected_idx=selected,
        selected_points=problem.candidates[selected],
        selected_imse=sel_imse,
        imse_trace=trace,
    )
