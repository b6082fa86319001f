import numpy as np
import pytest

from polarsmb.covariance import cov_matrix
from polarsmb.design import DesignProblem, DuplicateSiteError, imse_candidate, select_sites
from polarsmb.geo import AreaGrid, GeoPoint
from polarsmb.model import default_cov, standardize
from polarsmb.transform import wide_identity

from test_model import toy_dataset
from test_predict import make_chain

IDENTITY = wide_identity()


def unit_cov(n, rng):
    el, _, _ = standardize(rng.uniform(0, 4, n)) if n > 1 else (np.zeros(n), 0, 1)
    dc, _, _ = standardize(rng.uniform(0, 1500, n)) if n > 1 else (np.zeros(n), 0, 1)
    temp, _, _ = standardize(rng.normal(240, 10, n)) if n > 1 else (np.zeros(n), 0, 1)
    return el, dc, temp


def make_problem(rng, data, candidates, grid_points, areas, n_select=1, draws=20, inner=32, nugget=False, seed=0, m=10):
    n_c, n_g = len(candidates), len(grid_points)
    c_el, c_dc, c_temp = rng.standard_normal(n_c), rng.standard_normal(n_c), rng.standard_normal(n_c)
    g_el, g_dc, g_temp = rng.standard_normal(n_g), rng.standard_normal(n_g), rng.standard_normal(n_g)
    grid = AreaGrid(points=[GeoPoint(*p) for p in grid_points], cell_area=np.asarray(areas, dtype=float))
    return DesignProblem(
        candidates=np.asarray(candidates, dtype=float),
        cand_el=c_el, cand_dc=c_dc, cand_temp=c_temp,
        grid=grid, grid_el=g_el, grid_dc=g_dc, grid_temp=g_temp,
        n_select=n_select, m=m, draws=draws, inner_draws=inner,
        include_nugget=nugget, seed=seed,
    )


def dense_imse_oracle(data, spec, cand_point, grid_points, areas, zVz_grid):
    """Area-weighted kriging variances after adding the candidate (no nugget)."""
    total = 0.0
    aug = np.vstack([data.sites, cand_point[None, :]])
    C = cov_matrix(aug, aug, spec)
    for g, a in zip(grid_points, areas):
        c = cov_matrix(np.asarray(g)[None, :], aug, spec)[0]
        var = max(1.0 - c @ np.linalg.solve(C, c), 0.0)
        total += a * var * zVz_grid
    return total


class TestProblemValidation:
    def test_min_draws_guard(self):
        rng = np.random.default_rng(0)
        data = toy_dataset(rng, 5, 1)
        with pytest.raises(ValueError, match="draws"):
            make_problem(rng, data, [[-75.0, 0.0, 1.0]], [[-76.0, 5.0, 1.0]], [1e5], draws=1)

    def test_empty_candidates(self):
        rng = np.random.default_rng(1)
        with pytest.raises(ValueError):
            make_problem(rng, None, np.empty((0, 3)), [[-76.0, 5.0, 1.0]], [1e5])

    def test_n_select_bounded(self):
        rng = np.random.default_rng(2)
        with pytest.raises(ValueError):
            make_problem(rng, None, [[-75.0, 0.0, 1.0]], [[-76.0, 5.0, 1.0]], [1e5], n_select=2)


class TestSelectSites:
    def test_zero_rounds(self):
        rng = np.random.default_rng(3)
        data = toy_dataset(rng, 6, 1)
        chain = make_chain(10, 6, rng)
        problem = make_problem(rng, data, [[-75.0, 0.0, 1.0]], [[-76.0, 5.0, 1.0]], [1e5], n_select=0)
        result = select_sites(problem, data, chain, IDENTITY)
        assert result.selected_idx == []
        assert result.imse_trace == []

    def test_single_candidate(self):
        rng = np.random.default_rng(4)
        data = toy_dataset(rng, 6, 1)
        chain = make_chain(10, 6, rng)
        problem = make_problem(rng, data, [[-75.0, 0.0, 1.0]], [[-76.0, 5.0, 1.0]], [1e5], n_select=1)
        result = select_sites(problem, data, chain, IDENTITY)
        assert result.selected_idx == [0]
        np.testing.assert_allclose(result.selected_points[0], [-75.0, 0.0, 1.0])

    def test_duplicate_candidate_rejected(self):
        rng = np.random.default_rng(5)
        data = toy_dataset(rng, 6, 1)
        chain = make_chain(10, 6, rng)
        dup = data.sites[2].tolist()
        problem = make_problem(rng, data, [dup], [[-76.0, 5.0, 1.0]], [1e5], n_select=1)
        with pytest.raises(DuplicateSiteError):
            select_sites(problem, data, chain, IDENTITY)

    def test_reproducible_under_seed(self):
        rng = np.random.default_rng(6)
        data = toy_dataset(rng, 8, 1)
        chain = make_chain(12, 8, rng)
        cands = [[-75.0, 0.0, 1.0], [-80.0, 90.0, 2.0], [-70.0, -120.0, 0.5]]
        gridpts = [[-76.0, 5.0, 1.0], [-82.0, 100.0, 2.0]]
        p1 = make_problem(rng, data, cands, gridpts, [1e5, 2e5], n_select=2, seed=7)
        r1 = select_sites(p1, data, chain, IDENTITY)
        r2 = select_sites(p1, data, chain, IDENTITY)
        assert r1.selected_idx == r2.selected_idx
        assert r1.selected_imse == r2.selected_imse
        assert r1.imse_trace == r2.imse_trace

    def test_round_winner_attains_min(self):
        rng = np.random.default_rng(7)
        data = toy_dataset(rng, 8, 1)
        chain = make_chain(12, 8, rng)
        cands = [[-75.0, 0.0, 1.0], [-80.0, 90.0, 2.0], [-70.0, -120.0, 0.5], [-85.0, 30.0, 3.0]]
        gridpts = [[-76.0, 5.0, 1.0], [-82.0, 100.0, 2.0], [-71.0, -110.0, 1.5]]
        problem = make_problem(rng, data, cands, gridpts, [1e5, 2e5, 1.5e5], n_select=3, seed=8)
        result = select_sites(problem, data, chain, IDENTITY)
        for r, scores in enumerate(result.imse_trace):
            winner = result.selected_idx[r]
            assert scores[winner] == min(scores.values())
            assert result.selected_imse[r] == scores[winner]

    def test_csv_output(self, tmp_path):
        rng = np.random.default_rng(8)
        data = toy_dataset(rng, 6, 1)
        chain = make_chain(10, 6, rng)
        problem = make_problem(rng, data, [[-75.0, 0.0, 1.0]], [[-76.0, 5.0, 1.0]], [1e5], n_select=1)
        result = select_sites(problem, data, chain, IDENTITY)
        path = tmp_path / "design.csv"
        result.to_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "rank,lat,lon,elev,imse"
        assert lines[1].startswith("1,-75.0,0.0,1.0,")


class TestImseOracle:
    def test_nearby_candidate_beats_far(self):
        # grid node collocated with candidate A; candidate B nearly antipodal;
        # the dense kriging-variance oracle fixes the expected ordering
        rng = np.random.default_rng(9)
        data = toy_dataset(rng, 10, 1)
        spec = default_cov(rho1=0.3, rho2=2.0, alpha=1.0, delta=1.0, nu=0.0)
        node = [-75.0, 10.0, 1.0]
        cand_a = [-74.9, 10.2, 1.0]
        cand_b = [75.0, -170.0, 1.0]
        chain = make_chain(25, 10, rng, V=0.25 * np.eye(4), cov_kwargs=dict(rho1=0.3, rho2=2.0, alpha=1.0, delta=1.0, nu=0.0))
        problem = make_problem(rng, data, [cand_a, cand_b], [node], [1e5], draws=25, inner=64, m=10)
        imse_a = imse_candidate(np.array(cand_a), problem, data, chain, IDENTITY, seed=1)
        imse_b = imse_candidate(np.array(cand_b), problem, data, chain, IDENTITY, seed=1)
        assert imse_a < imse_b
        z_node = np.concatenate([[1.0], [problem.grid_el[0], problem.grid_dc[0], problem.grid_temp[0]]])
        zVz = float(z_node @ (0.25 * np.eye(4)) @ z_node)
        oracle_a = dense_imse_oracle(data, spec, np.array(cand_a), [node], [1e5], zVz)
        oracle_b = dense_imse_oracle(data, spec, np.array(cand_b), [node], [1e5], zVz)
        assert oracle_a < oracle_b
        assert (imse_a < imse_b) == (oracle_a < oracle_b)

    def test_candidate_reduces_variance_vs_remote(self):
        # an informative candidate cannot raise IMSE relative to one that is
        # effectively uncorrelated with everything (no-nugget limit)
        rng = np.random.default_rng(10)
        data = toy_dataset(rng, 10, 1)
        chain = make_chain(20, 10, rng, V=0.25 * np.eye(4))
        gridpts = [[-75.0, 10.0, 1.0], [-78.0, 60.0, 2.0]]
        cands = [[-75.5, 12.0, 1.2], [72.0, -170.0, 3.9]]
        problem = make_problem(rng, data, cands, gridpts, [1e5, 1e5], draws=20, inner=64, m=10)
        imse_near = imse_candidate(np.array(cands[0]), problem, data, chain, IDENTITY, seed=2)
        imse_remote = imse_candidate(np.array(cands[1]), problem, data, chain, IDENTITY, seed=2)
        assert imse_near <= imse_remote * (1 + 1e-6)

    def test_shrinking_frontier(self):
        rng = np.random.default_rng(11)
        data = toy_dataset(rng, 8, 1)
        chain = make_chain(15, 8, rng, V=0.25 * np.eye(4))
        cands = [
            [-75.0, 0.0, 1.0], [-75.2, 0.4, 1.0], [-75.1, -0.3, 1.1],
            [-74.8, 0.2, 0.9], [-75.3, 0.1, 1.0],
        ]
        gridpts = [[-75.05, 0.05, 1.0], [-75.15, 0.3, 1.0]]
        problem = make_problem(rng, data, cands, gridpts, [1e5, 1e5], n_select=4, draws=15, inner=64, seed=12, m=8)
        result = select_sites(problem, data, chain, IDENTITY)
        assert all(b <= a * (1 + 0.05) for a, b in zip(result.selected_imse[:-1], result.selected_imse[1:]))
