import numpy as np
import pytest
from scipy.stats import multivariate_normal

from polarsmb.covariance import CovarianceSpec, cov_matrix
from polarsmb.geo import GeoPoint, SphereConfig, central_angle
from polarsmb.nngp import (
    DegeneracyError,
    FactorWorkspace,
    build_neighbor_graph,
    compute_factors,
    conditional_predict,
    nngp_log_density,
    order_reference_set,
    prediction_geometry,
)

CFG = SphereConfig()


def random_sites(rng, n, lat_range=(-90, -60)):
    return np.column_stack([
        rng.uniform(*lat_range, n),
        rng.uniform(-180, 180, n),
        rng.uniform(0, 4, n),
    ])


def random_spec(rng, sigma2=None):
    return CovarianceSpec(
        sigma2=float(rng.uniform(0.3, 2.5)) if sigma2 is None else sigma2,
        rho1=float(rng.uniform(0.05, 0.6)),
        rho2=float(rng.uniform(0.2, 2.0)),
        alpha=float(rng.uniform(0.3, 1.8)),
        delta=float(rng.uniform(0.2, 2.0)),
        nu=float(rng.uniform(0.0, 1.0)),
    )


def dense_from_factors(factors, graph, k):
    """Reconstruct the joint covariance implied by the factorization."""
    B = np.zeros((k, k))
    for i in range(k):
        c = factors.counts[i]
        B[i, factors.NI_pad[i, :c]] = factors.B_pad[i, :c]
    ib = np.linalg.inv(np.eye(k) - B)
    return ib @ np.diag(factors.F) @ ib.T


class TestOrdering:
    def test_single_site(self):
        assert order_reference_set(np.array([[-70.0, 10.0, 1.0]]), "maxmin").tolist() == [0]

    def test_coordinate_sorts_by_lon(self):
        sites = np.array([[0.0, 2.0, 0.0], [0.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        assert order_reference_set(sites, "coordinate").tolist() == [1, 2, 0]

    def test_maxmin_first_two_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            sites = random_sites(rng, 10, (-90, 30))
            order = order_reference_set(sites, "maxmin")
            lat, lon = sites[:, 0], sites[:, 1]
            # brute force: centroid-nearest start, then farthest from it
            xyz = np.column_stack([
                np.cos(np.radians(lat)) * np.cos(np.radians(lon)),
                np.cos(np.radians(lat)) * np.sin(np.radians(lon)),
                np.sin(np.radians(lat)),
            ])
            c = xyz.mean(axis=0)
            c = c / np.linalg.norm(c)
            clat = np.degrees(np.arcsin(np.clip(c[2], -1, 1)))
            clon = np.degrees(np.arctan2(c[1], c[0]))
            start = int(np.argmin(central_angle(clat, clon, lat, lon)))
            second = int(np.argmax(central_angle(lat[start], lon[start], lat, lon)))
            assert order[0] == start
            assert order[1] == second

    def test_maxmin_greedy_property(self):
        rng = np.random.default_rng(1)
        sites = random_sites(rng, 15)
        order = order_reference_set(sites, "maxmin")
        lat, lon = sites[:, 0], sites[:, 1]
        d = central_angle(lat[:, None], lon[:, None], lat[None, :], lon[None, :])
        for t in range(2, 15):
            chosen = order[:t]
            rest = np.setdiff1d(np.arange(15), chosen)
            mind_chosen = d[np.ix_(rest, chosen)].min(axis=1)
            picked = order[t]
            assert d[picked, chosen].min() == pytest.approx(mind_chosen.max(), rel=1e-12)

    def test_duplicates_rejected(self):
        sites = np.array([[-70.0, 10.0, 1.0], [-70.0, 10.0, 1.0]])
        with pytest.raises(ValueError):
            order_reference_set(sites, "maxmin")


class TestNeighborGraph:
    def test_first_node_empty(self):
        rng = np.random.default_rng(2)
        sites = random_sites(rng, 8)
        order = order_reference_set(sites, "coordinate")
        graph = build_neighbor_graph(sites, order, 3)
        assert len(graph.neighbors[order[0]]) == 0

    def test_saturated_m_gives_all_predecessors(self):
        rng = np.random.default_rng(3)
        sites = random_sites(rng, 9)
        order = order_reference_set(sites, "coordinate")
        graph = build_neighbor_graph(sites, order, 8)
        for t in range(9):
            i = order[t]
            assert sorted(graph.neighbors[i].tolist()) == sorted(order[:t].tolist())

    def test_brute_force_nearest_predecessors(self):
        rng = np.random.default_rng(4)
        sites = random_sites(rng, 20)
        order = order_reference_set(sites, "maxmin")
        graph = build_neighbor_graph(sites, order, 3)
        lat, lon = sites[:, 0], sites[:, 1]
        d = central_angle(lat[:, None], lon[:, None], lat[None, :], lon[None, :])
        for t in range(1, 20):
            i = order[t]
            pred = order[:t]
            expect = pred[np.argsort(d[i, pred], kind="stable")][:3]
            assert set(graph.neighbors[i].tolist()) == set(expect.tolist())

    def test_children_transpose(self):
        rng = np.random.default_rng(5)
        sites = random_sites(rng, 25)
        order = order_reference_set(sites, "maxmin")
        graph = build_neighbor_graph(sites, order, 4)
        for i in range(25):
            for j in graph.neighbors[i]:
                assert i in graph.children[j]
            for t in graph.children[i]:
                assert i in graph.neighbors[t]

    def test_edge_csv(self, tmp_path):
        rng = np.random.default_rng(6)
        sites = random_sites(rng, 6)
        graph = build_neighbor_graph(sites, order_reference_set(sites, "coordinate"), 2)
        path = tmp_path / "edges.csv"
        graph.to_edge_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "node,neighbor"
        assert len(lines) - 1 == sum(len(nb) for nb in graph.neighbors)


class TestFactors:
    def test_zero_neighbor_node(self):
        rng = np.random.default_rng(7)
        sites = random_sites(rng, 5)
        spec = random_spec(rng, sigma2=1.8)
        order = order_reference_set(sites, "maxmin")
        graph = build_neighbor_graph(sites, order, 2)
        factors = compute_factors(graph, sites, spec)
        root = order[0]
        assert factors.F[root] == pytest.approx(1.8, rel=1e-12)
        assert factors.counts[root] == 0

    def test_coincident_neighbor_degenerates(self):
        # two sites separated only by elevation, kernel ignoring elevation:
        # correlation 1 -> F = 0 -> degeneracy under zero jitter
        sites = np.array([[-70.0, 10.0, 0.0], [-70.0, 10.0, 1.0]])
        spec = CovarianceSpec(family="spherical_matern", sigma2=1.0, rho1=0.3)
        graph = build_neighbor_graph(sites, np.array([0, 1]), 1)
        with pytest.raises(DegeneracyError) as err:
            compute_factors(graph, sites, spec, jitter=0.0)
        assert "node" in str(err.value)

    def test_dense_reconstruction(self):
        rng = np.random.default_rng(8)
        sites = random_sites(rng, 15)
        spec = random_spec(rng)
        order = order_reference_set(sites, "maxmin")
        graph = build_neighbor_graph(sites, order, 14)
        factors = compute_factors(graph, sites, spec, jitter=0.0)
        implied = dense_from_factors(factors, graph, 15)
        dense = cov_matrix(sites, sites, spec, CFG)
        np.testing.assert_allclose(implied, dense, atol=1e-8)

    def test_workspace_matches_direct(self):
        rng = np.random.default_rng(9)
        sites = random_sites(rng, 30)
        order = order_reference_set(sites, "maxmin")
        graph = build_neighbor_graph(sites, order, 5)
        ws = FactorWorkspace(graph, sites)
        for _ in range(3):
            spec = random_spec(rng)
            f1 = ws.compute_factors(spec)
            f2 = compute_factors(graph, sites, spec)
            np.testing.assert_allclose(f1.B_pad, f2.B_pad, atol=1e-13)
            np.testing.assert_allclose(f1.F, f2.F, atol=1e-13)


class TestLogDensity:
    def test_standard_normal_single_node(self):
        sites = np.array([[-70.0, 10.0, 1.0]])
        spec = CovarianceSpec(sigma2=1.0)
        graph = build_neighbor_graph(sites, np.array([0]), 1)
        factors = compute_factors(graph, sites, spec)
        ld = nngp_log_density(np.array([0.0]), factors, graph, np.array([[1.0]]))
        assert ld == pytest.approx(-0.5 * np.log(2 * np.pi), rel=1e-12)

    def test_dense_oracle_scalar(self):
        rng = np.random.default_rng(10)
        for _ in range(5):
            k = int(rng.integers(5, 30))
            sites = random_sites(rng, k)
            spec = random_spec(rng)
            order = order_reference_set(sites, "maxmin")
            graph = build_neighbor_graph(sites, order, k - 1)
            factors = compute_factors(graph, sites, spec, jitter=0.0)
            w = rng.standard_normal(k)
            ld = nngp_log_density(w, factors, graph)
            dense = cov_matrix(sites, sites, spec, CFG)
            expect = multivariate_normal.logpdf(w, np.zeros(k), dense)
            assert ld == pytest.approx(expect, abs=1e-8)

    def test_dense_oracle_multivariate(self):
        rng = np.random.default_rng(11)
        k, p = 12, 3
        sites = random_sites(rng, k)
        spec = random_spec(rng, sigma2=1.0)
        A = rng.standard_normal((p, p))
        V = A @ A.T + 0.5 * np.eye(p)
        order = order_reference_set(sites, "maxmin")
        graph = build_neighbor_graph(sites, order, k - 1)
        factors = compute_factors(graph, sites, spec, jitter=0.0)
        w = rng.standard_normal((k, p))
        ld = nngp_log_density(w, factors, graph, V)
        dense = np.kron(cov_matrix(sites, sites, spec, CFG), V)
        expect = multivariate_normal.logpdf(w.ravel(), np.zeros(k * p), dense)
        assert ld == pytest.approx(expect, abs=1e-8)

    def test_block_independence_with_identity_v(self):
        rng = np.random.default_rng(12)
        k = 10
        sites = random_sites(rng, k)
        spec = random_spec(rng, sigma2=1.0)
        order = order_reference_set(sites, "maxmin")
        graph = build_neighbor_graph(sites, order, 4)
        factors = compute_factors(graph, sites, spec)
        w = rng.standard_normal((k, 2))
        joint = nngp_log_density(w, factors, graph, np.eye(2))
        split = nngp_log_density(w[:, 0], factors, graph) + nngp_log_density(w[:, 1], factors, graph)
        assert joint == pytest.approx(split, rel=1e-12)

    def test_monotone_accuracy_in_m(self):
        rng = np.random.default_rng(13)
        k, n_draws = 25, 300
        sites = random_sites(rng, k)
        spec = random_spec(rng)
        order = order_reference_set(sites, "maxmin")
        dense = cov_matrix(sites, sites, spec, CFG)
        L = np.linalg.cholesky(dense)
        draws = (L @ rng.standard_normal((k, n_draws))).T
        truths = np.array([multivariate_normal.logpdf(w, np.zeros(k), dense) for w in draws])
        mean_errs = []
        for m in (1, 2, 5, 10, k - 1):
            graph = build_neighbor_graph(sites, order, m)
            factors = compute_factors(graph, sites, spec)
            vals = np.array([nngp_log_density(w, factors, graph) for w in draws])
            mean_errs.append(np.mean(np.abs(vals - truths)))
        assert all(b <= a + 1e-9 for a, b in zip(mean_errs[:-1], mean_errs[1:]))

    def test_dimension_mismatch(self):
        rng = np.random.default_rng(14)
        sites = random_sites(rng, 5)
        graph = build_neighbor_graph(sites, order_reference_set(sites, "maxmin"), 2)
        factors = compute_factors(graph, sites, random_spec(rng))
        with pytest.raises(ValueError):
            nngp_log_density(np.zeros(4), factors, graph)
        with pytest.raises(ValueError):
            nngp_log_density(np.zeros((5, 2)), factors, graph, np.eye(3))


class TestConditionalPredict:
    def test_coincident_target_interpolates(self):
        rng = np.random.default_rng(15)
        sites = random_sites(rng, 10)
        spec = random_spec(rng, sigma2=1.0)
        w = rng.standard_normal(10)
        target = GeoPoint(*sites[3])
        mean, var = conditional_predict(target, sites, w, m=10, spec=spec, jitter=0.0)
        assert mean == pytest.approx(w[3], abs=1e-7)
        assert abs(var) <= 1e-8

    def test_far_target_reverts_to_prior(self):
        sites = np.column_stack([
            np.random.default_rng(16).uniform(-90, -80, 8),
            np.random.default_rng(17).uniform(-180, 180, 8),
            np.zeros(8),
        ])
        spec = CovarianceSpec(sigma2=1.0, rho1=0.01, rho2=0.05, alpha=1.0, delta=2.0, nu=0.5)
        w = np.random.default_rng(18).standard_normal(8)
        V = np.array([[2.5]])
        target = GeoPoint(89.0, 0.0, 9.0)
        mean, cov = conditional_predict(target, sites, w[:, None], m=8, spec=spec, V=V)
        assert abs(mean[0]) < 1e-6
        assert cov[0, 0] == pytest.approx(2.5, rel=1e-6)

    def test_dense_kriging_oracle(self):
        rng = np.random.default_rng(19)
        for _ in range(5):
            sites = random_sites(rng, 10)
            spec = random_spec(rng)
            w = rng.standard_normal(10)
            target = GeoPoint(float(rng.uniform(-90, -60)), float(rng.uniform(-180, 180)), float(rng.uniform(0, 4)))
            mean, var = conditional_predict(target, sites, w, m=10, spec=spec, jitter=0.0)
            C = cov_matrix(sites, sites, spec, CFG)
            tgt = np.array([[target.lat, target.lon, target.elev]])
            c = cov_matrix(tgt, sites, spec, CFG)[0]
            expect_mean = c @ np.linalg.solve(C, w)
            expect_var = spec.sigma2 - c @ np.linalg.solve(C, c)
            assert mean == pytest.approx(expect_mean, abs=1e-8)
            assert var == pytest.approx(max(expect_var, 0.0), abs=1e-8)

    def test_covariance_symmetric_psd(self):
        rng = np.random.default_rng(20)
        sites = random_sites(rng, 12)
        spec = random_spec(rng, sigma2=1.0)
        A = rng.standard_normal((4, 4))
        V = A @ A.T + 0.1 * np.eye(4)
        w = rng.standard_normal((12, 4))
        for _ in range(10):
            target = GeoPoint(float(rng.uniform(-90, -60)), float(rng.uniform(-180, 180)), float(rng.uniform(0, 4)))
            _, cov = conditional_predict(target, sites, w, m=6, spec=spec, V=V)
            np.testing.assert_allclose(cov, cov.T, atol=1e-12)
            assert np.linalg.eigvalsh(cov).min() >= -1e-10

    def test_prediction_geometry_orders_by_distance(self):
        rng = np.random.default_rng(21)
        sites = random_sites(rng, 30)
        targets = random_sites(rng, 4)
        geom = prediction_geometry(targets, sites, 5)
        for t in range(4):
            d = central_angle(targets[t, 0], targets[t, 1], sites[:, 0], sites[:, 1])
            assert set(geom.NI[t].tolist()) == set(np.argsort(d)[:5].tolist())
