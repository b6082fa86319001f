"""Nearest-neighbor Gaussian process machinery.

A reference set of k sites is ordered, each site conditioned on up to m
earlier neighbors, giving the sparse factorization

    [w] = prod_i N(w_i | B_i w_N(i), F_i)

with B_i = C_{i,N} C_N^{-1} and F_i = C(s_i,s_i) - B_i C_{N,i}. Neighbor
lookups use great-circle distance by default; an elevation-augmented metric
(sqrt(theta^2 + (du/r)^2)) is available behind ``metric``. Factor solves are
batched per neighbor-count group, with the neighbor covariance regularized
by +jitter*sigma2 on the diagonal only when its smallest eigenvalue drops
below 1e-10*sigma2.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np

from .covariance import CovarianceSpec, kernel_eval
from .geo import GeoPoint, SphereConfig, _as_arrays, central_angle

logger = logging.getLogger(__name__)

EIG_TRIGGER = 1e-10


class DegeneracyError(ArithmeticError):
    """A node's conditional variance collapsed to zero or below."""

    def __init__(self, node: int, value: float):
        self.node = node
        super().__init__(f"conditional variance degenerate at node {node}: F = {value:.3e}")


def _site_metric(lat, lon, elev, lat0, lon0, elev0, metric: str, radius: float):
    theta = central_angle(lat0, lon0, lat, lon)
    if metric == "gc":
        return theta
    if metric == "gc_elev":
        return np.sqrt(theta**2 + ((elev - elev0) / radius) ** 2)
    raise ValueError(f"unknown neighbor metric {metric!r}")


def _check_distinct(lat, lon, elev):
    rows = np.column_stack([lat, lon, elev])
    uniq = np.unique(rows, axis=0)
    if uniq.shape[0] != rows.shape[0]:
        raise ValueError("reference sites must be pairwise distinct locations")


def order_reference_set(sites, strategy: str = "maxmin", cfg: SphereConfig = SphereConfig()) -> np.ndarray:
    """Order the reference set; returns a permutation of site indices.

    "coordinate" sorts by (lat, lon, elev). "maxmin" starts at the site
    nearest the centroid and greedily adds the site maximizing the minimum
    great-circle distance to those already ordered.
    """
    lat, lon, elev = _as_arrays(sites)
    k = lat.shape[0]
    _check_distinct(lat, lon, elev)
    if strategy == "coordinate":
        return np.lexsort((elev, lon, lat))
    if strategy != "maxmin":
        raise ValueError(f"unknown ordering strategy {strategy!r}")

    phi, lam = np.radians(lat), np.radians(lon)
    xyz = np.column_stack([np.cos(phi) * np.cos(lam), np.cos(phi) * np.sin(lam), np.sin(phi)])
    c = xyz.mean(axis=0)
    norm = np.linalg.norm(c)
    if norm < 1e-12:
        c = np.array([0.0, 0.0, 1.0])
    else:
        c = c / norm
    clat = np.degrees(np.arcsin(np.clip(c[2], -1, 1)))
    clon = np.degrees(np.arctan2(c[1], c[0]))
    start = int(np.argmin(central_angle(clat, clon, lat, lon)))

    order = [start]
    mindist = central_angle(lat[start], lon[start], lat, lon)
    mindist[start] = -np.inf
    for _ in range(k - 1):
        nxt = int(np.argmax(mindist))
        order.append(nxt)
        d = central_angle(lat[nxt], lon[nxt], lat, lon)
        mindist = np.minimum(mindist, d)
        mindist[nxt] = -np.inf
    return np.asarray(order, dtype=int)


@dataclass
class NeighborGraph:
    """Ordered reference set with per-node neighbor and children lists.

    ``order[t]`` is the site index at position t; ``neighbors[i]`` and
    ``children[i]`` are site-index arrays for site i. children is the exact
    transpose of neighbors.
    """

    order: np.ndarray
    neighbors: list
    children: list
    m: int

    def __post_init__(self):
        self.order = np.asarray(self.order, dtype=int)
        k = self.order.shape[0]
        pos = np.empty(k, dtype=int)
        pos[self.order] = np.arange(k)
        self.position = pos
        for t in range(k):
            i = self.order[t]
            nbrs = self.neighbors[i]
            if len(nbrs) != min(t, self.m):
                raise ValueError(f"node {i} at position {t} must have {min(t, self.m)} neighbors")
            if len(nbrs) and pos[nbrs].max() >= t:
                raise ValueError(f"node {i} has a neighbor not preceding it in the order")

    @property
    def k(self) -> int:
        return self.order.shape[0]

    def to_edge_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["node", "neighbor"])
            for i in range(self.k):
                for j in self.neighbors[i]:
                    writer.writerow([i, int(j)])


def build_neighbor_graph(
    sites,
    order: np.ndarray,
    m: int,
    metric: str = "gc",
    cfg: SphereConfig = SphereConfig(),
) -> NeighborGraph:
    """Connect each node to its m nearest predecessors in the given order."""
    if m < 1:
        raise ValueError("m must be at least 1")
    lat, lon, elev = _as_arrays(sites)
    order = np.asarray(order, dtype=int)
    k = order.shape[0]
    neighbors = [np.empty(0, dtype=int) for _ in range(k)]
    children = [[] for _ in range(k)]
    for t in range(1, k):
        i = order[t]
        pred = order[:t]
        d = _site_metric(lat[pred], lon[pred], elev[pred], lat[i], lon[i], elev[i], metric, cfg.radius)
        if t <= m:
            chosen = pred[np.argsort(d, kind="stable")]
        else:
            part = np.argpartition(d, m - 1)[:m]
            chosen = pred[part[np.argsort(d[part], kind="stable")]]
        neighbors[i] = np.asarray(chosen, dtype=int)
        for j in chosen:
            children[j].append(i)
    children = [np.asarray(cs, dtype=int) for cs in children]
    return NeighborGraph(order=order, neighbors=neighbors, children=children, m=m)


@dataclass
class NNGPFactors:
    """Per-node conditional weights B and variances F.

    B_pad is (k, m) zero-padded; NI_pad carries the matching neighbor site
    indices with -1 padding. F is always positive after the jitter policy.
    """

    B_pad: np.ndarray
    F: np.ndarray
    NI_pad: np.ndarray
    counts: np.ndarray
    sigma2: float
    jittered: int = 0

    @property
    def B(self) -> list:
        return [self.B_pad[i, : self.counts[i]] for i in range(self.B_pad.shape[0])]


@dataclass
class _Stack:
    """Distance geometry for a set of nodes sharing one neighbor count."""

    nodes: np.ndarray
    NI: np.ndarray
    D_nn: np.ndarray
    U_nn: np.ndarray
    D_sn: np.ndarray
    U_sn: np.ndarray


def _build_stack(nodes, neighbor_idx, lat, lon, elev) -> _Stack:
    NI = np.asarray(neighbor_idx, dtype=int)
    nlat, nlon, nelev = lat[NI], lon[NI], elev[NI]
    D_nn = central_angle(nlat[:, :, None], nlon[:, :, None], nlat[:, None, :], nlon[:, None, :])
    U_nn = np.abs(nelev[:, :, None] - nelev[:, None, :])
    slat, slon, selev = lat[nodes], lon[nodes], elev[nodes]
    D_sn = central_angle(slat[:, None], slon[:, None], nlat, nlon)
    U_sn = np.abs(selev[:, None] - nelev)
    return _Stack(np.asarray(nodes, dtype=int), NI, D_nn, U_nn, D_sn, U_sn)


class FactorWorkspace:
    """Caches neighbor geometry so factors can be recomputed cheaply when
    only the kernel parameters change (the MH inner loop)."""

    def __init__(self, graph: NeighborGraph, sites, cfg: SphereConfig = SphereConfig()):
        self.graph = graph
        self.cfg = cfg
        lat, lon, elev = _as_arrays(sites)
        self.k = graph.k
        self.m = graph.m
        counts = np.array([len(graph.neighbors[i]) for i in range(self.k)], dtype=int)
        self.counts = counts
        self.NI_pad = np.full((self.k, self.m), -1, dtype=int)
        for i in range(self.k):
            self.NI_pad[i, : counts[i]] = graph.neighbors[i]
        self.stacks = []
        for c in np.unique(counts):
            if c == 0:
                continue
            nodes = np.flatnonzero(counts == c)
            self.stacks.append(_build_stack(nodes, self.NI_pad[nodes, :c], lat, lon, elev))

    def compute_factors(self, spec: CovarianceSpec, jitter: float = EIG_TRIGGER) -> NNGPFactors:
        return _factors_from_stacks(
            self.stacks, self.k, self.m, self.counts, self.NI_pad, spec, self.cfg, jitter
        )


def _stack_factors(stack: _Stack, spec: CovarianceSpec, cfg: SphereConfig, jitter: float):
    """Batched B/F for one stack; returns (B, F, n_jittered).

    The jitter trigger (smallest eigenvalue below 1e-10*sigma2) is probed by
    a batched Cholesky of K - trigger*I, which succeeds exactly when every
    matrix clears the threshold; the eigendecomposition runs only on failure.
    """
    K = kernel_eval(spec, stack.D_nn, stack.U_nn, cfg)
    c = kernel_eval(spec, stack.D_sn, stack.U_sn, cfg)
    n_jit = 0
    if jitter > 0:
        nn = K.shape[1]
        eye = np.eye(nn)
        trigger = EIG_TRIGGER * spec.sigma2
        try:
            np.linalg.cholesky(K - trigger * eye)
        except np.linalg.LinAlgError:
            min_eig = np.linalg.eigvalsh(K)[:, 0]
            bad = min_eig < trigger
            K = K + bad[:, None, None] * (jitter * spec.sigma2) * eye
            n_jit = int(bad.sum())
    B = np.linalg.solve(K, c[..., None])[..., 0]
    F = spec.sigma2 - np.einsum("nc,nc->n", B, c)
    return B, F, n_jit


def _factors_from_stacks(stacks, k, m, counts, NI_pad, spec, cfg, jitter) -> NNGPFactors:
    B_pad = np.zeros((k, m))
    F = np.full(k, spec.sigma2)
    jittered = 0
    for stack in stacks:
        B, Fs, n_jit = _stack_factors(stack, spec, cfg, jitter)
        jittered += n_jit
        c = stack.NI.shape[1]
        B_pad[stack.nodes, :c] = B
        F[stack.nodes] = Fs
    if np.any(F <= 0):
        node = int(np.flatnonzero(F <= 0)[0])
        raise DegeneracyError(node, float(F[node]))
    if jittered:
        logger.info("jitter applied to %d neighbor matrices", jittered)
    return NNGPFactors(B_pad=B_pad, F=F, NI_pad=NI_pad.copy(), counts=counts.copy(), sigma2=spec.sigma2, jittered=jittered)


def compute_factors(
    graph: NeighborGraph,
    sites,
    spec: CovarianceSpec,
    jitter: float = EIG_TRIGGER,
    cfg: SphereConfig = SphereConfig(),
) -> NNGPFactors:
    """B/F factors for every node of the graph under the given kernel."""
    return FactorWorkspace(graph, sites, cfg).compute_factors(spec, jitter)


def _conditional_means(w: np.ndarray, factors: NNGPFactors) -> np.ndarray:
    """Per-node conditional means B_i w_N(i), shape (k, p)."""
    NI = np.where(factors.NI_pad < 0, 0, factors.NI_pad)
    gathered = w[NI]  # (k, m, p); padded entries carry weight 0
    return np.einsum("km,kmp->kp", factors.B_pad, gathered)


def nngp_log_density(w, factors: NNGPFactors, graph: NeighborGraph, V=None) -> float:
    """Joint log density of the field under the sparse factorization.

    w is (k,) or (k, p); V is the p x p between-coefficient covariance
    (identity if omitted). Each node contributes
    log N(w_i | B_i w_N(i), F_i * V).
    """
    w = np.asarray(w, dtype=float)
    if w.ndim == 1:
        w = w[:, None]
    k, p = w.shape
    if k != graph.k:
        raise ValueError(f"w has {k} rows for a {graph.k}-node graph")
    if V is None:
        V = np.eye(p)
    V = np.asarray(V, dtype=float)
    if V.shape != (p, p):
        raise ValueError(f"V must be {p}x{p}, got {V.shape}")
    resid = w - _conditional_means(w, factors)
    L = np.linalg.cholesky(V)
    logdetV = 2.0 * np.sum(np.log(np.diag(L)))
    sol = np.linalg.solve(L, resid.T)  # (p, k)
    quad = np.sum(sol**2, axis=0) / factors.F
    return float(
        -0.5 * (k * p * np.log(2.0 * np.pi) + p * np.sum(np.log(factors.F)) + k * logdetV + np.sum(quad))
    )


@dataclass
class PredictionGeometry:
    """m-nearest-reference geometry for a batch of target points."""

    NI: np.ndarray
    D_nn: np.ndarray
    U_nn: np.ndarray
    D_sn: np.ndarray
    U_sn: np.ndarray

    @property
    def n(self) -> int:
        return self.NI.shape[0]


def prediction_geometry(
    targets,
    reference_sites,
    m: int,
    metric: str = "gc",
    cfg: SphereConfig = SphereConfig(),
) -> PredictionGeometry:
    """Select each target's m nearest reference sites and cache distances."""
    tlat, tlon, televv = _as_arrays(targets)
    rlat, rlon, relev = _as_arrays(reference_sites)
    k = rlat.shape[0]
    m = min(m, k)
    NI = np.empty((tlat.shape[0], m), dtype=int)
    for t in range(tlat.shape[0]):
        d = _site_metric(rlat, rlon, relev, tlat[t], tlon[t], televv[t], metric, cfg.radius)
        if m == k:
            NI[t] = np.argsort(d, kind="stable")
        else:
            part = np.argpartition(d, m - 1)[:m]
            NI[t] = part[np.argsort(d[part], kind="stable")]
    nlat, nlon, nelev = rlat[NI], rlon[NI], relev[NI]
    D_nn = central_angle(nlat[:, :, None], nlon[:, :, None], nlat[:, None, :], nlon[:, None, :])
    U_nn = np.abs(nelev[:, :, None] - nelev[:, None, :])
    D_sn = central_angle(tlat[:, None], tlon[:, None], nlat, nlon)
    U_sn = np.abs(televv[:, None] - nelev)
    return PredictionGeometry(NI=NI, D_nn=D_nn, U_nn=U_nn, D_sn=D_sn, U_sn=U_sn)


def conditional_weights(geometry: PredictionGeometry, spec: CovarianceSpec, cfg: SphereConfig = SphereConfig(), jitter: float = EIG_TRIGGER):
    """Kriging weights and scalar conditional variances for a target batch.

    Returns (B, F): B is (n, m), F is (n,) with F clipped at zero.
    """
    stack = _Stack(np.arange(geometry.n), geometry.NI, geometry.D_nn, geometry.U_nn, geometry.D_sn, geometry.U_sn)
    B, F, _ = _stack_factors(stack, spec, cfg, jitter)
    return B, np.maximum(F, 0.0)


def conditional_predict(
    target: GeoPoint,
    reference_sites,
    w,
    m: int,
    spec: CovarianceSpec,
    V=None,
    metric: str = "gc",
    cfg: SphereConfig = SphereConfig(),
    jitter: float = EIG_TRIGGER,
):
    """Conditional mean vector and covariance at a new location.

    w is (k,) or (k, p) reference values; the result is
    N(C_sN C_N^-1 w_N, (C(s,s) - C_sN C_N^-1 C_Ns) * V) with the m nearest
    reference sites as conditioning set.
    """
    w = np.asarray(w, dtype=float)
    squeeze = w.ndim == 1
    if squeeze:
        w = w[:, None]
    p = w.shape[1]
    if V is None:
        V = np.eye(p)
    V = np.asarray(V, dtype=float)
    geom = prediction_geometry([target], reference_sites, m, metric, cfg)
    B, F = conditional_weights(geom, spec, cfg, jitter)
    mean = B[0] @ w[geom.NI[0]]
    cov = float(F[0]) * V
    if squeeze:
        return float(mean[0]), float(cov[0, 0])
    return mean, cov
