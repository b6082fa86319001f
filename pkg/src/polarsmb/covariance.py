"""Covariance kernels over (great-circle distance, elevation gap) pairs.

Four families:

* ``SPHERICAL_MATERN`` — distance-only Matérn in the central angle; valid on
  the sphere only for smoothness in (0, 1/2].
* ``SEPARABLE_PRODUCT`` — great-circle Matérn times a Matérn in |elevation gap|.
* ``NONSEP_SPHERE`` — the selected non-separable kernel
  sigma2 * {1+(d/rho1)^alpha}^(-(delta+nu/2)) * exp[-(|u|/rho2) / {1+(d/rho1)^alpha}^(nu/2)];
  nu=0 recovers an exact generalized-Cauchy x exponential product.
* ``GNEITING_EUCLIDEAN`` — the classic non-separable class on chordal
  distance in R^3: sigma2 * psi(u^2)^(-3/2) * phi(h^2/psi(u^2)) with
  powered-exponential phi and Cauchy-type psi (representative members).

All kernels take |u| (covariances are symmetric in the elevation gap).
Parameter domains are enforced at CovarianceSpec construction so kernel
evaluation is total. Positive definiteness on the sphere is guaranteed for
alpha <= 1; larger alpha with near-global ranges can break it, which the
sampler handles by rejecting degenerate proposals.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import gamma as gamma_fn
from scipy.special import kv

from .geo import SphereConfig, angle_matrix, elev_diff_matrix


class KernelFamily(str, enum.Enum):
    SPHERICAL_MATERN = "spherical_matern"
    SEPARABLE_PRODUCT = "separable_product"
    NONSEP_SPHERE = "nonsep_sphere"
    GNEITING_EUCLIDEAN = "gneiting_euclidean"


class CovarianceError(ValueError):
    """Invalid kernel parameters or matrix degeneracy."""


@dataclass(frozen=True)
class CovarianceSpec:
    """Kernel family plus parameters.

    rho1 is the spatial range (radians of central angle for the sphere
    families, km of chordal distance for the Euclidean family); rho2 the
    elevation range in km. matern_smoothness applies to the great-circle
    Matérn factor, u_smoothness to the elevation Matérn factor of the
    separable product, and (alpha2, beta) are the Gneiting-Euclidean extras.
    """

    family: KernelFamily = KernelFamily.NONSEP_SPHERE
    sigma2: float = 1.0
    rho1: float = 0.1
    rho2: float = 0.5
    alpha: float = 1.0
    delta: float = 1.0
    nu: float = 0.5
    matern_smoothness: float = 0.5
    u_smoothness: float = 0.5
    alpha2: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "family", KernelFamily(self.family))
        if self.sigma2 <= 0:
            raise CovarianceError("sigma2 must be positive")
        if self.rho1 <= 0 or self.rho2 <= 0:
            raise CovarianceError("rho1 and rho2 must be positive")
        if not (0.0 < self.alpha <= 2.0):
            raise CovarianceError("alpha must lie in (0, 2]")
        if self.delta <= 0:
            raise CovarianceError("delta must be positive")
        if not (0.0 <= self.nu <= 1.0):
            raise CovarianceError("nu must lie in [0, 1]")
        if not (0.0 < self.matern_smoothness <= 0.5):
            raise CovarianceError(
                "great-circle Matern smoothness must lie in (0, 1/2] to be valid on the sphere"
            )
        if self.u_smoothness <= 0:
            raise CovarianceError("u_smoothness must be positive")
        if not (0.0 < self.alpha2 <= 2.0):
            raise CovarianceError("alpha2 must lie in (0, 2]")
        if not (0.0 <= self.beta <= 1.0):
            raise CovarianceError("beta must lie in [0, 1]")

    def with_params(self, **kwargs) -> "CovarianceSpec":
        return replace(self, **kwargs)

    def to_dict(self) -> dict:
        return {
            "family": self.family.value,
            "sigma2": self.sigma2,
            "rho1": self.rho1,
            "rho2": self.rho2,
            "alpha": self.alpha,
            "delta": self.delta,
            "nu": self.nu,
            "matern_smoothness": self.matern_smoothness,
            "u_smoothness": self.u_smoothness,
            "alpha2": self.alpha2,
            "beta": self.beta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CovarianceSpec":
        return cls(**d)


@dataclass(frozen=True)
class CrossCovariance:
    """Between-coefficient covariance V paired with a unit-variance kernel."""

    V: np.ndarray
    base: CovarianceSpec

    def __post_init__(self):
        V = np.asarray(self.V, dtype=float)
        object.__setattr__(self, "V", V)
        if V.ndim != 2 or V.shape[0] != V.shape[1]:
            raise CovarianceError("V must be square")
        if not np.allclose(V, V.T, atol=1e-12):
            raise CovarianceError("V must be symmetric")
        if np.linalg.eigvalsh(V).min() <= 0:
            raise CovarianceError("V must be positive definite")
        if abs(self.base.sigma2 - 1.0) > 1e-12:
            raise CovarianceError("base kernel must have sigma2 = 1 (scale lives in V)")

    @property
    def p(self) -> int:
        return self.V.shape[0]


def _matern_corr(x: np.ndarray, smoothness: float) -> np.ndarray:
    """Matérn correlation at scaled lag x = dist/range, equal to 1 at x=0."""
    if abs(smoothness - 0.5) < 1e-12:
        return np.exp(-x)
    x = np.asarray(x, dtype=float)
    out = np.ones_like(x)
    pos = x > 0
    xp = x[pos]
    norm = 1.0 / (gamma_fn(smoothness) * 2.0 ** (smoothness - 1.0))
    out[pos] = norm * xp**smoothness * kv(smoothness, xp)
    return out


def matern_gc(theta, spec: CovarianceSpec):
    """Great-circle Matérn covariance at central angle theta (radians)."""
    theta = np.asarray(theta, dtype=float)
    return spec.sigma2 * _matern_corr(theta / spec.rho1, spec.matern_smoothness)


def nonsep_sphere(theta, u, spec: CovarianceSpec):
    """The selected non-separable kernel in (central angle, elevation gap)."""
    theta = np.asarray(theta, dtype=float)
    base = 1.0 + (theta / spec.rho1) ** spec.alpha
    return (
        spec.sigma2
        * base ** (-(spec.delta + spec.nu / 2.0))
        * np.exp(-(np.abs(u) / spec.rho2) / base ** (spec.nu / 2.0))
    )


def separable_product(theta, u, spec: CovarianceSpec):
    """Great-circle Matérn times elevation Matérn."""
    c1 = _matern_corr(np.asarray(theta, dtype=float) / spec.rho1, spec.matern_smoothness)
    c2 = _matern_corr(np.abs(u) / spec.rho2, spec.u_smoothness)
    return spec.sigma2 * c1 * c2


def gneiting_euclidean(h, u, spec: CovarianceSpec):
    """Gneiting-class kernel on chordal distance h (km) and elevation gap u.

    phi(t) = exp(-(sqrt(t)/rho1)^alpha), psi(t) = (1 + (sqrt(t)/rho2)^alpha2)^beta,
    spatial dimension 3.
    """
    h = np.asarray(h, dtype=float)
    psi = (1.0 + (np.abs(u) / spec.rho2) ** spec.alpha2) ** spec.beta
    return spec.sigma2 * psi ** (-1.5) * np.exp(-((h / (spec.rho1 * np.sqrt(psi))) ** spec.alpha))


def kernel_eval(spec: CovarianceSpec, theta, u, cfg: SphereConfig = SphereConfig()):
    """Evaluate the configured kernel on central angles (radians) and gaps (km).

    Euclidean-family distances are derived from theta via the chord.
    """
    if spec.family is KernelFamily.SPHERICAL_MATERN:
        return matern_gc(theta, spec)
    if spec.family is KernelFamily.SEPARABLE_PRODUCT:
        return separable_product(theta, u, spec)
    if spec.family is KernelFamily.NONSEP_SPHERE:
        return nonsep_sphere(theta, u, spec)
    h = 2.0 * cfg.radius * np.sin(np.asarray(theta, dtype=float) / 2.0)
    return gneiting_euclidean(h, u, spec)


def cov_matrix(points_a, points_b, spec: CovarianceSpec, cfg: SphereConfig = SphereConfig()) -> np.ndarray:
    """Cross-covariance matrix between two point collections."""
    theta = angle_matrix(points_a, points_b)
    u = elev_diff_matrix(points_a, points_b)
    out = kernel_eval(spec, theta, u, cfg)
    if points_a is points_b:
        out = 0.5 * (out + out.T)
    return out


def validate_pd(matrix: np.ndarray, tol: float = 1e-8):
    """Check positive definiteness up to a trace-scaled tolerance.

    Returns (ok, min_eigenvalue); ok iff min eig > -tol * trace / n.
    """
    matrix = np.asarray(matrix, dtype=float)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise CovarianceError("matrix must be square")
    if not np.allclose(matrix, matrix.T, atol=1e-10 * (1.0 + np.abs(matrix).max())):
        raise CovarianceError("matrix must be symmetric")
    eigs = np.linalg.eigvalsh(matrix)
    n = matrix.shape[0]
    threshold = -tol * np.trace(matrix) / n
    return bool(eigs[0] > threshold), float(eigs[0])
