"""Box-Cox variance stabilization with a positivity shift.

The transform is t = ((y + shift)^lambda - 1)/lambda (log for lambda ~ 0),
followed by centering and scaling with training-data statistics. lambda is
fit by maximizing the profile log-likelihood with a golden-section search
on [-2, 2].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

DEFAULT_SHIFT = 306.001
LAMBDA_EPS = 1e-10

_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


class TransformRangeError(ValueError):
    """A value to back-transform fell outside the transform's image."""


@dataclass(frozen=True)
class TransformSpec:
    """Fitted transform parameters: shift, exponent, centering and scaling."""

    shift: float = DEFAULT_SHIFT
    lam: float = 1.0
    center: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("scale must be positive")

    def replace(self, **kwargs) -> "TransformSpec":
        return replace(self, **kwargs)

    def to_dict(self) -> dict:
        return {"shift": self.shift, "lam": self.lam, "center": self.center, "scale": self.scale}

    @classmethod
    def from_dict(cls, d: dict) -> "TransformSpec":
        return cls(**d)


IDENTITY = TransformSpec(shift=0.0, lam=1.0, center=-1.0, scale=1.0)


def wide_identity(shift: float = 1000.0) -> TransformSpec:
    """Identity transform whose image covers (-shift, inf).

    lam=1 with center shift-1 maps y to itself while keeping the Box-Cox
    positivity constraint far from working values; useful for tests and
    raw-scale pipelines.
    """
    return TransformSpec(shift=shift, lam=1.0, center=shift - 1.0, scale=1.0)


def _power_transform(shifted: np.ndarray, lam: float) -> np.ndarray:
    # expm1 form keeps the lam -> 0 limit and the inverse roundtrip accurate
    if abs(lam) < LAMBDA_EPS:
        return np.log(shifted)
    return np.expm1(lam * np.log(shifted)) / lam


def boxcox_forward(y, spec: TransformSpec):
    """Transform raw values; scalar in, scalar out (arrays pass through)."""
    y = np.asarray(y, dtype=float)
    shifted = y + spec.shift
    if np.any(shifted <= 0):
        raise ValueError("y + shift must be positive")
    t = _power_transform(shifted, spec.lam)
    out = (t - spec.center) / spec.scale
    return float(out) if out.ndim == 0 else out


def boxcox_inverse(t, spec: TransformSpec):
    """Back-transform to the raw scale; raises TransformRangeError outside
    the image (lam * t_raw + 1 <= 0)."""
    t = np.asarray(t, dtype=float)
    raw = t * spec.scale + spec.center
    if abs(spec.lam) < LAMBDA_EPS:
        out = np.exp(raw) - spec.shift
    else:
        arg = spec.lam * raw
        if np.any(arg <= -1.0):
            raise TransformRangeError("value outside the Box-Cox image (lam*t + 1 <= 0)")
        out = np.exp(np.log1p(arg) / spec.lam) - spec.shift
    return float(out) if out.ndim == 0 else out


def boxcox_profile_loglik(y: np.ndarray, shift: float, lam: float) -> float:
    """Profile log-likelihood of lambda: normal likelihood of the transformed
    data (sigma^2 profiled out) plus the Jacobian term (lam-1) sum log(y+shift)."""
    shifted = np.asarray(y, dtype=float) + shift
    t = _power_transform(shifted, lam)
    n = t.shape[0]
    var = t.var()
    if var <= 0:
        return -np.inf
    return -0.5 * n * math.log(var) + (lam - 1.0) * np.sum(np.log(shifted))


def boxcox_fit(y, shift: float = DEFAULT_SHIFT, lo: float = -2.0, hi: float = 2.0, tol: float = 1e-6) -> float:
    """MLE of lambda by golden-section search of the profile log-likelihood."""
    y = np.asarray(y, dtype=float)
    if y.shape[0] < 3:
        raise ValueError("need at least 3 observations to fit lambda")
    if np.min(y) + shift <= 0:
        raise ValueError("shift must make all values strictly positive")

    def nll(lam):
        return -boxcox_profile_loglik(y, shift, lam)

    a, b = lo, hi
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = nll(c), nll(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - _INVPHI * (b - a)
            fc = nll(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INVPHI * (b - a)
            fd = nll(d)
    return 0.5 * (a + b)


def fit_transform(y, shift: float = DEFAULT_SHIFT) -> tuple:
    """Fit lambda, then center/scale the transformed training values.

    Returns (spec, transformed) with transformed standardized to mean 0, sd 1.
    """
    y = np.asarray(y, dtype=float)
    lam = boxcox_fit(y, shift)
    t = _power_transform(y + shift, lam)
    center = float(t.mean())
    scale = float(t.std())
    if scale <= 0:
        raise ValueError("degenerate data: transformed values are constant")
    spec = TransformSpec(shift=shift, lam=lam, center=center, scale=scale)
    return spec, (t - center) / scale


def inverse_with_resample(draw_fn, spec: TransformSpec, max_attempts: int = 100):
    """Back-transform a stochastic draw, redrawing on range errors.

    draw_fn() returns an ndarray of transformed-scale draws. Entries outside
    the image are redrawn up to max_attempts, then clamped to the boundary.
    Returns (values_on_raw_scale, n_resampled, n_clamped).
    """
    t = np.asarray(draw_fn(), dtype=float)
    if abs(spec.lam) < LAMBDA_EPS:
        return np.exp(t * spec.scale + spec.center) - spec.shift, 0, 0
    boundary = (-1.0 / spec.lam - spec.center) / spec.scale
    n_resampled = 0
    if spec.lam > 0:
        bad = t <= boundary
    else:
        bad = t >= boundary
    attempts = 0
    while np.any(bad) and attempts < max_attempts:
        fresh = np.asarray(draw_fn(), dtype=float)
        t = np.where(bad, fresh, t)
        n_resampled += int(bad.sum())
        bad = (t <= boundary) if spec.lam > 0 else (t >= boundary)
        attempts += 1
    n_clamped = int(bad.sum())
    if n_clamped:
        eps = 1e-12 * max(1.0, abs(boundary))
        t = np.where(bad, boundary + (eps if spec.lam > 0 else -eps), t)
    return boxcox_inverse(t, spec), n_resampled, n_clamped
