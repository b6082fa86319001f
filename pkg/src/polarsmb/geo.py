"""Spherical geometry: great-circle and chordal distances, south-polar
stereographic grids with area weights, and inverse-distance interpolation.

Distances use the haversine/atan2 form, which is stable for both nearly
coincident and nearly antipodal pairs. Angles are radians, arc lengths and
elevations kilometers.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0

# Conventional standard parallel for south-polar stereographic products.
STD_PARALLEL_DEG = -71.0


class GridError(ValueError):
    """Raised when a stereographic grid cannot represent the requested cap."""


@dataclass(frozen=True)
class GeoPoint:
    """A georeferenced location: latitude/longitude in degrees, elevation in km."""

    lat: float
    lon: float
    elev: float = 0.0

    def __post_init__(self):
        if not (-90.0 <= self.lat <= 90.0):
            raise ValueError(f"latitude {self.lat} outside [-90, 90]")
        if not (-180.0 <= self.lon <= 180.0):
            raise ValueError(f"longitude {self.lon} outside [-180, 180]")
        if not math.isfinite(self.elev):
            raise ValueError("elevation must be finite")


@dataclass(frozen=True)
class SphereConfig:
    """Sphere radius in kilometers."""

    radius: float = EARTH_RADIUS_KM

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("radius must be positive")


def _as_arrays(points):
    """Stack GeoPoints (or an (n,3) array) into lat/lon/elev arrays."""
    if isinstance(points, np.ndarray):
        arr = np.atleast_2d(points)
        return arr[:, 0], arr[:, 1], arr[:, 2]
    lat = np.array([p.lat for p in points], dtype=float)
    lon = np.array([p.lon for p in points], dtype=float)
    elev = np.array([p.elev for p in points], dtype=float)
    return lat, lon, elev


def central_angle(lat1, lon1, lat2, lon2):
    """Central angle in radians between (lat1,lon1) and (lat2,lon2), degrees in.

    Vectorized haversine with atan2; exact 0 at coincident points and pi at
    antipodes up to floating point.
    """
    p1 = np.radians(lat1)
    p2 = np.radians(lat2)
    dlat = np.radians(np.subtract(lat2, lat1))
    dlon = np.radians(np.subtract(lon2, lon1))
    a = np.sin(dlat / 2.0) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlon / 2.0) ** 2
    a = np.clip(a, 0.0, 1.0)
    return 2.0 * np.arctan2(np.sqrt(a), np.sqrt(1.0 - a))


def great_circle_distance(a: GeoPoint, b: GeoPoint, cfg: SphereConfig = SphereConfig()):
    """Great-circle distance between two points.

    Returns (theta, arc_km): central angle in [0, pi] and arc length on the
    configured sphere.
    """
    theta = float(central_angle(a.lat, a.lon, b.lat, b.lon))
    return theta, theta * cfg.radius


def chordal_distance(a: GeoPoint, b: GeoPoint, cfg: SphereConfig = SphereConfig()) -> float:
    """Straight-line (chord) distance in km through the sphere, 2r·sin(theta/2)."""
    theta, _ = great_circle_distance(a, b, cfg)
    return 2.0 * cfg.radius * math.sin(theta / 2.0)


def angle_matrix(points_a, points_b) -> np.ndarray:
    """Pairwise central angles (radians) between two point collections."""
    lat_a, lon_a, _ = _as_arrays(points_a)
    lat_b, lon_b, _ = _as_arrays(points_b)
    return central_angle(lat_a[:, None], lon_a[:, None], lat_b[None, :], lon_b[None, :])


def elev_diff_matrix(points_a, points_b) -> np.ndarray:
    """Pairwise absolute elevation gaps (km)."""
    _, _, ea = _as_arrays(points_a)
    _, _, eb = _as_arrays(points_b)
    return np.abs(ea[:, None] - eb[None, :])


# --- south-polar stereographic grid ---------------------------------------


def _scale_k0() -> float:
    """Map scale at the pole for a grid true at the standard parallel."""
    c_ts = math.radians(90.0 + STD_PARALLEL_DEG)
    return math.cos(c_ts / 2.0) ** 2


def stereo_scale_factor(lat_deg, cfg: SphereConfig = SphereConfig()):
    """Stereographic scale factor k at a latitude (south-polar aspect).

    k = k0 / cos^2(c/2) with c the colatitude from the south pole; areas on
    the map are inflated by k^2 relative to the sphere.
    """
    c = np.radians(90.0 + np.asarray(lat_deg, dtype=float))
    return _scale_k0() / np.cos(c / 2.0) ** 2


def stereo_forward(lat_deg, lon_deg, cfg: SphereConfig = SphereConfig()):
    """(lat, lon) degrees -> planar (x, y) km, south-polar stereographic."""
    c = np.radians(90.0 + np.asarray(lat_deg, dtype=float))
    rho = 2.0 * cfg.radius * _scale_k0() * np.tan(c / 2.0)
    lam = np.radians(np.asarray(lon_deg, dtype=float))
    return rho * np.sin(lam), rho * np.cos(lam)


def stereo_inverse(x_km, y_km, cfg: SphereConfig = SphereConfig()):
    """Planar (x, y) km -> (lat, lon) degrees."""
    x = np.asarray(x_km, dtype=float)
    y = np.asarray(y_km, dtype=float)
    rho = np.hypot(x, y)
    c = 2.0 * np.arctan2(rho, 2.0 * cfg.radius * _scale_k0())
    lat = np.degrees(c) - 90.0
    lon = np.degrees(np.arctan2(x, y))
    return lat, lon


def spherical_cap_area(lat_cutoff_deg: float, cfg: SphereConfig = SphereConfig()) -> float:
    """Analytic area (km^2) of the south-polar cap bounded by lat_cutoff."""
    c_max = math.radians(90.0 + lat_cutoff_deg)
    return 2.0 * math.pi * cfg.radius**2 * (1.0 - math.cos(c_max))


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(24)


def _disk_rect_area(r: float, x0: float, x1: float, y0: float, y1: float):
    """Area and centroid of disk(radius r, centered) cut by a rectangle.

    Integrates the clipped vertical extent over x, splitting at the points
    where the circle crosses the horizontal edges so each piece is smooth
    (24-node Gauss-Legendre per piece is then accurate to machine precision).
    Returns (area, cx, cy); the centroid defaults to the rectangle center
    for an empty intersection.
    """
    lo, hi = max(x0, -r), min(x1, r)
    if lo >= hi:
        return 0.0, 0.5 * (x0 + x1), 0.5 * (y0 + y1)
    breaks = {lo, hi}
    for edge in (y0, y1):
        if abs(edge) < r:
            x_cross = math.sqrt(r * r - edge * edge)
            for xb in (-x_cross, x_cross):
                if lo < xb < hi:
                    breaks.add(xb)
    breaks = sorted(breaks)
    total = mx = my = 0.0
    for a, b in zip(breaks[:-1], breaks[1:]):
        x = 0.5 * (b - a) * _GL_NODES + 0.5 * (a + b)
        s = np.sqrt(np.maximum(r * r - x * x, 0.0))
        top = np.minimum(y1, s)
        bot = np.maximum(y0, -s)
        height = np.maximum(top - bot, 0.0)
        w = 0.5 * (b - a) * _GL_WEIGHTS
        total += float(w @ height)
        mx += float(w @ (x * height))
        my += float(w @ np.where(height > 0, 0.5 * (top**2 - bot**2), 0.0))
    if total <= 0:
        return 0.0, 0.5 * (x0 + x1), 0.5 * (y0 + y1)
    return total, mx / total, my / total


@dataclass
class AreaGrid:
    """Prediction grid with per-node true spherical cell areas (km^2).

    projection_meta carries the standard parallel and planar spacing so the
    grid is reproducible from the file alone.
    """

    points: list
    cell_area: np.ndarray
    projection_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.cell_area = np.asarray(self.cell_area, dtype=float)
        if len(self.points) != self.cell_area.shape[0]:
            raise ValueError("points and cell_area length mismatch")
        if np.any(self.cell_area <= 0):
            raise ValueError("all cell areas must be positive")
        coords = np.array([(p.lat, p.lon) for p in self.points])
        if coords.shape[0] and np.unique(coords, axis=0).shape[0] != coords.shape[0]:
            raise ValueError("grid points must be pairwise distinct")

    def __len__(self):
        return len(self.points)

    @property
    def total_area(self) -> float:
        return float(self.cell_area.sum())

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["lat", "lon", "elev", "cell_area_km2"])
            for p, a in zip(self.points, self.cell_area):
                writer.writerow([repr(p.lat), repr(p.lon), repr(p.elev), repr(float(a))])

    @classmethod
    def from_csv(cls, path) -> "AreaGrid":
        points, areas = [], []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            required = {"lat", "lon", "elev", "cell_area_km2"}
            if reader.fieldnames is None or not required.issubset(reader.fieldnames):
                raise ValueError(f"grid CSV must carry columns {sorted(required)}")
            for row in reader:
                points.append(GeoPoint(float(row["lat"]), float(row["lon"]), float(row["elev"])))
                areas.append(float(row["cell_area_km2"]))
        return cls(points=points, cell_area=np.array(areas))


def build_area_grid(
    spacing_km: float,
    lat_cutoff: float,
    cfg: SphereConfig = SphereConfig(),
) -> AreaGrid:
    """Uniform grid in the south-polar stereographic plane, cut at a latitude.

    Nodes sit on the integer lattice (i*spacing, j*spacing) including the
    pole; each retained node (lat <= lat_cutoff) gets cell_area =
    (planar cell area) / k^2 with k the local scale factor. The cap maps to
    a centered disk in the plane, so rim cells use the exact area of their
    square clipped by that disk; interior cells use the full spacing^2.

    Raises GridError if no node survives the cut or if the total area
    misstates the analytic cap area by more than 5% (spacing too large for
    the cutoff).
    """
    if spacing_km <= 0:
        raise ValueError("spacing must be positive")
    if not (-90.0 <= lat_cutoff < 0.0):
        raise ValueError("lat_cutoff must be a southern latitude in [-90, 0)")

    c_max = math.radians(90.0 + lat_cutoff)
    rho_max = 2.0 * cfg.radius * _scale_k0() * math.tan(c_max / 2.0)
    n = int(math.floor(rho_max / spacing_km))
    coords = np.arange(-n, n + 1) * spacing_km
    xx, yy = np.meshgrid(coords, coords)
    xx, yy = xx.ravel(), yy.ravel()
    lat, lon = stereo_inverse(xx, yy, cfg)
    keep = lat <= lat_cutoff
    if not np.any(keep):
        raise GridError(f"spacing {spacing_km} km leaves no node south of {lat_cutoff} deg")
    lat, lon, xx, yy = lat[keep], lon[keep], xx[keep], yy[keep]

    half = spacing_km / 2.0
    planar = np.full(lat.shape, spacing_km**2)
    corner = np.hypot(np.abs(xx) + half, np.abs(yy) + half)
    rim = corner > rho_max
    k0 = _scale_k0()
    k = stereo_scale_factor(lat, cfg)
    for i in np.flatnonzero(rim):
        a, cx, cy = _disk_rect_area(rho_max, xx[i] - half, xx[i] + half, yy[i] - half, yy[i] + half)
        planar[i] = a
        rho_c = math.hypot(cx, cy)
        k[i] = k0 * (1.0 + (rho_c / (2.0 * cfg.radius * k0)) ** 2)
    good = planar > 0
    lat, lon, k, planar, rim = lat[good], lon[good], k[good], planar[good], rim[good]
    # slivers of the disk under cells of dropped nodes, folded into the rim
    # cells so the retained cells tile the cap's planar disk exactly
    remainder = math.pi * rho_max**2 - planar.sum()
    rim_total = planar[rim].sum()
    if rim_total > 0:
        planar[rim] *= 1.0 + remainder / rim_total
    area = planar / k**2

    cap = spherical_cap_area(lat_cutoff, cfg)
    rel_err = abs(area.sum() - cap) / cap
    if rel_err > 0.05:
        raise GridError(
            f"spacing {spacing_km} km too large for cutoff {lat_cutoff} deg: "
            f"grid area off the analytic cap by {100 * rel_err:.1f}%"
        )
    if rel_err > 0.01:
        logger.warning(
            "grid area deviates %.2f%% from the analytic cap; consider a finer spacing",
            100 * rel_err,
        )

    points = [GeoPoint(float(la), float(lo), 0.0) for la, lo in zip(lat, lon)]
    meta = {"standard_parallel": STD_PARALLEL_DEG, "spacing_km": spacing_km, "lat_cutoff": lat_cutoff}
    return AreaGrid(points=points, cell_area=area, projection_meta=meta)


def idw_interpolate(
    target: GeoPoint,
    source_points,
    source_values,
    k: int = 8,
    power: float = 2.0,
) -> float:
    """Inverse-distance-weighted value at target from its k nearest sources.

    Weights are d^(-power) on great-circle distance. A source closer than
    1e-9 rad is treated as coincident and its value returned exactly.
    """
    values = np.asarray(source_values, dtype=float)
    lat, lon, _ = _as_arrays(source_points)
    if values.shape[0] != lat.shape[0]:
        raise ValueError("source_points and source_values length mismatch")
    if lat.shape[0] < k:
        raise ValueError(f"need at least k={k} sources, got {lat.shape[0]}")
    d = central_angle(target.lat, target.lon, lat, lon)
    hit = np.flatnonzero(d < 1e-9)
    if hit.size:
        return float(values[hit[0]])
    idx = np.argpartition(d, k - 1)[:k]
    w = d[idx] ** (-power)
    return float(np.sum(w * values[idx]) / np.sum(w))
