"""File formats and persistence: observation CSV, grid covariates, chain
files, and the fitted-model artifact.

Observation CSV schema:
    site_id,lat,lon,elev_km,dist_coast_km,temp_k,smb_mmwe,rating,source_id
with rating in {A, U} (the source database distinguishes only A-rated from
non-A-rated). Repeated site_id rows are repeated measurements and must agree
on coordinates and covariates; identical coordinates under distinct site_ids
are an error.

Chains persist as a hybrid: a long-format CSV (iter,param,value) of the
scalar series for inspection, an .npz with every recorded array for exact
reload, and a JSON manifest binding seed, config hash, and acceptance rates.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .covariance import CovarianceSpec
from .geo import AreaGrid, GeoPoint, idw_interpolate
from .mcmc import Chain, SamplerConfig
from .model import Dataset
from .transform import TransformSpec, boxcox_forward

logger = logging.getLogger(__name__)

OBS_HEADER = ["site_id", "lat", "lon", "elev_km", "dist_coast_km", "temp_k", "smb_mmwe", "rating", "source_id"]
CAND_HEADER = ["lat", "lon", "elev_km", "dist_coast_km", "temp_k"]


class DataError(ValueError):
    """Malformed or inconsistent input data."""


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(65536), b""):
            h.update(block)
    return h.hexdigest()


def sha256_json(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


@dataclass
class RawData:
    """Raw-scale observations over unique sites."""

    site_id: np.ndarray  # (N_u,) labels
    sites: np.ndarray  # (N_u, 3) lat, lon, elev_km
    el: np.ndarray  # (N_u,) raw elevation covariate (km)
    dc: np.ndarray  # (N_u,) raw distance to coast (km)
    temp: np.ndarray  # (N_u,) raw temperature (K)
    site_idx: np.ndarray  # (N,) observation -> site
    smb: np.ndarray  # (N,) mm w.e./yr
    rating: np.ndarray  # (N,) "A" or "U"
    source_id: np.ndarray  # (N,) labels

    @property
    def n_sites(self) -> int:
        return self.sites.shape[0]

    @property
    def n_obs(self) -> int:
        return self.smb.shape[0]

    def drop_obs(self, obs_indices) -> "RawData":
        """Remove observations; prune sites left with no measurements."""
        keep = np.ones(self.n_obs, dtype=bool)
        keep[np.asarray(obs_indices, dtype=int)] = False
        site_idx = self.site_idx[keep]
        used = np.unique(site_idx)
        remap = -np.ones(self.n_sites, dtype=int)
        remap[used] = np.arange(used.size)
        return RawData(
            site_id=self.site_id[used],
            sites=self.sites[used],
            el=self.el[used],
            dc=self.dc[used],
            temp=self.temp[used],
            site_idx=remap[site_idx],
            smb=self.smb[keep],
            rating=self.rating[keep],
            source_id=self.source_id[keep],
        )

    def obs_points(self, obs_indices):
        """(points, el, dc, temp) for the sites of the given observations."""
        idx = self.site_idx[np.asarray(obs_indices, dtype=int)]
        return self.sites[idx], self.el[idx], self.dc[idx], self.temp[idx]


def write_observations(raw: RawData, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(OBS_HEADER)
        for n in range(raw.n_obs):
            i = raw.site_idx[n]
            writer.writerow([
                raw.site_id[i],
                repr(float(raw.sites[i, 0])),
                repr(float(raw.sites[i, 1])),
                repr(float(raw.sites[i, 2])),
                repr(float(raw.dc[i])),
                repr(float(raw.temp[i])),
                repr(float(raw.smb[n])),
                raw.rating[n],
                raw.source_id[n],
            ])


def read_observations(path) -> RawData:
    """Parse and validate the observation CSV; errors carry line numbers."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != OBS_HEADER:
            raise DataError(f"{path}: header must be {','.join(OBS_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(OBS_HEADER):
                raise DataError(f"{path} line {lineno}: expected {len(OBS_HEADER)} fields, got {len(row)}")
            try:
                rec = {
                    "site_id": row[0],
                    "lat": float(row[1]),
                    "lon": float(row[2]),
                    "elev_km": float(row[3]),
                    "dc": float(row[4]),
                    "temp": float(row[5]),
                    "smb": float(row[6]),
                    "rating": row[7],
                    "source_id": row[8],
                }
            except ValueError as exc:
                raise DataError(f"{path} line {lineno}: {exc}") from exc
            if rec["rating"] not in ("A", "U"):
                raise DataError(f"{path} line {lineno}: rating must be A or U, got {row[7]!r}")
            if not (-90 <= rec["lat"] <= 90) or not (-180 <= rec["lon"] <= 180):
                raise DataError(f"{path} line {lineno}: coordinates out of range")
            rec["lineno"] = lineno
            rows.append(rec)
    if not rows:
        raise DataError(f"{path}: no observations")

    by_site: dict = {}
    order: list = []
    for rec in rows:
        sid = rec["site_id"]
        key = (rec["lat"], rec["lon"], rec["elev_km"], rec["dc"], rec["temp"])
        if sid in by_site:
            if by_site[sid]["key"] != key:
                raise DataError(
                    f"{path} line {rec['lineno']}: site_id {sid} repeats with different coordinates/covariates"
                )
        else:
            by_site[sid] = {"key": key, "index": len(order)}
            order.append(sid)
    coords_seen: dict = {}
    for sid in order:
        coord = by_site[sid]["key"][:3]
        if coord in coords_seen:
            raise DataError(
                f"{path}: sites {coords_seen[coord]} and {sid} share coordinates {coord} under distinct ids"
            )
        coords_seen[coord] = sid

    n_u = len(order)
    sites = np.empty((n_u, 3))
    el = np.empty(n_u)
    dc = np.empty(n_u)
    temp = np.empty(n_u)
    for sid in order:
        i = by_site[sid]["index"]
        lat, lon, elev_km, dcv, tv = by_site[sid]["key"]
        sites[i] = (lat, lon, elev_km)
        el[i], dc[i], temp[i] = elev_km, dcv, tv
    return RawData(
        site_id=np.array(order),
        sites=sites,
        el=el,
        dc=dc,
        temp=temp,
        site_idx=np.array([by_site[r["site_id"]]["index"] for r in rows], dtype=int),
        smb=np.array([r["smb"] for r in rows]),
        rating=np.array([r["rating"] for r in rows]),
        source_id=np.array([r["source_id"] for r in rows]),
    )


@dataclass
class CovariateScaler:
    """Training-data centering/scaling for el, dc, temp."""

    means: dict
    sds: dict

    @classmethod
    def fit(cls, el, dc, temp) -> "CovariateScaler":
        means, sds = {}, {}
        for name, col in (("el", el), ("dc", dc), ("temp", temp)):
            col = np.asarray(col, dtype=float)
            means[name] = float(col.mean())
            sd = float(col.std())
            if sd <= 0:
                raise DataError(f"covariate {name} is constant; cannot standardize")
            sds[name] = sd
        return cls(means=means, sds=sds)

    def apply(self, el, dc, temp):
        return (
            (np.asarray(el, dtype=float) - self.means["el"]) / self.sds["el"],
            (np.asarray(dc, dtype=float) - self.means["dc"]) / self.sds["dc"],
            (np.asarray(temp, dtype=float) - self.means["temp"]) / self.sds["temp"],
        )

    def to_dict(self) -> dict:
        return {"means": self.means, "sds": self.sds}

    @classmethod
    def from_dict(cls, d) -> "CovariateScaler":
        return cls(means=dict(d["means"]), sds=dict(d["sds"]))


def dataset_from_raw(raw: RawData, tspec: TransformSpec, scaler: CovariateScaler) -> Dataset:
    el, dc, temp = scaler.apply(raw.el, raw.dc, raw.temp)
    y = boxcox_forward(raw.smb, tspec)
    return Dataset(
        sites=raw.sites,
        el=el,
        dc=dc,
        temp=temp,
        site_idx=raw.site_idx,
        y=y,
        is_a=raw.rating == "A",
    )


# --- grid covariates --------------------------------------------------------


def read_grid_with_covariates(path):
    """AreaGrid CSV plus optional dist_coast_km/temp_k columns.

    Returns (grid, dc or None, temp or None).
    """
    grid = AreaGrid.from_csv(path)
    dc = temp = None
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        names = reader.fieldnames or []
        if "dist_coast_km" in names or "temp_k" in names:
            dcs, temps = [], []
            for row in reader:
                dcs.append(float(row["dist_coast_km"]) if "dist_coast_km" in names else np.nan)
                temps.append(float(row["temp_k"]) if "temp_k" in names else np.nan)
            if "dist_coast_km" in names:
                dc = np.array(dcs)
            if "temp_k" in names:
                temp = np.array(temps)
    return grid, dc, temp


def impute_grid_covariate(grid: AreaGrid, raw: RawData, column: str, k: int = 8) -> np.ndarray:
    """IDW-impute a raw covariate column at grid nodes from the data sites."""
    values = {"el": raw.el, "dc": raw.dc, "temp": raw.temp}[column]
    k = min(k, raw.n_sites)
    pts = [GeoPoint(s[0], s[1], s[2]) for s in raw.sites]
    out = np.array([idw_interpolate(p, pts, values, k=k) for p in grid.points])
    logger.info("imputed grid column %s from %d data sites (k=%d)", column, raw.n_sites, k)
    return out


def read_candidates(path):
    """Candidate CSV -> (points (n,3), el, dc, temp raw arrays)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CAND_HEADER:
            raise DataError(f"{path}: header must be {','.join(CAND_HEADER)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise DataError(f"{path} line {lineno}: {exc}") from exc
    if not rows:
        raise DataError(f"{path}: no candidates")
    arr = np.asarray(rows)
    return arr[:, :3], arr[:, 2], arr[:, 3], arr[:, 4]


# --- chain + artifact persistence -------------------------------------------


def save_chain(chain: Chain, prefix) -> dict:
    """Write <prefix>.csv, <prefix>.npz and <prefix>.manifest.json."""
    prefix = Path(prefix)
    series = chain.param_series()
    with open(f"{prefix}.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iter", "param", "value"])
        for name, arr in series.items():
            for it, v in enumerate(arr):
                writer.writerow([it, name, repr(float(v))])
    np.savez_compressed(
        f"{prefix}.npz",
        beta=chain.beta,
        w=chain.w,
        V=chain.V,
        tau2=chain.tau2,
        theta=chain.theta,
        rho1=chain.rho1,
        rho2=chain.rho2,
        alpha=chain.alpha,
        delta=chain.delta,
        nu=chain.nu,
        labels_b=chain.labels_b,
        cov_template=json.dumps(chain.cov_template.to_dict()),
    )
    manifest = {
        "seed": chain.config.seed,
        "config": chain.config.to_dict(),
        "acceptance": _jsonable(chain.acceptance),
        "n_draws": chain.n_draws,
        "files": {"params_csv": f"{prefix.name}.csv", "arrays_npz": f"{prefix.name}.npz"},
    }
    with open(f"{prefix}.manifest.json", "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
    return manifest


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    return obj


def load_chain(prefix) -> Chain:
    with np.load(f"{prefix}.npz", allow_pickle=False) as z:
        cov_template = CovarianceSpec.from_dict(json.loads(str(z["cov_template"])))
        with open(f"{prefix}.manifest.json") as fh:
            manifest = json.load(fh)
        return Chain(
            beta=z["beta"],
            w=z["w"],
            V=z["V"],
            tau2=z["tau2"],
            theta=z["theta"],
            rho1=z["rho1"],
            rho2=z["rho2"],
            alpha=z["alpha"],
            delta=z["delta"],
            nu=z["nu"],
            labels_b=z["labels_b"],
            acceptance=manifest.get("acceptance", {}),
            config=SamplerConfig.from_dict(manifest["config"]),
            cov_template=cov_template,
        )


TOOL_VERSION = "0.1.0"


def save_artifact(
    path,
    transform: TransformSpec,
    scaler: CovariateScaler,
    chain_prefix: str,
    dataset_hash: str,
    config_hash: str,
    fit_meta: dict,
) -> None:
    doc = {
        "tool_version": TOOL_VERSION,
        "transform": transform.to_dict(),
        "scaler": scaler.to_dict(),
        "chain_prefix": chain_prefix,
        "dataset_hash": dataset_hash,
        "config_hash": config_hash,
        "fit": fit_meta,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)


def load_artifact(path) -> dict:
    with open(path) as fh:
        doc = json.load(fh)
    doc["transform"] = TransformSpec.from_dict(doc["transform"])
    doc["scaler"] = CovariateScaler.from_dict(doc["scaler"])
    return doc
