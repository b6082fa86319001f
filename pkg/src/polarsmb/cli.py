"""Command-line front end.

Subcommands: simulate, fit, predict, design, evaluate, diagnose. Every
command is deterministic under (config, seed) and writes its outputs under
--out. Exit codes: 0 success, 2 configuration error, 3 data error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import dataio, design, evaluate, pipeline, predict
from .config import ConfigError
from .covariance import CovarianceError
from .dataio import DataError, RawData
from .design import DesignProblem, DuplicateSiteError
from .evaluate import DegenerateChainError, HoldoutPlan, geweke_z
from .geo import GridError, build_area_grid
from .mcmc import SamplerError
from .model import ModelState, simulate_dataset
from .nngp import DegeneracyError
from .transform import LAMBDA_EPS, TransformRangeError, TransformSpec, boxcox_inverse

logger = logging.getLogger(__name__)


def _rng_sites(rng, n_sites: int, lat_cutoff: float):
    """Uniform-on-the-cap site sampling with synthetic raw covariates."""
    u = rng.uniform(np.sin(np.radians(-90.0)), np.sin(np.radians(lat_cutoff)), n_sites)
    lat = np.degrees(np.arcsin(u))
    lon = rng.uniform(-180.0, 180.0, n_sites)
    elev = rng.uniform(0.0, 4.0, n_sites)
    dc = rng.uniform(5.0, 1500.0, n_sites)
    temp = 248.0 - 6.5 * elev - 0.4 * (np.abs(lat) - 60.0) + rng.normal(0.0, 1.5, n_sites)
    return np.column_stack([lat, lon, elev]), elev, dc, temp


def _truth_state(cfg: dict, n_sites: int) -> ModelState:
    truth = cfgmod.get(cfg, "simulate.truth", {})
    beta = np.asarray(truth.get("beta", [0.3, -0.2, 0.5, -0.1, 0.0, -0.3, 0.05]), dtype=float)
    if "V" in truth:
        V = np.asarray(truth["V"], dtype=float)
    else:
        V = np.diag(np.asarray(truth.get("v_diag", [0.2, 0.1, 0.08, 0.15]), dtype=float))
    tau2 = np.asarray(truth.get("tau2", [0.05, 0.08, 0.12]), dtype=float)
    theta = float(truth.get("theta", 0.5))
    cov = cfgmod.covariance_from({"covariance": truth.get("covariance", {})})
    try:
        return ModelState(
            beta=beta,
            w=np.zeros((n_sites, 4)),
            V=V,
            tau2=tau2,
            theta=theta,
            labels_b=np.zeros(0, dtype=bool),
            cov=cov,
        )
    except ValueError as exc:
        raise ConfigError(f"simulate.truth: {exc}") from exc


def cmd_simulate(cfg: dict, out: Path, seed: int) -> int:
    n_sites = cfgmod.get_typed(cfg, "simulate.n_sites", int, 60)
    obs_per_site = cfgmod.get_typed(cfg, "simulate.obs_per_site", int, 2)
    frac_a = cfgmod.get_typed(cfg, "simulate.frac_a", float, 0.7)
    lat_cutoff = cfgmod.get_typed(cfg, "simulate.lat_cutoff", float, -62.0)
    m = cfgmod.get_typed(cfg, "simulate.m", int, 20)
    tdict = cfgmod.get(cfg, "simulate.transform", {})
    tspec = TransformSpec(
        shift=float(tdict.get("shift", 306.001)),
        lam=float(tdict.get("lam", 0.347)),
        center=float(tdict.get("center", 21.0)),
        scale=float(tdict.get("scale", 4.0)),
    )
    rng = np.random.default_rng(seed)
    sites, elev, dc, temp = _rng_sites(rng, n_sites, lat_cutoff)
    truth = _truth_state(cfg, n_sites)
    ds = simulate_dataset(
        truth, sites, elev, dc, temp, frac_a, obs_per_site, seed=rng.integers(2**31), m=m
    )

    # back-transform to the raw scale, clamping draws outside the image
    t_raw = ds.y * tspec.scale + tspec.center
    n_clamped = 0
    if abs(tspec.lam) >= LAMBDA_EPS:
        bound = -1.0 / tspec.lam
        bad = t_raw <= bound if tspec.lam > 0 else t_raw >= bound
        n_clamped = int(bad.sum())
        eps = 1e-9 * max(1.0, abs(bound))
        t_raw = np.where(bad, bound + (eps if tspec.lam > 0 else -eps), t_raw)
    smb = boxcox_inverse((t_raw - tspec.center) / tspec.scale, tspec)
    if n_clamped:
        logger.warning("%d simulated values clamped at the transform image boundary", n_clamped)

    raw = RawData(
        site_id=np.array([f"s{i:05d}" for i in range(n_sites)]),
        sites=sites,
        el=elev,
        dc=dc,
        temp=temp,
        site_idx=ds.site_idx,
        smb=smb,
        rating=np.where(ds.is_a, "A", "U"),
        source_id=np.array(["sim"] * ds.n_obs),
    )
    out_csv = out / cfgmod.get_typed(cfg, "simulate.out_csv", str, "observations.csv")
    dataio.write_observations(raw, out_csv)

    print(f"wrote {out_csv} ({raw.n_obs} observations at {raw.n_sites} sites)")
    print(f"truth beta = {truth.beta.tolist()}")
    print(f"truth tau2 = {truth.tau2.tolist()}  theta = {truth.theta}")
    print(
        "truth covariance: "
        + " ".join(f"{k}={v}" for k, v in truth.cov.to_dict().items() if k in ("family", "rho1", "rho2", "alpha", "delta", "nu"))
    )
    print(f"transform: shift={tspec.shift} lam={tspec.lam} center={tspec.center} scale={tspec.scale}")
    return 0


def _load_fit_inputs(cfg: dict, section: str):
    data_path = cfgmod.get_typed(cfg, f"{section}.data", str)
    if not Path(data_path).exists():
        raise ConfigError(f"{section}.data: file not found: {data_path}")
    return dataio.read_observations(data_path), data_path


def cmd_fit(cfg: dict, out: Path, seed: int) -> int:
    raw, data_path = _load_fit_inputs(cfg, "fit")
    m = cfgmod.get_typed(cfg, "fit.m", int, 20)
    order = cfgmod.get_typed(cfg, "fit.order", str, "maxmin")
    metric = cfgmod.get_typed(cfg, "fit.metric", str, "gc")
    shift = cfgmod.get_typed(cfg, "fit.shift", float, 306.001)
    priors = cfgmod.priors_from(cfg)
    sampler = cfgmod.sampler_from(cfg, seed)
    cov_init = cfgmod.covariance_from(cfg) if "covariance" in cfg else None

    fitted = pipeline.fit_model(
        raw, priors, sampler, cov_init=cov_init, shift=shift, m=m, order_strategy=order, metric=metric
    )

    chain_prefix = out / "chain"
    dataio.save_chain(fitted.chain, chain_prefix)
    from .mcmc import SamplerWorkspace

    ws = SamplerWorkspace(fitted.data, m, order, metric)
    ws.graph.to_edge_csv(out / "graph_edges.csv")
    dataio.save_artifact(
        out / "artifact.json",
        fitted.transform,
        fitted.scaler,
        "chain",  # chain files live next to the artifact
        dataset_hash=dataio.sha256_file(data_path),
        config_hash=dataio.sha256_json(cfg),
        fit_meta={
            "m": m,
            "order": order,
            "metric": metric,
            "shift": shift,
            "data": str(data_path),
            "n_sites": raw.n_sites,
            "n_obs": raw.n_obs,
        },
    )
    _write_diagnostics(fitted.chain.param_series(), out / "diagnostics.csv")
    print(f"fitted: lambda = {fitted.transform.lam:.6f}, {fitted.chain.n_draws} draws recorded")
    print(f"artifact: {out / 'artifact.json'}")
    return 0


def _write_diagnostics(series: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["param", "mean", "sd", "q025", "q975", "geweke_z"])
        for name, arr in series.items():
            try:
                z = repr(geweke_z(arr))
            except (ValueError, DegenerateChainError):
                z = "nan"
            writer.writerow([
                name,
                repr(float(np.mean(arr))),
                repr(float(np.std(arr, ddof=1))) if arr.shape[0] > 1 else "0.0",
                repr(float(np.percentile(arr, 2.5))),
                repr(float(np.percentile(arr, 97.5))),
                z,
            ])


def _load_artifact_bundle(cfg: dict, section: str):
    art_path = Path(cfgmod.get_typed(cfg, f"{section}.artifact", str))
    if not art_path.exists():
        raise ConfigError(f"{section}.artifact: file not found: {art_path}")
    artifact = dataio.load_artifact(art_path)
    data_path = cfgmod.get_typed(cfg, f"{section}.data", str, artifact["fit"]["data"])
    if not Path(data_path).exists():
        raise ConfigError(f"{section}.data: file not found: {data_path}")
    if dataio.sha256_file(data_path) != artifact["dataset_hash"]:
        raise DataError(f"{data_path}: hash does not match the artifact's dataset_hash (tamper check)")
    raw = dataio.read_observations(data_path)
    prefix = Path(artifact["chain_prefix"])
    if not prefix.is_absolute():
        prefix = art_path.parent / prefix
    chain = dataio.load_chain(prefix)
    data = dataio.dataset_from_raw(raw, artifact["transform"], artifact["scaler"])
    return artifact, raw, data, chain


def _grid_covariates(cfg: dict, section: str, raw: RawData, artifact):
    grid_path = cfgmod.get_typed(cfg, f"{section}.grid", str)
    if not Path(grid_path).exists():
        raise ConfigError(f"{section}.grid: file not found: {grid_path}")
    grid, dc_raw, temp_raw = dataio.read_grid_with_covariates(grid_path)
    impute = cfgmod.get(cfg, f"{section}.impute", True)
    missing = [name for name, col in (("dc", dc_raw), ("temp", temp_raw)) if col is None]
    if missing and not impute:
        raise DataError(f"{grid_path}: missing covariate columns {missing} and imputation is disabled")
    if dc_raw is None:
        dc_raw = dataio.impute_grid_covariate(grid, raw, "dc")
    if temp_raw is None:
        temp_raw = dataio.impute_grid_covariate(grid, raw, "temp")
    el_raw = np.array([p.elev for p in grid.points])
    if cfgmod.get(cfg, f"{section}.impute_elevation", False):
        el_raw = dataio.impute_grid_covariate(grid, raw, "el")
    scaler = artifact["scaler"]
    el, dc, temp = scaler.apply(el_raw, dc_raw, temp_raw)
    return grid, el, dc, temp


def cmd_predict(cfg: dict, out: Path, seed: int) -> int:
    artifact, raw, data, chain = _load_artifact_bundle(cfg, "predict")
    grid, el, dc, temp = _grid_covariates(cfg, "predict", raw, artifact)
    m = cfgmod.get_typed(cfg, "predict.m", int, artifact["fit"]["m"])
    draws_per_state = cfgmod.get_typed(cfg, "predict.draws_per_state", int, 1)
    include_nugget = bool(cfgmod.get(cfg, "predict.include_nugget", True))

    pgrid = predict.predict_grid(
        chain, data, grid, el, dc, temp, m, artifact["transform"],
        draws_per_state=draws_per_state, seed=seed, include_nugget=include_nugget,
        metric=artifact["fit"]["metric"],
    )
    predict.summarize_maps(pgrid, out / "mean.csv", out / "sd.csv")
    est = predict.integrate_smb(pgrid)
    text = est.to_text(out / "integral.txt")
    sys.stdout.write(text)
    return 0


def cmd_design(cfg: dict, out: Path, seed: int) -> int:
    artifact, raw, data, chain = _load_artifact_bundle(cfg, "design")
    grid, g_el, g_dc, g_temp = _grid_covariates(cfg, "design", raw, artifact)
    scaler = artifact["scaler"]

    gen = cfgmod.get(cfg, "design.generate_candidates", None)
    if gen is not None:
        cand_grid = build_area_grid(float(gen["spacing_km"]), float(gen["lat_cutoff"]))
        pts = np.array([[p.lat, p.lon, p.elev] for p in cand_grid.points])
        c_el_raw = dataio.impute_grid_covariate(cand_grid, raw, "el")
        c_dc_raw = dataio.impute_grid_covariate(cand_grid, raw, "dc")
        c_temp_raw = dataio.impute_grid_covariate(cand_grid, raw, "temp")
        pts = np.column_stack([pts[:, 0], pts[:, 1], c_el_raw])
    else:
        cand_path = cfgmod.get_typed(cfg, "design.candidates", str)
        if not Path(cand_path).exists():
            raise ConfigError(f"design.candidates: file not found: {cand_path}")
        pts, c_el_raw, c_dc_raw, c_temp_raw = dataio.read_candidates(cand_path)
    c_el, c_dc, c_temp = scaler.apply(c_el_raw, c_dc_raw, c_temp_raw)

    problem = DesignProblem(
        candidates=pts,
        cand_el=c_el,
        cand_dc=c_dc,
        cand_temp=c_temp,
        grid=grid,
        grid_el=g_el,
        grid_dc=g_dc,
        grid_temp=g_temp,
        n_select=cfgmod.get_typed(cfg, "design.n_select", int),
        m=cfgmod.get_typed(cfg, "design.m", int, artifact["fit"]["m"]),
        draws=cfgmod.get_typed(cfg, "design.draws", int, 50),
        inner_draws=cfgmod.get_typed(cfg, "design.inner_draws", int, 16),
        include_nugget=bool(cfgmod.get(cfg, "design.include_nugget", True)),
        seed=seed,
    )
    result = design.select_sites(problem, data, chain, artifact["transform"], metric=artifact["fit"]["metric"])
    result.to_csv(out / "design.csv")
    print(f"selected {len(result.selected_idx)} sites -> {out / 'design.csv'}")
    return 0


def cmd_evaluate(cfg: dict, out: Path, seed: int) -> int:
    raw, _ = _load_fit_inputs(cfg, "evaluate")
    plan = HoldoutPlan(
        replicates=cfgmod.get_typed(cfg, "evaluate.replicates", int, 100),
        holdout_size=cfgmod.get_typed(cfg, "evaluate.holdout_size", int, 1000),
        seed=seed,
    )
    n_a = int(np.sum(raw.rating == "A"))
    if n_a < plan.holdout_size + 10:
        raise DataError(f"need at least holdout_size+10={plan.holdout_size + 10} A-rated observations, have {n_a}")

    predictor = cfgmod.get_typed(cfg, "evaluate.predictor", str, "model")
    model_list = cfgmod.get(cfg, "evaluate.models", [{"name": "nonsep"}])
    sampler_path = "evaluate.sampler" if "sampler" in cfg.get("evaluate", {}) else "sampler"
    sampler = cfgmod.sampler_from(cfg, seed, sampler_path)
    models = {}
    for i, entry in enumerate(model_list):
        name = entry.get("name", f"model_{i}")
        cov = cfgmod.covariance_from({"covariance": entry.get("covariance", {})}) if "covariance" in entry else None
        models[name] = {
            "sampler": sampler,
            "cov_init": cov,
            "m": cfgmod.get_typed(cfg, "evaluate.m", int, 20),
            "shift": cfgmod.get_typed(cfg, "evaluate.shift", float, 306.001),
            "priors": cfgmod.priors_from(cfg),
        }
    fn = pipeline.stub_fit_and_predict() if predictor == "stub" else pipeline.holdout_fit_and_predict
    report = evaluate.run_holdout(raw, plan, models, fn)
    report.to_csv(out / "scores.csv")
    for name in report.models:
        print(f"{name}: prmse={report.prmse[name]:.4f} coverage90={report.coverage90[name]:.3f} crps={report.crps[name]:.4f}")
    return 0


def cmd_diagnose(cfg: dict, out: Path, seed: int) -> int:
    prefix = cfgmod.get_typed(cfg, "diagnose.chain", str)
    if not Path(f"{prefix}.npz").exists():
        raise ConfigError(f"diagnose.chain: chain files not found at prefix {prefix}")
    chain = dataio.load_chain(prefix)
    _write_diagnostics(chain.param_series(), out / "diagnostics.csv")
    series = chain.param_series()
    n_fail = 0
    for name, arr in series.items():
        try:
            z = geweke_z(arr)
        except (ValueError, DegenerateChainError):
            continue
        if abs(z) > 1.96:
            n_fail += 1
            print(f"nonstationary: {name} |z| = {abs(z):.2f}")
    print(f"geweke: {n_fail} of {len(series)} monitored parameters flagged")
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "design": cmd_design,
    "evaluate": cmd_evaluate,
    "diagnose": cmd_diagnose,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="polarsmb",
        description="NNGP regression on the sphere: simulate, fit, predict, design, evaluate, diagnose",
    )
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="path to the JSON run configuration")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--threads", type=int, default=None, help="cap BLAS/OpenMP threads")
    parser.add_argument("--out", default=".", help="output directory")
    parser.add_argument("--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        cfg = cfgmod.load_config(args.config)
        seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.threads is not None:
            import threadpoolctl

            threadpoolctl.threadpool_limits(args.threads)
        return COMMANDS[args.command](cfg, out, seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (CovarianceError, GridError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, DuplicateSiteError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (SamplerError, DegeneracyError, DegenerateChainError, TransformRangeError,
            np.linalg.LinAlgError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
