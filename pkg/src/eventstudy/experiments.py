"""Simulation experiments: effect recovery, pre-trend test size and placebo null.

Each experiment is a pure function of its config and seeds. ``python -m
eventstudy.experiments <name>`` runs one and prints a JSON summary, which is
how the recovery run gets an isolated peak-memory measurement.
"""
from __future__ import annotations

import argparse
import json
import resource
import sys
import time
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import dgp, estimator, inference
from .design import ModelSpec, build_design
from .errors import EventStudyError
from .panel import prepare_panel
from .treatment import column_name as event_column, is_event_column, k_from_name

REPORTED_K = tuple(range(-2, 6))
AVERAGE_K = tuple(range(0, 6))


def _peak_rss_gb() -> float:
    # ru_maxrss is in kilobytes on Linux
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss / 1e6


@dataclass
class RecoveryConfig:
    dgp: dgp.DgpConfig = field(default_factory=dgp.DgpConfig)
    spec: ModelSpec = field(default_factory=ModelSpec)
    threads: int = 1
    z_bound: float = 2.0
    average_tol: float = 0.01


def recovery(cfg: RecoveryConfig | None = None) -> dict:
    """Simulate, fit the semi-dynamic model and compare with the truth path.

    With distance interactions the event dummies measure the effect at the
    host (zero distance), so they are compared with ``beta_host``.
    """
    cfg = cfg or RecoveryConfig()
    t0 = time.perf_counter()
    sim = dgp.simulate_panel(cfg.dgp)
    t_sim = time.perf_counter()
    panel = prepare_panel(sim.records)
    n_raw = len(sim.records)
    del sim.records
    design = build_design(panel, sim.eventmap, cfg.spec.replace(mode="semidynamic"))
    n_years = int(panel["year"].nunique())
    del panel
    fit = estimator.fit(design, threads=cfg.threads)
    t_fit = time.perf_counter()

    truth = sim.truth["beta_host"] if cfg.spec.distance_interactions else sim.truth["beta"]
    rows = []
    for k in REPORTED_K:
        name = event_column(k)
        b, se = fit.estimate(name), fit.std_error(name)
        rows.append({"k": k, "estimate": b, "se": se, "truth": truth[str(k)], "z": (b - truth[str(k)]) / se})
    avg = float(np.mean([fit.estimate(event_column(k)) for k in AVERAGE_K]))
    avg_truth = float(np.mean([truth[str(k)] for k in AVERAGE_K]))
    all_z = {k_from_name(n): (fit.estimate(n) - truth[str(k_from_name(n))]) / fit.std_error(n)
             for n in fit.names if is_event_column(n)}
    return {
        "seed": cfg.dgp.seed,
        "n_raw": n_raw,
        "n_obs": fit.n_obs,
        "n_clusters": fit.n_clusters,
        "n_years": n_years,
        "coefficients": rows,
        "max_abs_z_reported": max(abs(r["z"]) for r in rows),
        "max_abs_z_all": max(abs(z) for z in all_z.values()),
        "average": avg,
        "average_truth": avg_truth,
        "each_within_bound": all(abs(r["z"]) <= cfg.z_bound for r in rows),
        "average_within_tol": abs(avg - avg_truth) <= cfg.average_tol,
        "seconds_simulate": t_sim - t0,
        "seconds_estimate": t_fit - t_sim,
        "seconds_total": t_fit - t0,
        "peak_rss_gb": _peak_rss_gb(),
    }


SIZE_DGP = dict(n_municipalities=20, n_ring=0, students_per_cell=200, K_near=1.5, K_far=1.5)


@dataclass
class SizeConfig:
    n_reps: int = 200
    base_seed: int = 0
    n_boot: int = 399
    level: float = 0.05
    dgp_overrides: dict = field(default_factory=lambda: dict(SIZE_DGP))
    spec: ModelSpec = field(default_factory=lambda: ModelSpec(mode="pretrend"))


def pretrend_replicate(seed: int, cfg: SizeConfig) -> dict:
    """One null replication: chi-square and bootstrap p-values of the joint lead test."""
    sim = dgp.simulate_panel(dgp.DgpConfig(**{**cfg.dgp_overrides, "seed": seed}))
    design = build_design(prepare_panel(sim.records), sim.eventmap, cfg.spec.replace(mode="pretrend"))
    out = {"seed": seed, "p_chi2": None, "p_boot": None, "error": None}
    try:
        r = estimator.residualize(design)
        fit = estimator.fit_residualized(design, r)
        test = inference.pretrend_test(fit)
        boot = inference.wild_bootstrap_wald(design, test.restricted_names, cfg.n_boot, seed, residualized=r)
        out.update(p_chi2=test.p_value, p_boot=boot.p_value, statistic=test.statistic, df=test.df)
    except EventStudyError as exc:
        out["error"] = f"{type(exc).__name__}: {exc}"
    return out


def pretrend_size(cfg: SizeConfig | None = None) -> dict:
    """Rejection rates of the pre-trend test under a DGP with no effect anywhere.

    A replication whose test cannot be computed counts as a non-rejection and
    is listed under ``errors``.
    """
    cfg = cfg or SizeConfig()
    t0 = time.perf_counter()
    reps = [pretrend_replicate(cfg.base_seed + i, cfg) for i in range(cfg.n_reps)]

    def rate(key):
        return float(np.mean([r[key] is not None and r[key] < cfg.level for r in reps]))

    return {
        "n_reps": cfg.n_reps,
        "base_seed": cfg.base_seed,
        "n_boot": cfg.n_boot,
        "level": cfg.level,
        "rejection_rate_bootstrap": rate("p_boot"),
        "rejection_rate_chi2": rate("p_chi2"),
        "errors": [r for r in reps if r["error"]],
        "seconds": time.perf_counter() - t0,
        "replications": reps,
    }


PLACEBO_DGP = dict(n_municipalities=20, n_ring=30, students_per_cell=200, kappa=1.0)


@dataclass
class PlaceboConfig:
    n_reps: int = 100
    base_seed: int = 0
    z_bound: float = 2.0
    share: float = 0.90
    dgp_overrides: dict = field(default_factory=lambda: dict(PLACEBO_DGP))
    spec: ModelSpec = field(default_factory=ModelSpec)


def placebo_replicate(seed: int, cfg: PlaceboConfig) -> dict:
    config = dgp.DgpConfig(**{**cfg.dgp_overrides, "seed": seed})
    sim = dgp.simulate_panel(config)
    out = {"seed": seed, "z": None, "error": None,
           "ring_effect": dgp.effect_at(config, config.buffer_radius_km)}
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            fit = inference.placebo_run(prepare_panel(sim.records), sim.eventmap, cfg.spec)
        out["z"] = {str(k): fit.estimate(event_column(k)) / fit.std_error(event_column(k))
                    for k in REPORTED_K if event_column(k) in fit.names}
    except EventStudyError as exc:
        out["error"] = f"{type(exc).__name__}: {exc}"
    return out


def placebo_null(cfg: PlaceboConfig | None = None) -> dict:
    """Share of replications in which each ring placebo coefficient is within ``z_bound`` se of zero."""
    cfg = cfg or PlaceboConfig()
    t0 = time.perf_counter()
    reps = [placebo_replicate(cfg.base_seed + i, cfg) for i in range(cfg.n_reps)]
    share = {}
    for k in REPORTED_K:
        ok = [r["z"] is not None and str(k) in r["z"] and abs(r["z"][str(k)]) <= cfg.z_bound for r in reps]
        share[str(k)] = float(np.mean(ok))
    every = float(np.mean([r["z"] is not None and all(abs(z) <= cfg.z_bound for z in r["z"].values())
                           for r in reps]))
    return {
        "n_reps": cfg.n_reps,
        "base_seed": cfg.base_seed,
        "share_within_by_k": share,
        "min_share": min(share.values()),
        "share_all_within": every,
        "max_ring_effect": max(r["ring_effect"] for r in reps),
        "errors": [r for r in reps if r["error"]],
        "seconds": time.perf_counter() - t0,
        "replications": reps,
    }


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="python -m eventstudy.experiments")
    p.add_argument("experiment", choices=["recovery", "pretrend-size", "placebo-null"])
    p.add_argument("--seed", type=int, help="DGP seed (recovery) or base seed (replications)")
    p.add_argument("--reps", type=int)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--summary", action="store_true", help="omit per-replication records")
    args = p.parse_args(argv)
    if args.experiment == "recovery":
        cfg = RecoveryConfig(threads=args.threads)
        if args.seed is not None:
            cfg.dgp = replace(cfg.dgp, seed=args.seed)
        res = recovery(cfg)
    else:
        cfg = SizeConfig() if args.experiment == "pretrend-size" else PlaceboConfig()
        if args.seed is not None:
            cfg.base_seed = args.seed
        if args.reps is not None:
            cfg.n_reps = args.reps
        res = pretrend_size(cfg) if args.experiment == "pretrend-size" else placebo_null(cfg)
        if args.summary:
            res.pop("replications")
    json.dump(_jsonable(res), sys.stdout, indent=2)
    sys.stdout.write("\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
