"""Command line: simulate, assign, estimate, diagnose, distribution.

Exit codes: 0 success, 2 configuration error, 3 data validation error,
4 non-convergence, 5 degenerate model, 6 every diagnostic suite failed.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import dgp, estimator, geo, inference, tables, treatment
from . import panel as panel_mod
from .design import ModelSpec, attach_events, build_design, select_sample
from .errors import ConfigError, EventStudyError

log = logging.getLogger("eventstudy")

EXIT_ALL_DIAGNOSTICS_FAILED = 6


@dataclass
class RunConfig:
    """Resolved settings for estimate/diagnose/distribution runs."""

    panel: str | None = None
    centroids: str | None = None
    events: str | None = None
    codebook: str | None = None
    spec: dict | str | None = None
    mode: str | None = None
    radii: tuple[float, ...] = (10.0, 25.0, 50.0)
    excluded_years: tuple[int, ...] = panel_mod.DEFAULT_EXCLUDED_YEARS
    standardize_scope: str = "year"
    tol: float = estimator.DEFAULT_TOL
    max_iter: int = estimator.DEFAULT_MAX_ITER
    small_sample: str = "cr1"
    level: float = 0.95

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}")
        return cls(**d)

    def resolved_spec(self) -> ModelSpec:
        if self.spec is None:
            spec = ModelSpec()
        elif isinstance(self.spec, dict):
            spec = ModelSpec.from_dict(self.spec)
        else:
            spec = ModelSpec.load(self.spec)
        if self.mode is not None:
            spec = spec.replace(mode=self.mode)
        return spec

    def echo(self) -> dict:
        d = asdict(self)
        d["spec"] = self.resolved_spec().to_dict()
        d["mode"] = None
        d["radii"] = list(self.radii)
        d["excluded_years"] = list(self.excluded_years)
        return d


def _load_json(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        d = json.loads(p.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigError(f"config {p} must hold a JSON object")
    return d


def _resolve(args, keys: dict[str, str]) -> RunConfig:
    """Defaults < config file < explicit flags."""
    d = _load_json(args.config) if getattr(args, "config", None) else {}
    for attr, key in keys.items():
        v = getattr(args, attr, None)
        if v is not None:
            d[key] = v
    return RunConfig.from_dict(d)


def _write_text(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")


def _write_json(path: Path, obj) -> None:
    _write_text(path, json.dumps(obj, indent=2, allow_nan=False) + "\n")


def _require(cfg: RunConfig, *names):
    missing = [n for n in names if getattr(cfg, n) is None]
    if missing:
        raise ConfigError(f"missing required inputs: {', '.join('--' + n for n in missing)}")


def _load_inputs(cfg: RunConfig):
    _require(cfg, "panel", "centroids", "events")
    codebook = panel_mod.Codebook.load(cfg.codebook)
    eventmap = geo.assign_events(geo.read_centroids(cfg.centroids), geo.read_events(cfg.events), cfg.radii)
    raw, report = panel_mod.read_students(cfg.panel, codebook)
    prepared = panel_mod.prepare_panel(raw, cfg.excluded_years, cfg.standardize_scope, report)
    del raw
    return codebook, eventmap, prepared, report


def _fit_kw(cfg: RunConfig, threads: int) -> dict:
    return {"tol": cfg.tol, "max_iter": cfg.max_iter, "threads": threads, "adjustment": cfg.small_sample}


def cmd_simulate(args) -> int:
    config = dgp.DgpConfig.load(args.config) if args.config else dgp.DgpConfig()
    if args.seed is not None:
        config = dgp.DgpConfig.from_dict({**config.to_dict(), "seed": args.seed})
    # truth.json carries the same config block; it can be fed back through --config
    print(json.dumps({"resolved_config": config.to_dict()}, sort_keys=True), file=sys.stderr)
    sim = dgp.simulate_panel(config)
    paths = sim.write(Path(args.out))
    for p in paths:
        log.info("wrote %s", p)
    return 0


def cmd_assign(args) -> int:
    cfg = _resolve(args, {"centroids": "centroids", "events": "events"})
    if args.radii:
        cfg.radii = tuple(float(r) for r in args.radii.split(","))
    _require(cfg, "centroids", "events")
    em = geo.assign_events(geo.read_centroids(cfg.centroids), geo.read_events(cfg.events), cfg.radii)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    em.to_csv(out / "eventmap.csv")
    if args.stdout:
        sys.stdout.write((out / "eventmap.csv").read_text(encoding="utf-8"))
    return 0


_RUN_KEYS = {
    "panel": "panel", "centroids": "centroids", "events": "events", "codebook": "codebook",
    "spec": "spec", "mode": "mode", "tol": "tol", "max_iter": "max_iter",
}


def cmd_estimate(args) -> int:
    cfg = _resolve(args, _RUN_KEYS)
    spec = cfg.resolved_spec()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "resolved_config.json", cfg.echo())
    codebook, eventmap, prepared, report = _load_inputs(cfg)
    _write_json(out / "ingest_report.json", report.to_dict())

    if spec.mode == treatment.BALANCE:
        table = inference.balance_suite(prepared, eventmap, spec, **_fit_kw(cfg, args.threads))
        _write_json(out / "balance.json", table.to_dict())
        text = table.format(spec.report_k_max)
        _write_text(out / "table.txt", text)
        if all(f is None for f in table.fits.values()):
            raise next(iter(_errors_as_exc(table.errors)))
    else:
        design = build_design(prepared, eventmap, spec, codebook)
        design.meta["singletons_dropped"] = report.singletons_dropped
        fit = estimator.fit(design, **_fit_kw(cfg, args.threads))
        _write_text(out / "fit.json", fit.to_json())
        text = tables.regression_table([fit], report_k_max=spec.report_k_max,
                                       title="OLS results: effect of the opening on standardized grades")
        _write_text(out / "table.txt", text)
        plot = inference.coefficient_plot(fit, level=cfg.level, k_max=spec.report_k_max)
        inference.write_plot_csv(plot, out / "coefplot.csv")
    if args.stdout:
        sys.stdout.write(text)
    return 0


def _errors_as_exc(errors: dict[str, str]):
    from .errors import DegenerateModelError
    for msg in errors.values():
        yield DegenerateModelError(msg)


def cmd_diagnose(args) -> int:
    cfg = _resolve(args, _RUN_KEYS)
    spec = cfg.resolved_spec()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "resolved_config.json", cfg.echo())
    _, eventmap, prepared, report = _load_inputs(cfg)
    rep = inference.run_diagnostics(prepared, eventmap, spec, level=cfg.level,
                                    singletons_dropped=report.singletons_dropped, **_fit_kw(cfg, args.threads))
    _write_text(out / "diagnostics.json", rep.to_json())
    for name, plot in rep.plots.items():
        inference.write_plot_csv(plot, out / f"{name}_plot.csv")
    for name, text in rep.tables.items():
        _write_text(out / f"{name}_table.txt", text)
    for suite, err in rep.errors.items():
        log.warning("%s suite failed: %s", suite, err)
    if args.stdout:
        sys.stdout.write(rep.to_json())
    return 0 if rep.succeeded else EXIT_ALL_DIAGNOSTICS_FAILED


def cmd_distribution(args) -> int:
    cfg = _resolve(args, _RUN_KEYS)
    spec = cfg.resolved_spec()
    _, eventmap, prepared, _ = _load_inputs(cfg)
    sample = select_sample(attach_events(prepared, eventmap), eventmap, spec.sample_name)
    k = sample["k"].to_numpy()
    groups = {
        "University Municipalities": (sample["buffer_class"] == geo.HOST).to_numpy(),
        "Buffer Municipalities": np.ones(len(sample), dtype=bool),
    }
    dist = treatment.treatment_distribution(k, groups)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dist.to_csv(out / "distribution.csv", index=False, lineterminator="\n", float_format="%.17g")
    text = treatment.format_distribution(dist)
    _write_text(out / "distribution.txt", text)
    if args.stdout:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eventstudy", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, inputs=True):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
        p.add_argument("--stdout", action="store_true", help="also print the main artifact to stdout")
        if inputs:
            p.add_argument("--panel", help="students.csv")
            p.add_argument("--centroids", help="centroids.csv")
            p.add_argument("--events", help="events.csv")
            p.add_argument("--codebook", help="codebook JSON")
            p.add_argument("--spec", help="model spec JSON")
            p.add_argument("--mode", choices=treatment.MODES)
            p.add_argument("--tol", type=float)
            p.add_argument("--max-iter", dest="max_iter", type=int)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    p.add_argument("--config", help="DGP config JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("assign", help="assign municipalities to opening events")
    common(p, inputs=False)
    p.add_argument("--centroids")
    p.add_argument("--events")
    p.add_argument("--radii", help="comma-separated km thresholds, e.g. 10,25,50")
    p.set_defaults(func=cmd_assign)

    for name, func, helptext in [
        ("estimate", cmd_estimate, "fit an event-study regression"),
        ("diagnose", cmd_diagnose, "pre-trend, placebo and balance diagnostics"),
        ("distribution", cmd_distribution, "distribution of observations over event time"),
    ]:
        p = sub.add_parser(name, help=helptext)
        common(p)
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(message)s")
    if getattr(args, "threads", 1) < 1:
        parser.error("--threads must be at least 1")
    try:
        return args.func(args)
    except EventStudyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
