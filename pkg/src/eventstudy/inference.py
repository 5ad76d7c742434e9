"""Pre-trend tests, placebo and composition-balance runs, Monte Carlo size checks."""
from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import pandas as pd
from scipy import stats
from threadpoolctl import threadpool_limits

from . import estimator
from . import treatment as tr
from .design import BALANCE_COVARIATES, BALANCE_LABELS, ModelSpec, attach_events, balance_design, \
    build_design, select_sample
from .errors import EventStudyError, InferenceError, SampleError
from .estimator import FitResult
from .geo import EventMap
from .tables import regression_table


@dataclass(frozen=True)
class WaldTest:
    restricted_names: tuple[str, ...]
    statistic: float
    df: int
    p_value: float
    distribution: str = "chi2"

    def to_dict(self) -> dict:
        return {
            "restricted_names": list(self.restricted_names),
            "statistic": self.statistic,
            "df": self.df,
            "p_value": self.p_value,
            "distribution": self.distribution,
        }


def wald_test(fit: FitResult, names: Sequence[str]) -> WaldTest:
    """Joint chi-square test that the named coefficients are all zero."""
    names = list(names)
    if not names:
        raise InferenceError("no coefficients to test")
    missing = [n for n in names if n not in fit.names]
    if missing:
        raise InferenceError(f"coefficients not in fit: {missing}")
    b = np.array([fit.estimate(n) for n in names])
    V = fit.sub_vcov(names)
    eig = np.linalg.eigvalsh(V)
    if not eig.max() > 0 or eig.min() <= 1e-12 * eig.max():
        raise InferenceError(
            f"covariance of {names} is singular (eigenvalues {eig.min():.3g}..{eig.max():.3g}); "
            "test fewer leads or use more clusters"
        )
    stat = float(b @ np.linalg.solve(V, b))
    return WaldTest(tuple(names), stat, len(names), float(stats.chi2.sf(stat, len(names))))


BOOTSTRAP_WEIGHTS = ("rademacher", "webb")
_WEBB = np.array([-np.sqrt(1.5), -1.0, -np.sqrt(0.5), np.sqrt(0.5), 1.0, np.sqrt(1.5)])


def wild_bootstrap_wald(design, names: Sequence[str], n_boot: int = 999, seed: int = 0,
                        weights: str = "rademacher", residualized: estimator.Residualized | None = None,
                        **fit_kw) -> WaldTest:
    """Wild cluster restricted bootstrap p-value for the joint Wald test of ``names``.

    The observed statistic is the same cluster-robust b'V^-1b as
    :func:`wald_test`; its null distribution is approximated by refitting on
    y* = X b_r + w_g e_r, where b_r, e_r come from the fit with ``names``
    restricted to zero and w_g is one random sign (or Webb weight) per
    cluster. Each draw only needs per-cluster sums, so draws cost O(G k^2).
    """
    if weights not in BOOTSTRAP_WEIGHTS:
        raise ValueError(f"weights must be one of {BOOTSTRAP_WEIGHTS}")
    if n_boot < 1:
        raise ValueError("n_boot must be positive")
    names = list(names)
    r = residualized or estimator.residualize(
        design, **{k: v for k, v in fit_kw.items() if k in ("tol", "max_iter", "threads")})
    missing = [n for n in names if n not in r.names]
    if not names or missing:
        raise InferenceError(f"coefficients not in fit: {missing or names}")
    L = [r.names.index(n) for n in names]
    rest = [j for j in range(len(r.names)) if j not in L]
    X, y = r.X, r.y
    n, k = X.shape
    _, g = np.unique(design.cluster_ids, return_inverse=True)
    G = int(g.max()) + 1
    if G < 2:
        raise InferenceError("the bootstrap needs at least two clusters")
    order = np.argsort(g, kind="stable")
    bounds = np.searchsorted(g[order], np.arange(G + 1))

    with threadpool_limits(limits=1):
        bread = estimator.bread_from_r(r.ols.R)
        b_hat = r.ols.coef
        restricted = estimator.ols(y, X[:, rest]) if rest else None
        b_r = np.zeros(k)
        if restricted is not None:
            b_r[[rest[i] for i in restricted.retained]] = restricted.coef
        fitted = X @ b_r
        e_r = y - fitted
        e_u = y - X @ b_hat
        # only the tested rows of the sandwich are needed: Q = bread[L]
        Q = bread[L]
        A_sum = np.zeros(k)
        S = np.empty((G, k))
        QA = np.empty((G, len(L)))
        QS = np.empty((G, len(L)))
        QS_obs = np.empty((G, len(L)))
        QH = np.empty((G, len(L), k))
        for c in range(G):
            rows = order[bounds[c]:bounds[c + 1]]
            Xg = X[rows]
            a = Xg.T @ fitted[rows]
            A_sum += a
            S[c] = Xg.T @ e_r[rows]
            QA[c] = Q @ a
            QS[c] = Q @ S[c]
            QS_obs[c] = Q @ (Xg.T @ e_u[rows])
            QH[c] = Q @ (Xg.T @ Xg)

        def stat(bl, qscores):
            return float(bl @ np.linalg.solve(qscores.T @ qscores, bl))

        observed = stat(b_hat[L], QS_obs)
        rng = np.random.default_rng(seed)
        base = bread @ A_sum
        exceed = 0
        for _ in range(n_boot):
            w = rng.choice([-1.0, 1.0], size=G) if weights == "rademacher" else rng.choice(_WEBB, size=G)
            b_star = base + bread @ (w @ S)
            qscores = QA + w[:, None] * QS - QH @ b_star
            try:
                exceed += stat(b_star[L], qscores) >= observed
            except np.linalg.LinAlgError:
                exceed += 1
    # the CR1 factor is a common scale and cancels in the comparison; report the fit's statistic
    scale = _cr1_factor(n, k + r.fe_dof - r.intercept_in_fe, G) if fit_kw.get("adjustment", "cr1") == "cr1" else 1.0
    return WaldTest(tuple(names), observed / scale, len(names), (1 + exceed) / (n_boot + 1),
                    f"wild cluster restricted bootstrap ({weights}, B={n_boot}, seed={seed})")


def _cr1_factor(n: int, k: int, G: int) -> float:
    return (G / (G - 1.0)) * ((n - 1.0) / (n - k))


def identification_leads(fit: FitResult) -> list[str]:
    """Lead coefficients whose absence defines no pre-trends (k < -2)."""
    return [n for n in fit.names if tr.is_event_column(n) and tr.k_from_name(n) < tr.FIRST_ESTIMATED_LEAD]


def pretrend_test(fit: FitResult, lead_names: Sequence[str] | None = None) -> WaldTest:
    return wald_test(fit, identification_leads(fit) if lead_names is None else lead_names)


def coefficient_plot(fit: FitResult, names: Sequence[str] | None = None, level: float = 0.95,
                     k_max: int | None = None) -> pd.DataFrame:
    """``k, estimate, ci_low, ci_high`` rows for event-time coefficients."""
    if names is None:
        names = [n for n in fit.names if tr.is_event_column(n)]
    z = float(stats.norm.ppf(0.5 + level / 2.0))
    rows = []
    for n in names:
        k = tr.k_from_name(n)
        if k_max is not None and k > k_max:
            continue
        b, s = fit.estimate(n), fit.std_error(n)
        rows.append({"k": k, "estimate": b, "ci_low": b - z * s, "ci_high": b + z * s})
    return pd.DataFrame(rows, columns=["k", "estimate", "ci_low", "ci_high"]).sort_values("k", kind="stable")


def pretrend_plot(fit: FitResult, level: float = 0.95) -> pd.DataFrame:
    """Plot rows for every estimated lead up to k = -2."""
    names = [n for n in fit.names if tr.is_event_column(n) and tr.k_from_name(n) <= tr.FIRST_ESTIMATED_LEAD]
    return coefficient_plot(fit, names, level)


def write_plot_csv(df: pd.DataFrame, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "estimate", "ci_low", "ci_high"])
        for r in df.itertuples():
            w.writerow([int(r.k), repr(float(r.estimate)), repr(float(r.ci_low)), repr(float(r.ci_high))])


def placebo_run(panel: pd.DataFrame, eventmap: EventMap, spec: ModelSpec, **fit_kw) -> FitResult:
    """Semi-dynamic regression re-estimated on the placebo ring only."""
    spec = spec.replace(mode=tr.PLACEBO)
    panel = attach_events(panel, eventmap)
    ring = select_sample(panel, eventmap, spec.sample_name)
    treated = select_sample(panel, eventmap, "analysis")
    if set(ring["municipality_id"]) == set(treated["municipality_id"]):
        warnings.warn("placebo sample is identical to the treated sample; check the buffer radii", stacklevel=2)
    if not (ring["k"].to_numpy() >= tr.FIRST_ESTIMATED_LEAD).any():
        raise SampleError("placebo sample has no observations at or after the first estimated lead")
    return estimator.fit(build_design(ring, eventmap, spec), **fit_kw)


@dataclass
class BalanceTable:
    fits: dict[str, FitResult | None]
    errors: dict[str, str]

    def to_dict(self) -> dict:
        return {
            "fits": {c: (f.to_dict() if f is not None else None) for c, f in self.fits.items()},
            "errors": dict(self.errors),
        }

    def format(self, report_k_max: int | None = 5) -> str:
        covs = list(self.fits)
        return regression_table(
            [self.fits[c] for c in covs],
            [BALANCE_LABELS.get(c, c) for c in covs],
            report_k_max=report_k_max,
            title="OLS results: composition of participants by event time",
            errors=[self.errors.get(c) for c in covs],
        )


def balance_suite(panel: pd.DataFrame, eventmap: EventMap, spec: ModelSpec,
                  covariates: Sequence[str] = BALANCE_COVARIATES, **fit_kw) -> BalanceTable:
    """One event-dummies-plus-FE regression per covariate; failures stay local."""
    if not covariates:
        raise ValueError("covariates must be nonempty")
    panel = attach_events(panel, eventmap)
    fits: dict[str, FitResult | None] = {}
    errors: dict[str, str] = {}
    for c in covariates:
        try:
            fits[c] = estimator.fit(balance_design(panel, eventmap, spec, c), **fit_kw)
        except EventStudyError as exc:
            fits[c] = None
            errors[c] = f"{type(exc).__name__}: {exc}"
    return BalanceTable(fits, errors)


@dataclass
class DiagnosticsReport:
    pretrend: dict | None = None
    placebo: dict | None = None
    balance: dict | None = None
    singletons_dropped: int = 0
    errors: dict[str, str] = field(default_factory=dict)
    plots: dict[str, pd.DataFrame] = field(default_factory=dict, repr=False)
    tables: dict[str, str] = field(default_factory=dict, repr=False)

    @property
    def succeeded(self) -> list[str]:
        return [s for s in ("pretrend", "placebo", "balance") if getattr(self, s) is not None]

    def to_dict(self) -> dict:
        return {
            "pretrend": self.pretrend,
            "placebo": self.placebo,
            "balance": self.balance,
            "singletons_dropped": self.singletons_dropped,
            "errors": dict(self.errors),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=False) + "\n"


def run_diagnostics(panel: pd.DataFrame, eventmap: EventMap, spec: ModelSpec, level: float = 0.95,
                    singletons_dropped: int = 0, covariates: Sequence[str] = BALANCE_COVARIATES,
                    n_boot: int = 999, boot_seed: int = 0, **fit_kw) -> DiagnosticsReport:
    """Pre-trend, placebo and balance suites; one failing suite never stops the others.

    The pre-trend Wald test is reported with its chi-square p-value and, when
    ``n_boot`` > 0, a wild cluster restricted bootstrap p-value for the same
    statistic (more reliable when few cohorts identify the leads).
    """
    rep = DiagnosticsReport(singletons_dropped=singletons_dropped)
    panel = attach_events(panel, eventmap)

    try:
        pspec = spec.replace(mode=tr.PRETREND, sample=None)
        design = build_design(panel, eventmap, pspec)
        res_kw = {k: v for k, v in fit_kw.items() if k in ("tol", "max_iter", "threads")}
        r = estimator.residualize(design, **res_kw)
        fit = estimator.fit_residualized(design, r, fit_kw.get("tol", estimator.DEFAULT_TOL),
                                         **{k: v for k, v in fit_kw.items() if k not in res_kw})
        plot = pretrend_plot(fit, level)
        test = pretrend_test(fit)
        boot = None
        if n_boot > 0:
            boot = wild_bootstrap_wald(design, test.restricted_names, n_boot, boot_seed, residualized=r, **fit_kw)
        rep.pretrend = {
            "spec": pspec.to_dict(),
            "wald": test.to_dict(),
            "wald_bootstrap": boot.to_dict() if boot else None,
            "advisory": "pass" if test.p_value >= 0.05 else "reject",
            "coefficients": _plot_records(plot),
            "level": level,
        }
        rep.plots["pretrend"] = plot
    except EventStudyError as exc:
        rep.errors["pretrend"] = f"{type(exc).__name__}: {exc}"

    try:
        sspec = spec.replace(mode=tr.PLACEBO, sample=None)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            fit = placebo_run(panel, eventmap, sspec, **fit_kw)
        plot = coefficient_plot(fit, level=level, k_max=spec.report_k_max)
        rep.placebo = {
            "spec": sspec.to_dict(),
            "fit": fit.to_dict(),
            "coefficients": _plot_records(plot),
            "warnings": [str(w.message) for w in caught],
        }
        rep.plots["placebo"] = plot
        rep.tables["placebo"] = regression_table([fit], ["Placebo ring"], report_k_max=spec.report_k_max)
        try:
            ring_pre = placebo_run(panel, eventmap, sspec.replace(mode=tr.PRETREND, sample="ring"), **fit_kw)
            rep.plots["placebo_pretrend"] = pretrend_plot(ring_pre, level)
        except EventStudyError:
            pass
    except EventStudyError as exc:
        rep.errors["placebo"] = f"{type(exc).__name__}: {exc}"

    try:
        bspec = spec.replace(mode=tr.BALANCE, sample=None)
        table = balance_suite(panel, eventmap, bspec, covariates, **fit_kw)
        if all(f is None for f in table.fits.values()):
            raise EventStudyError("every balance regression failed: " + "; ".join(table.errors.values()))
        rep.balance = {"spec": bspec.to_dict(), **table.to_dict()}
        rep.tables["balance"] = table.format(spec.report_k_max)
    except EventStudyError as exc:
        rep.errors["balance"] = f"{type(exc).__name__}: {exc}"
    return rep


def _plot_records(df: pd.DataFrame) -> list[dict]:
    return [{"k": int(r.k), "estimate": float(r.estimate), "ci_low": float(r.ci_low),
             "ci_high": float(r.ci_high)} for r in df.itertuples()]


def monte_carlo(replicate: Callable[[int], float | bool], n_reps: int, base_seed: int = 0,
                workers: int = 1) -> list:
    """Run ``replicate(base_seed + i)`` for i < n_reps; order of results is by index."""
    seeds = [base_seed + i for i in range(n_reps)]
    if workers <= 1:
        return [replicate(s) for s in seeds]
    from concurrent.futures import ProcessPoolExecutor
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(replicate, seeds))
