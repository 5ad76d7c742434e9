import math
import warnings

import hypothesis.strategies as st
import numpy as np
import pytest
from hypothesis import given, settings

from eventstudy import estimator
from eventstudy.design import BALANCE_LABELS, ModelSpec, attach_events, build_design, select_sample
from eventstudy.errors import InferenceError, SampleError
from eventstudy.estimator import FitResult
from eventstudy.inference import (
    balance_suite, coefficient_plot, identification_leads, monte_carlo, placebo_run, pretrend_plot,
    pretrend_test, run_diagnostics, wald_test, wild_bootstrap_wald, write_plot_csv,
)

LEAN = dict(controls=("sex", "age"), distance_interacted_controls=(), include_mean_trend=False, state_trends=False)


def manual_fit(coefs: dict, se: dict | None = None, vcov=None) -> FitResult:
    names = list(coefs)
    V = np.diag([se[n] ** 2 for n in names]) if vcov is None else np.asarray(vcov)
    return FitResult(names, np.array([coefs[n] for n in names]), V, 1000, 113, 0.4, 0.4, 1.0, 0, {},
                     {"p_value": "normal"})


def test_zero_leads():
    f = manual_fit({"ev_m5": 0.0, "ev_m4": 0.0}, {"ev_m5": 0.1, "ev_m4": 0.2})
    w = wald_test(f, ["ev_m5", "ev_m4"])
    assert (w.statistic, w.p_value, w.df) == (0.0, 1.0, 2)


def test_single_lead_at_1_96():
    f = manual_fit({"ev_m4": 1.96 * 0.05}, {"ev_m4": 0.05})
    w = wald_test(f, ["ev_m4"])
    assert w.statistic == pytest.approx(3.8416, rel=1e-12)
    # chi-square(1) upper tail equals the two-sided normal tail
    assert w.p_value == pytest.approx(math.erfc(1.96 / math.sqrt(2)), abs=1e-12)
    assert w.p_value == pytest.approx(0.05, abs=5e-4)


def test_singular_subvcov_rejected():
    f = manual_fit({"ev_m5": 0.1, "ev_m4": 0.2}, vcov=[[1.0, 1.0], [1.0, 1.0]])
    with pytest.raises(InferenceError, match="singular"):
        wald_test(f, ["ev_m5", "ev_m4"])
    with pytest.raises(InferenceError):
        wald_test(f, [])
    with pytest.raises(InferenceError):
        wald_test(f, ["ev_p3"])


@settings(max_examples=40)
@given(st.permutations(["ev_m8", "ev_m7", "ev_m6", "ev_m5", "ev_m4"]), st.integers(0, 2**31))
def test_wald_reorder_invariant(order, seed):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(5, 5))
    names = ["ev_m8", "ev_m7", "ev_m6", "ev_m5", "ev_m4"]
    f = manual_fit(dict(zip(names, rng.normal(size=5))), vcov=A @ A.T + 0.1 * np.eye(5))
    assert wald_test(f, order).statistic == pytest.approx(wald_test(f, names).statistic, abs=1e-10)


@pytest.fixture(scope="module")
def pretrend_fits(small_panel, small_sim):
    spec = ModelSpec(mode="pretrend", **LEAN)
    d = build_design(small_panel, small_sim.eventmap, spec)
    a = estimator.fit(d)
    d.y = d.y * 3.7
    b = estimator.fit(d)
    return a, b


def test_wald_scale_invariant(pretrend_fits):
    a, b = pretrend_fits
    assert identification_leads(a) == ["ev_m8", "ev_m7", "ev_m6", "ev_m5", "ev_m4"]
    assert pretrend_test(b).statistic == pytest.approx(pretrend_test(a).statistic, abs=1e-9)


@pytest.fixture(scope="module")
def pretrend_design(small_panel, small_sim):
    return build_design(small_panel, small_sim.eventmap, ModelSpec(mode="pretrend", **LEAN))


def brute_force_wcr(design, leads, n_boot, seed):
    """Refit every bootstrap sample with lstsq and an explicit cluster loop."""
    r = estimator.residualize(design)
    X, y = r.X, r.y
    L = [r.names.index(n) for n in leads]
    rest = [j for j in range(X.shape[1]) if j not in L]
    ids, g = np.unique(design.cluster_ids, return_inverse=True)
    XtX_inv = np.linalg.inv(X.T @ X)

    def wald(yy):
        b = np.linalg.lstsq(X, yy, rcond=None)[0]
        e = yy - X @ b
        meat = np.zeros((X.shape[1], X.shape[1]))
        for c in range(len(ids)):
            s = X[g == c].T @ e[g == c]
            meat += np.outer(s, s)
        V = XtX_inv @ meat @ XtX_inv
        return b[L] @ np.linalg.solve(V[np.ix_(L, L)], b[L])

    br = np.linalg.lstsq(X[:, rest], y, rcond=None)[0]
    fitted = X[:, rest] @ br
    er = y - fitted
    W = wald(y)
    rng = np.random.default_rng(seed)
    hits = sum(wald(fitted + rng.choice([-1.0, 1.0], size=len(ids))[g] * er) >= W for _ in range(n_boot))
    return W, (1 + hits) / (n_boot + 1)


def test_wild_bootstrap_matches_brute_force(pretrend_design, pretrend_fits):
    leads = identification_leads(pretrend_fits[0])
    boot = wild_bootstrap_wald(pretrend_design, leads, n_boot=59, seed=3)
    W, p = brute_force_wcr(pretrend_design, leads, 59, 3)
    assert boot.p_value == pytest.approx(p, abs=1e-12)
    # reported statistic is the cluster-robust chi-square statistic of the fit
    assert boot.statistic == pytest.approx(pretrend_test(pretrend_fits[0]).statistic, rel=1e-8)
    n, k, G = pretrend_fits[0].n_obs, len(pretrend_fits[0].names), pretrend_fits[0].n_clusters
    c = G / (G - 1) * (n - 1) / (n - k - pretrend_fits[0].fe_dof)
    assert boot.statistic == pytest.approx(W / c, rel=1e-8)


def test_wild_bootstrap_seeded(pretrend_design, pretrend_fits):
    leads = identification_leads(pretrend_fits[0])
    a = wild_bootstrap_wald(pretrend_design, leads, n_boot=99, seed=11)
    b = wild_bootstrap_wald(pretrend_design, leads, n_boot=99, seed=11, threads=4)
    assert a == b
    assert 1 / 100 <= a.p_value <= 1
    w = wild_bootstrap_wald(pretrend_design, leads, n_boot=99, seed=11, weights="webb")
    assert w.statistic == pytest.approx(a.statistic, rel=1e-12) and "webb" in w.distribution
    with pytest.raises(ValueError):
        wild_bootstrap_wald(pretrend_design, leads, weights="normal")
    with pytest.raises(InferenceError):
        wild_bootstrap_wald(pretrend_design, ["ev_p99"])


def test_pretrend_plot_rows(pretrend_fits, tmp_path):
    plot = pretrend_plot(pretrend_fits[0])
    assert list(plot["k"]) == [-8, -7, -6, -5, -4, -2]
    write_plot_csv(plot, tmp_path / "p.csv")
    assert (tmp_path / "p.csv").read_text().splitlines()[0] == "k,estimate,ci_low,ci_high"


def test_plot_from_reported_coefficients(tmp_path):
    est = {"ev_0": 0.031, "ev_p1": 0.034, "ev_p2": 0.036, "ev_p3": 0.040, "ev_p4": 0.041, "ev_p5": 0.046}
    se = {"ev_0": 0.011, "ev_p1": 0.011, "ev_p2": 0.012, "ev_p3": 0.014, "ev_p4": 0.017, "ev_p5": 0.021}
    plot = coefficient_plot(manual_fit(est, se))
    assert list(plot["k"]) == [0, 1, 2, 3, 4, 5]
    z = 1.959963984540054
    np.testing.assert_allclose(plot["estimate"], list(est.values()))
    np.testing.assert_allclose(plot["ci_low"], [est[n] - z * se[n] for n in est], atol=1e-15)
    np.testing.assert_allclose(plot["ci_high"], [est[n] + z * se[n] for n in est], atol=1e-15)
    assert (plot["ci_low"] > 0).all()
    assert list(coefficient_plot(manual_fit(est, se), k_max=3)["k"]) == [0, 1, 2, 3]


def test_placebo_guards(small_panel, small_sim):
    em = small_sim.eventmap
    with pytest.warns(UserWarning, match="identical"):
        placebo_run(small_panel, em, ModelSpec(sample="analysis", **LEAN))
    panel = select_sample(attach_events(small_panel, em), em, "analysis")
    with pytest.raises(SampleError):
        placebo_run(panel, em, ModelSpec(**LEAN))
    early = attach_events(small_panel, em)
    early = early[early["k"] < -2]
    with pytest.raises(SampleError):
        placebo_run(early, em, ModelSpec(**LEAN))


def test_placebo_runs_on_ring(small_panel, small_sim):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        f = placebo_run(small_panel, small_sim.eventmap, ModelSpec(**LEAN))
    assert f.meta["sample"] == "ring"
    assert f.n_clusters == small_sim.config.n_ring


def test_balance_table_shape(small_panel, small_sim):
    t = balance_suite(small_panel, small_sim.eventmap, ModelSpec())
    assert not t.errors
    text = t.format(report_k_max=5)
    header = text.splitlines()[2]
    for label in BALANCE_LABELS.values():
        assert label in header
    rows = [ln.split()[0] for ln in text.splitlines()[3:] if ln.startswith(("τ", "Intercept"))]
    assert rows == ["τ−2", "τ−1", "τ", "τ+1", "τ+2", "τ+3", "τ+4", "τ+5", "Intercept"]


def test_balance_constant_covariate_local_failure(small_panel, small_sim):
    panel = small_panel.copy()
    panel["sex"] = panel["sex"].cat.set_categories(panel["sex"].cat.categories)
    panel.loc[:, "sex"] = "M"
    t = balance_suite(panel, small_sim.eventmap, ModelSpec(), ["male", "age"])
    assert t.fits["male"] is None and "DegenerateModelError" in t.errors["male"]
    assert t.fits["age"] is not None


def test_diagnostics_without_ring(small_panel, small_sim):
    em = small_sim.eventmap
    panel = select_sample(attach_events(small_panel, em), em, "analysis")
    rep = run_diagnostics(panel, em, ModelSpec(**LEAN), covariates=["male"])
    assert "placebo" in rep.errors and rep.placebo is None
    assert rep.pretrend is not None and rep.balance is not None
    assert rep.pretrend["spec"]["mode"] == "pretrend"
    boot = rep.pretrend["wald_bootstrap"]
    assert boot["statistic"] == pytest.approx(rep.pretrend["wald"]["statistic"], rel=1e-8)
    assert boot["restricted_names"] == rep.pretrend["wald"]["restricted_names"]


def test_monte_carlo_order():
    assert monte_carlo(lambda s: s * 2, 4, base_seed=10) == [20, 22, 24, 26]
