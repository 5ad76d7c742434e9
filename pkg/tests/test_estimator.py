import hypothesis.strategies as st
import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings

from eventstudy.design import DesignMatrix, ModelSpec
from eventstudy.errors import DegenerateModelError, InferenceError, NonConvergenceError
from eventstudy.estimator import absorb, absorbed_dof, cluster_vcov, fit, ols


def make_design(y, X, names, fe, cluster=None, intercept=False):
    n = len(y)
    fe = {f"fe{i}": np.asarray(v) for i, v in enumerate(fe)}
    cluster = np.asarray(cluster if cluster is not None else next(iter(fe.values())))
    return DesignMatrix(np.asarray(y, float), np.asarray(X, float).reshape(n, -1), list(names), fe, cluster,
                        pd.DataFrame(index=range(n)), ModelSpec(), {}, intercept)


def two_way_instance(seed, n=None, p=3):
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(60, 1000))
    g1 = rng.integers(0, max(2, n // 12), n)
    g2 = rng.integers(0, 9, n)
    X = rng.normal(size=(n, p)) + 0.5 * g1[:, None] % 3
    y = X @ rng.normal(size=p) + 0.3 * g1 - 0.2 * g2 + rng.normal(size=n)
    return y, X, g1, g2


def dummy_ols(y, X, *groups):
    # full dummy-variable regression, independent of the absorption route
    D = [X, np.ones((len(y), 1))]
    for g in groups:
        D.append((g[:, None] == np.unique(g)[None, 1:]).astype(float))
    coef = np.linalg.lstsq(np.hstack(D), y, rcond=None)[0]
    return coef[:X.shape[1]]


def test_one_dimension_single_sweep():
    r = absorb(np.array([1.0, 2, 3, 4]), np.zeros((4, 0)), [np.array(["A", "A", "B", "B"])])
    np.testing.assert_array_equal(r.y_res, [-0.5, 0.5, -0.5, 0.5])
    assert r.iterations == 1


def test_constant_within_group_absorbed():
    g = np.array([0, 0, 1, 1, 2, 2])
    r = absorb(np.arange(6.0), np.c_[[5.0, 5, 7, 7, 1, 1]], [g])
    assert np.abs(r.X_res).max() == 0.0
    d = make_design(np.arange(6.0) ** 2, np.c_[[5.0, 5, 7, 7, 1, 1], [1.0, 2, 0, 3, 1, 1]],
                    ["const_in_g", "ev_0"], [g])
    assert "const_in_g" in fit(d).dropped_columns


@pytest.mark.parametrize("seed", range(5))
def test_fwl_against_dummy_regression(seed):
    y, X, g1, g2 = two_way_instance(seed, n=200, p=5)
    res = fit(make_design(y, X, [f"ev_{i}" for i in range(5)], [g1, g2]))
    np.testing.assert_allclose(res.coef, dummy_ols(y, X, g1, g2), atol=1e-8, rtol=0)


def test_exact_fit():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(40, 4))
    b = np.array([1.5, -2.0, 0.25, 3.0])
    res = ols(X @ b, X)
    np.testing.assert_allclose(res.coef, b, atol=1e-10)


def test_duplicate_column_dropped():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(50, 2))
    X = np.c_[x, x[:, 0]]
    d = make_design(rng.normal(size=50), X, ["ev_a", "ev_b", "ev_a_copy"], [np.arange(50) % 5])
    r = fit(d)
    assert r.dropped_columns == ["ev_a_copy"]
    assert r.names == ["ev_a", "ev_b"]


def test_normal_equations_oracle():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(500, 8))
    y = X @ rng.normal(size=8) + rng.normal(size=500)
    np.testing.assert_allclose(ols(y, X).coef, np.linalg.solve(X.T @ X, X.T @ y), atol=1e-8)


def test_six_row_sandwich():
    # exact rational oracle: b = 37/19, V = 2 * 2178/130321
    x = np.array([1.0, 2, 3, -1, 0, 2])
    y = np.array([2.0, 3, 7, -2, 1, 3])
    g = np.array([0, 0, 0, 1, 1, 1])
    b = ols(y, x[:, None]).coef[0]
    assert b == pytest.approx(37 / 19, rel=1e-14)
    V = cluster_vcov(x[:, None], y - b * x, g)
    assert V[0, 0] == pytest.approx(4356 / 130321, rel=1e-12)
    # hand-expanded: (sum x^2)^-2 * sum_g (sum_i x_i e_i)^2 * G/(G-1) * (N-1)/(N-K)
    e = y - b * x
    meat = sum(sum(x[i] * e[i] for i in range(6) if g[i] == c) ** 2 for c in (0, 1))
    assert V[0, 0] == pytest.approx(meat / (x @ x) ** 2 * 2 * 5 / 5, rel=1e-12)


def test_singleton_clusters_equal_hc1():
    rng = np.random.default_rng(4)
    n, k = 80, 3
    X = rng.normal(size=(n, k))
    e = rng.normal(size=n) * (1 + np.abs(X[:, 0]))
    bread = np.linalg.inv(X.T @ X)
    hc1 = n / (n - k) * bread @ (X.T * e ** 2) @ X @ bread
    V = cluster_vcov(X, e, np.arange(n))
    np.testing.assert_allclose(V, hc1, rtol=1e-12, atol=0)


def test_single_cluster_is_inference_error():
    with pytest.raises(InferenceError):
        cluster_vcov(np.ones((5, 1)), np.arange(5.0), np.zeros(5))
    y, X, g1, g2 = two_way_instance(0, n=100)
    r = fit(make_design(y, X, ["ev_0", "ev_1", "ev_2"], [g1, g2], cluster=np.zeros(100)))
    assert r.vcov is None and r.inference_error
    assert np.isfinite(r.coef).all()


def test_scaling_y():
    y, X, g1, g2 = two_way_instance(5, n=300)
    names = ["ev_0", "ev_1", "ev_2"]
    a = fit(make_design(y, X, names, [g1, g2]))
    b = fit(make_design(2 * y, X, names, [g1, g2]))
    np.testing.assert_allclose(b.se, 2 * a.se, rtol=1e-10)
    np.testing.assert_allclose(b.t, a.t, rtol=1e-10)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(-1e3, 1e3))
def test_constant_shift_absorbed(seed, c):
    y, X, g1, g2 = two_way_instance(seed, n=150)
    names = ["ev_0", "ev_1", "ev_2"]
    a = fit(make_design(y, X, names, [g1, g2]))
    b = fit(make_design(y + c, X, names, [g1, g2]))
    np.testing.assert_allclose(a.coef, b.coef, atol=1e-8)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_vcov_symmetric_psd(seed):
    y, X, g1, g2 = two_way_instance(seed, n=200)
    V = fit(make_design(y, X, ["ev_0", "ev_1", "ev_2"], [g1, g2])).vcov
    assert np.abs(V - V.T).max() <= 1e-12
    assert np.linalg.eigvalsh(V).min() >= -1e-10


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_convergence_monotone(seed):
    y, X, g1, g2 = two_way_instance(seed, n=300)
    h = absorb(y, X, [g1, g2]).history
    assert all(b <= a for a, b in zip(h, h[1:]))


def test_non_convergence_reported():
    y, X, g1, g2 = two_way_instance(9, n=300)
    with pytest.raises(NonConvergenceError) as err:
        absorb(y, X, [g1, g2], max_iter=1, tol=1e-14)
    assert err.value.iterations == 1 and err.value.max_group_residual > 1e-14


def test_zero_treatment_columns_degenerate():
    g = np.arange(30) % 3
    X = np.c_[(g == 1).astype(float)]
    with pytest.raises(DegenerateModelError):
        fit(make_design(np.random.default_rng(0).normal(size=30), X, ["ev_0"], [g]))


def test_threads_do_not_change_results():
    y, X, g1, g2 = two_way_instance(11, n=300, p=9)
    names = [f"ev_{i}" for i in range(9)]
    a = fit(make_design(y, X, names, [g1, g2]), threads=1)
    b = fit(make_design(y, X, names, [g1, g2]), threads=8)
    assert a.to_json() == b.to_json()


def test_absorbed_dof_connected_components():
    # two disconnected blocks: (muni 0,1 x years 0,1) and (muni 2 x year 2)
    m = np.array([0, 0, 1, 1, 2])
    t = np.array([0, 1, 0, 1, 2])
    assert absorbed_dof({"m": m, "t": t}) == 3 + 3 - 2
    assert absorbed_dof({"m": m}) == 3


def test_fit_reports_dof_and_fit_stats():
    y, X, g1, g2 = two_way_instance(12, n=400)
    r = fit(make_design(y, X, ["ev_0", "ev_1", "ev_2"], [g1, g2]))
    fe = absorbed_dof({"a": g1, "b": g2})
    assert r.fe_dof == fe
    assert r.adj_r2 == pytest.approx(1 - (r.rss / (400 - 3 - fe)) / (np.var(y) * 400 / 399), rel=1e-12)
    assert r.n_clusters == len(np.unique(g1))
