"""Fixed-effect absorption, least squares and cluster-robust covariance.

Fixed effects are absorbed by alternating projections (successive group
demeaning); coefficients are then identical to those of the full
dummy-variable regression by Frisch-Waugh-Lovell. Least squares uses a
Householder QR; columns whose component orthogonal to the preceding columns
is negligible are dropped and reported, earlier columns always winning.

All BLAS/LAPACK work runs single-threaded and worker threads only split
independent columns, so results are bit-identical for any ``threads``.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse
from scipy import stats
from scipy.sparse.csgraph import connected_components
from threadpoolctl import threadpool_limits

from .errors import DegenerateModelError, InferenceError, NonConvergenceError

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 10_000
COLLINEAR_RTOL = 1e-10
# a column whose within-FE norm is below this fraction of its raw norm is
# treated as spanned by the fixed effects
ABSORBED_RTOL = 1e-7


@dataclass
class AbsorptionResult:
    y_res: np.ndarray
    X_res: np.ndarray
    iterations: int
    max_group_residual: float
    history: list[float] = field(default_factory=list)
    dropped_columns: list[str] = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "iterations": self.iterations,
            "max_group_residual": self.max_group_residual,
            "dropped_columns": list(self.dropped_columns),
        }


class _Groups:
    """Sparse group-indicator operator for one fixed-effect dimension."""

    def __init__(self, ids: np.ndarray):
        _, codes = np.unique(np.asarray(ids), return_inverse=True)
        self.codes = codes.astype(np.int64)
        self.n_groups = int(codes.max()) + 1 if len(codes) else 0
        counts = np.bincount(self.codes, minlength=self.n_groups).astype(float)
        n = len(codes)
        # rows of the transpose sum a group's members in row order
        self.avg = scipy.sparse.csr_matrix(
            (1.0 / counts[self.codes], (self.codes, np.arange(n))), shape=(self.n_groups, n)
        )

    def means(self, M: np.ndarray) -> np.ndarray:
        return np.asarray(self.avg @ M)


def _column_blocks(p: int, threads: int) -> list[slice]:
    threads = max(1, min(threads, p))
    edges = np.linspace(0, p, threads + 1).round().astype(int)
    return [slice(a, b) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def _demean_block(M: np.ndarray, groups: list[_Groups], tol: float, max_iter: int):
    # each column stops on its own criterion, so results never depend on how columns are blocked
    history = []
    col_resid = np.full(M.shape[1], np.inf)
    active = np.arange(M.shape[1])
    for it in range(1, max_iter + 1):
        A = M if len(active) == M.shape[1] else M[:, active]
        for g in groups:
            A -= g.means(A)[g.codes]
        r = np.zeros(A.shape[1])
        for g in groups:
            np.maximum(r, np.max(np.abs(g.means(A)), axis=0, initial=0.0), out=r)
        if A is not M:
            M[:, active] = A
        col_resid[active] = r
        history.append(float(col_resid.max(initial=0.0)))
        if len(groups) == 1:
            return it, history[-1], history
        active = active[r > tol]
        if len(active) == 0:
            return it, history[-1], history
    return max_iter, history[-1], history


def absorb(y, X, fe_ids: Mapping[str, np.ndarray] | Sequence[np.ndarray], tol: float = DEFAULT_TOL,
           max_iter: int = DEFAULT_MAX_ITER, threads: int = 1) -> AbsorptionResult:
    """Within-transform ``y`` and the columns of ``X`` over every FE dimension.

    Raises NonConvergenceError if some group mean still exceeds ``tol`` after
    ``max_iter`` sweeps. One dimension always converges in a single sweep.
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float).reshape(len(y), -1)
    if len(y) < 2:
        raise DegenerateModelError("need at least two observations")
    dims = list(fe_ids.values()) if isinstance(fe_ids, Mapping) else list(fe_ids)
    if not dims:
        raise ValueError("at least one fixed-effect dimension is required")
    groups = [_Groups(d) for d in dims]
    # Fortran order: every column block below is a contiguous view, demeaned in place
    M = np.empty((len(y), X.shape[1] + 1), order="F")
    M[:, 0] = y
    M[:, 1:] = X
    blocks = [M[:, b] for b in _column_blocks(M.shape[1], threads)]
    with threadpool_limits(limits=1):
        if len(blocks) == 1:
            results = [_demean_block(blocks[0], groups, tol, max_iter)]
        else:
            with ThreadPoolExecutor(max_workers=len(blocks)) as pool:
                results = list(pool.map(lambda B: _demean_block(B, groups, tol, max_iter), blocks))
    # blocks may stop at different sweeps; report the slowest
    iterations = max(r[0] for r in results)
    resid = max(r[1] for r in results)
    length = max(len(r[2]) for r in results)
    history = [max(r[2][min(i, len(r[2]) - 1)] for r in results) for i in range(length)]
    if resid > tol:
        raise NonConvergenceError(iterations, resid)
    return AbsorptionResult(M[:, 0], M[:, 1:], iterations, resid, history)


def absorbed_dof(fe_ids: Mapping[str, np.ndarray] | Sequence[np.ndarray]) -> int:
    """Parameters spent on fixed effects.

    Exact for one or two dimensions (group counts minus connected components
    of the bipartite group graph); further dimensions each add groups - 1.
    """
    dims = list(fe_ids.values()) if isinstance(fe_ids, Mapping) else list(fe_ids)
    if not dims:
        return 0
    codes = [np.unique(np.asarray(d), return_inverse=True)[1] for d in dims]
    sizes = [int(c.max()) + 1 for c in codes]
    dof = sizes[0]
    if len(dims) >= 2:
        n1, n2 = sizes[0], sizes[1]
        edges = scipy.sparse.coo_matrix(
            (np.ones(len(codes[0])), (codes[0], n1 + codes[1])), shape=(n1 + n2, n1 + n2)
        )
        n_comp, _ = connected_components(edges, directed=False)
        dof += n2 - n_comp
    for s in sizes[2:]:
        dof += s - 1
    return dof


@dataclass
class OLSResult:
    coef: np.ndarray
    retained: list[int]
    dropped: list[int]
    R: np.ndarray


def ols(y, X, rtol: float = COLLINEAR_RTOL, ref_norms=None, ref_rtol: float = 0.0) -> OLSResult:
    """Least squares via Householder QR with sequential collinearity dropping.

    Column j is dropped when the norm of its component orthogonal to the
    retained earlier columns is at most ``rtol`` times its own norm, or at
    most ``ref_rtol`` times ``ref_norms[j]`` (used for the noise floor that
    an iterative within-transformation leaves behind).
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float).reshape(len(y), -1)
    p = X.shape[1]
    with threadpool_limits(limits=1):
        norms = np.sqrt(np.einsum("ij,ij->j", X, X))
        floor = rtol * norms
        if ref_norms is not None:
            floor = np.maximum(floor, ref_rtol * np.asarray(ref_norms, dtype=float))
        retained = [j for j in range(p) if norms[j] > 0.0]
        while True:
            if not retained:
                raise DegenerateModelError("no regressors left after dropping collinear columns")
            Xk = X if len(retained) == p else X[:, retained]
            qty, R = scipy.linalg.qr_multiply(Xk, y[None, :], mode="right")
            del Xk
            diag = np.abs(np.diag(R))
            bad = [retained[i] for i in range(len(retained)) if diag[i] <= floor[retained[i]]]
            if not bad:
                break
            retained = [j for j in retained if j not in bad]
        coef = scipy.linalg.solve_triangular(R, qty[0])
    dropped = [j for j in range(p) if j not in retained]
    return OLSResult(coef, retained, dropped, R)


def bread_from_r(R: np.ndarray) -> np.ndarray:
    """(X'X)^-1 from the triangular factor of X."""
    Rinv = scipy.linalg.solve_triangular(R, np.eye(R.shape[0]))
    return Rinv @ Rinv.T


def cluster_vcov(X, residuals, cluster_ids, n_fe_dof: int = 0, adjustment: str = "cr1",
                 bread: np.ndarray | None = None) -> np.ndarray:
    """Cluster-robust sandwich (X'X)^-1 (sum_g X_g' e_g e_g' X_g) (X'X)^-1.

    ``cr1`` scales by G/(G-1) * (N-1)/(N-K) with K = columns + ``n_fe_dof``;
    ``none`` leaves the sandwich unscaled.
    """
    X = np.asarray(X, dtype=float)
    X = X.reshape(len(X), -1)
    e = np.asarray(residuals, dtype=float)
    _, codes = np.unique(np.asarray(cluster_ids), return_inverse=True)
    G = int(codes.max()) + 1 if len(codes) else 0
    if G < 2:
        raise InferenceError(f"cluster-robust covariance needs at least two clusters, got {G}")
    n, k = X.shape
    with threadpool_limits(limits=1):
        if bread is None:
            bread = np.linalg.inv(X.T @ X)
        scores = np.empty((G, k))
        for j in range(k):
            scores[:, j] = np.bincount(codes, weights=X[:, j] * e, minlength=G)
        meat = scores.T @ scores
        V = bread @ meat @ bread
    if adjustment == "cr1":
        k_total = k + n_fe_dof
        if n - k_total <= 0:
            raise InferenceError("no residual degrees of freedom")
        V = V * (G / (G - 1.0)) * ((n - 1.0) / (n - k_total))
    elif adjustment != "none":
        raise ValueError(f"unknown small-sample adjustment {adjustment!r}")
    return (V + V.T) / 2.0


def stars(p: float) -> str:
    if not np.isfinite(p):
        return ""
    return "***" if p < 0.01 else "**" if p < 0.05 else "*" if p < 0.1 else ""


@dataclass
class FitResult:
    names: list[str]
    coef: np.ndarray
    vcov: np.ndarray | None
    n_obs: int
    n_clusters: int
    r2: float
    adj_r2: float
    rss: float
    fe_dof: int
    convergence: dict
    meta: dict = field(default_factory=dict)
    inference_error: str | None = None

    @property
    def coefficients(self) -> dict[str, float]:
        return dict(zip(self.names, map(float, self.coef)))

    @property
    def se(self) -> np.ndarray:
        if self.vcov is None:
            return np.full(len(self.names), np.nan)
        return np.sqrt(np.clip(np.diag(self.vcov), 0.0, None))

    @property
    def t(self) -> np.ndarray:
        se = self.se
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(se > 0, self.coef / se, np.nan)

    @property
    def p(self) -> np.ndarray:
        t = np.abs(self.t)
        if self.meta.get("p_value") == "normal":
            return 2.0 * stats.norm.sf(t)
        return 2.0 * stats.t.sf(t, df=max(self.n_clusters - 1, 1))

    @property
    def dropped_columns(self) -> list[str]:
        return list(self.convergence.get("dropped_columns", []))

    def index(self, name: str) -> int:
        return self.names.index(name)

    def estimate(self, name: str) -> float:
        return float(self.coef[self.index(name)])

    def std_error(self, name: str) -> float:
        return float(self.se[self.index(name)])

    def sub_vcov(self, names: Sequence[str]) -> np.ndarray:
        if self.vcov is None:
            raise InferenceError(self.inference_error or "no covariance available")
        idx = [self.index(n) for n in names]
        return self.vcov[np.ix_(idx, idx)]

    def to_dict(self) -> dict:
        se, t, p = self.se, self.t, self.p
        return {
            "coefficients": {
                n: {"estimate": _num(b), "se": _num(s), "t": _num(tt), "p": _num(pp)}
                for n, b, s, tt, pp in zip(self.names, self.coef, se, t, p)
            },
            "n_obs": self.n_obs,
            "n_clusters": self.n_clusters,
            "r2": _num(self.r2),
            "adj_r2": _num(self.adj_r2),
            "fe_dof": self.fe_dof,
            "convergence": self.convergence,
            "inference_error": self.inference_error,
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False, allow_nan=False) + "\n"


def _num(x) -> float | None:
    x = float(x)
    return x if math.isfinite(x) else None


def _is_treatment(name: str) -> bool:
    return name.startswith("ev_")


@dataclass
class Residualized:
    """Within-transformed, collinearity-pruned regression pieces of a design."""

    y: np.ndarray
    X: np.ndarray
    names: list[str]
    ols: OLSResult
    absorption: AbsorptionResult
    dropped: list[str]
    fe_dof: int
    intercept_in_fe: int


def residualize(design, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER, threads: int = 1,
                rtol: float = COLLINEAR_RTOL, absorbed_rtol: float = ABSORBED_RTOL) -> Residualized:
    """absorb -> drop absorbed and collinear columns -> QR least squares."""
    y, X, names = design.y, design.X, list(design.names)
    n = len(y)
    ab = absorb(y, X, design.fe_ids, tol=tol, max_iter=max_iter, threads=threads)
    with threadpool_limits(limits=1):
        raw_norm = np.sqrt(np.einsum("ij,ij->j", X, X))
        res_norm = np.sqrt(np.einsum("ij,ij->j", ab.X_res, ab.X_res))
    absorbed = [j for j in range(len(names)) if res_norm[j] <= absorbed_rtol * raw_norm[j]]
    candidates = [j for j in range(len(names)) if j not in absorbed]
    if not candidates:
        raise DegenerateModelError("every regressor is absorbed by the fixed effects or empty")

    Xr = ab.X_res if len(candidates) == len(names) else ab.X_res[:, candidates]
    yr = ab.y_res
    ref = raw_norm[candidates]
    if design.report_intercept:
        Xr = np.column_stack([Xr + X[:, candidates].mean(axis=0), np.ones(n)])
        yr = yr + y.mean()
        ref = np.append(ref, np.sqrt(n))
    # combinations collinear only up to the absorption tolerance are dropped like absorbed columns
    res = ols(yr, Xr, rtol=rtol, ref_norms=ref, ref_rtol=absorbed_rtol)
    col_names = [names[j] for j in candidates] + (["Intercept"] if design.report_intercept else [])
    kept = [col_names[i] for i in res.retained]
    dropped = [names[j] for j in absorbed] + [col_names[i] for i in res.dropped]
    if not any(_is_treatment(c) for c in kept) and any(_is_treatment(c) for c in names):
        raise DegenerateModelError("no treatment columns remain after dropping collinear columns")
    Xk = Xr if len(res.retained) == Xr.shape[1] else Xr[:, res.retained]
    # with an explicit intercept column, one FE level is already counted in it
    intercept_in_fe = 1 if design.report_intercept and "Intercept" in kept else 0
    return Residualized(yr, Xk, kept, res, replace(ab, dropped_columns=dropped), dropped,
                        absorbed_dof(design.fe_ids), intercept_in_fe)


def fit(design, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER, threads: int = 1,
        adjustment: str = "cr1", rtol: float = COLLINEAR_RTOL, absorbed_rtol: float = ABSORBED_RTOL,
        p_value: str = "t") -> FitResult:
    """absorb -> ols -> cluster_vcov on a DesignMatrix.

    A single cluster does not stop estimation: the result carries point
    estimates with ``vcov=None`` and the reason in ``inference_error``.
    """
    r = residualize(design, tol, max_iter, threads, rtol, absorbed_rtol)
    return fit_residualized(design, r, tol, adjustment, p_value)


def fit_residualized(design, r: Residualized, tol: float = DEFAULT_TOL, adjustment: str = "cr1",
                     p_value: str = "t") -> FitResult:
    y = design.y
    n = len(y)
    with threadpool_limits(limits=1):
        resid = r.y - r.X @ r.ols.coef
        rss = float(resid @ resid)
        yc = y - y.mean()
        tss = float(yc @ yc)
    if not tss > 0.0:
        raise DegenerateModelError("the outcome has no variation in this sample")
    k_slopes = len(r.names) - r.intercept_in_fe
    n_params = k_slopes + r.fe_dof
    r2 = 1.0 - rss / tss
    adj_r2 = 1.0 - (rss / (n - n_params)) / (tss / (n - 1)) if n > n_params else float("nan")

    _, ccodes = np.unique(design.cluster_ids, return_inverse=True)
    n_clusters = int(ccodes.max()) + 1
    vcov, err = None, None
    try:
        vcov = cluster_vcov(r.X, resid, ccodes, n_fe_dof=r.fe_dof - r.intercept_in_fe,
                            adjustment=adjustment, bread=bread_from_r(r.ols.R))
    except InferenceError as exc:
        err = str(exc)

    meta = {
        "spec": design.spec.to_dict(),
        "small_sample": adjustment,
        "p_value": "normal" if p_value == "normal" else "t(G-1)",
        "tol": tol,
        **{k: v for k, v in design.meta.items()},
    }
    return FitResult(r.names, r.ols.coef, vcov, n, n_clusters, r2, adj_r2, rss, r.fe_dof,
                     r.absorption.summary(), meta, err)
