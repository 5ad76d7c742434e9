"""Aligned-text regression tables: estimate over parenthesised standard error."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .estimator import FitResult, stars
from .treatment import is_event_column, k_from_name, tau_label


def fmt_coef(x: float) -> str:
    if not np.isfinite(x):
        return ""
    s = f"{x:.3f}"
    # keep tiny coefficients visible instead of printing 0.000
    if x != 0 and float(s) == 0.0:
        s = f"{x:.4f}"
    return s


def row_label(name: str) -> str:
    if is_event_column(name):
        return tau_label(k_from_name(name))
    if name.startswith("ev_") and name.endswith("_x_dist"):
        k = k_from_name(name)
        lab = tau_label(k)
        return f"{lab} x buffer distance" if k == 0 else f"({lab}) x buffer distance"
    return name


def treatment_rows(names: Sequence[str], report_k_max: int | None = None, with_distance: bool = True) -> list[str]:
    rows = [n for n in names if is_event_column(n)]
    if with_distance:
        rows += [n for n in names if n.startswith("ev_") and n.endswith("_x_dist")]
    if report_k_max is not None:
        rows = [n for n in rows if k_from_name(n) <= report_k_max]
    return rows


def regression_table(fits: Sequence[FitResult | None], column_labels: Sequence[str] | None = None,
                     rows: Sequence[str] | None = None, report_k_max: int | None = None,
                     title: str | None = None, fe_note: str = "Year and Municipality fixed effects?",
                     errors: Sequence[str | None] | None = None) -> str:
    """One column per fit; ``None`` fits render as empty with the error noted."""
    fits = list(fits)
    labels = list(column_labels) if column_labels else [f"({i + 1})" for i in range(len(fits))]
    if rows is None:
        order: list[str] = []
        for f in fits:
            if f is None:
                continue
            for n in treatment_rows(f.names, report_k_max):
                if n not in order:
                    order.append(n)
            if "Intercept" in f.names and "Intercept" not in order:
                order.append("Intercept")
        rows = order

    body: list[list[str]] = [["", *labels]]
    for name in rows:
        est, se = [row_label(name)], [""]
        for f in fits:
            if f is None or name not in f.names:
                est.append("")
                se.append("")
                continue
            i = f.index(name)
            est.append(fmt_coef(f.coef[i]) + stars(f.p[i]))
            se.append(f"({fmt_coef(f.se[i])})" if np.isfinite(f.se[i]) else "")
        body += [est, se]
    body.append(["-"])
    body.append([fe_note, *("Yes" if f is not None else "" for f in fits)])
    body.append(["Number of Municipalities", *(f"{f.n_clusters:,}" if f else "" for f in fits)])
    body.append(["Observations", *(f"{f.n_obs:,}" if f else "" for f in fits)])
    body.append(["Adjusted R²", *(f"{f.adj_r2:.3f}" if f else "" for f in fits)])

    ncol = len(labels) + 1
    widths = [max(len(r[i]) for r in body if len(r) == ncol) for i in range(ncol)]
    total = sum(widths) + 2 * (ncol - 1)
    lines = []
    if title:
        lines.append(title)
    lines.append("=" * total)
    for r in body:
        if r == ["-"]:
            lines.append("-" * total)
            continue
        lines.append("  ".join(c.ljust(w) if j == 0 else c.rjust(w) for j, (c, w) in enumerate(zip(r, widths)))
                     .rstrip())
    lines.append("=" * total)
    lines.append("Note: *p<0.1; **p<0.05; ***p<0.01. Standard errors clustered at municipality level.")
    for lab, err in zip(labels, errors or []):
        if err:
            lines.append(f"{lab}: {err}")
    return "\n".join(lines) + "\n"
