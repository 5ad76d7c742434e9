"""Relative event time and event-time indicator systems."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import pandas as pd

from .errors import ConfigError

PRETREND = "pretrend"
SEMIDYNAMIC = "semidynamic"
PLACEBO = "placebo"
BALANCE = "balance"
MODES = (PRETREND, SEMIDYNAMIC, PLACEBO, BALANCE)

# first lead carrying an anticipation effect; everything earlier is baseline in
# the semi-dynamic design
FIRST_ESTIMATED_LEAD = -2
DEFAULT_WINDOW = (-9, 9)
DEFAULT_PRETREND_OMITTED = (-9, -3)


def relative_time(year, opening_year):
    """Observation year minus opening year. Works on scalars and arrays."""
    if np.ndim(year) == 0 and np.ndim(opening_year) == 0:
        return int(year) - int(opening_year)
    return np.asarray(year, dtype=np.int64) - np.asarray(opening_year, dtype=np.int64)


def column_name(k: int) -> str:
    if k < 0:
        return f"ev_m{-k}"
    if k == 0:
        return "ev_0"
    return f"ev_p{k}"


def k_from_name(name: str) -> int:
    body = name.split("_x_")[0]
    if body == "ev_0":
        return 0
    if body.startswith("ev_m"):
        return -int(body[4:])
    if body.startswith("ev_p"):
        return int(body[4:])
    raise ValueError(f"not an event-time column: {name}")


def is_event_column(name: str) -> bool:
    return name.startswith("ev_") and "_x_" not in name


def tau_label(k: int) -> str:
    if k == 0:
        return "τ"
    return f"τ−{-k}" if k < 0 else f"τ+{k}"


@dataclass(frozen=True)
class DummySystem:
    window: tuple[int, int]
    included: tuple[int, ...]
    omitted: tuple[int, ...]
    matrix: np.ndarray
    binned: bool = False

    @property
    def names(self) -> list[str]:
        return [column_name(k) for k in self.included]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.matrix, columns=self.names)


def dummy_layout(mode: str, window: tuple[int, int] = DEFAULT_WINDOW,
                 omitted: Sequence[int] | None = None) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Included and omitted relative times for a mode and window."""
    k_min, k_max = window
    if k_min > k_max:
        raise ConfigError(f"empty event window {window}")
    ks = range(k_min, k_max + 1)
    if mode == PRETREND:
        omitted = tuple(sorted(DEFAULT_PRETREND_OMITTED if omitted is None else omitted))
        if len(omitted) < 2:
            raise ConfigError("the pre-trend design needs at least two omitted leads to be identified")
        if any(k not in ks for k in omitted):
            raise ConfigError(f"omitted categories {omitted} outside window {window}")
        included = tuple(k for k in ks if k not in omitted)
    elif mode in (SEMIDYNAMIC, PLACEBO, BALANCE):
        if k_max < FIRST_ESTIMATED_LEAD:
            raise ConfigError(f"window {window} leaves no estimated event times")
        omitted = tuple(k for k in ks if k < FIRST_ESTIMATED_LEAD)
        included = tuple(k for k in ks if k >= FIRST_ESTIMATED_LEAD)
    else:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    return included, omitted


def build_dummies(k, mode: str, window: tuple[int, int] = DEFAULT_WINDOW,
                  omitted: Sequence[int] | None = None, bin_endpoints: bool = False) -> DummySystem:
    """Event-time indicators for relative times ``k``.

    Rows at an omitted or baseline time get all-zero indicators. Relative
    times beyond the window raise ConfigError unless they are baseline (early
    leads in the semi-dynamic design) or ``bin_endpoints`` pools them into the
    nearest endpoint.
    """
    k = np.asarray(k, dtype=np.int64)
    included, omitted_ks = dummy_layout(mode, window, omitted)
    k_min, k_max = window
    if bin_endpoints:
        k = np.clip(k, k_min, k_max)
    pretrend = mode == PRETREND
    outside = (k > k_max) | ((k < k_min) if pretrend else np.zeros(len(k), dtype=bool))
    if outside.any():
        bad = sorted(set(k[outside].tolist()))
        raise ConfigError(f"relative times {bad} fall outside the event window {window}")
    matrix = np.zeros((len(k), len(included)), dtype=np.float64)
    pos = {kk: j for j, kk in enumerate(included)}
    col = np.array([pos.get(int(v), -1) for v in range(k_min, k_max + 1)])
    inside = (k >= k_min) & (k <= k_max)
    j = np.full(len(k), -1)
    j[inside] = col[k[inside] - k_min]
    hit = j >= 0
    matrix[np.flatnonzero(hit), j[hit]] = 1.0
    return DummySystem((k_min, k_max), included, omitted_ks, matrix, bin_endpoints)


def treatment_distribution(k, groups: dict[str, np.ndarray] | None = None,
                           ks: Sequence[int] | None = None) -> pd.DataFrame:
    """Counts and shares of observations per relative time, per group.

    ``groups`` maps a group name to a boolean row mask; default is one group
    covering every row. Relative times absent from a group show count 0.
    """
    k = np.asarray(k, dtype=np.int64)
    if groups is None:
        groups = {"all": np.ones(len(k), dtype=bool)}
    if ks is None:
        ks = range(int(k.min()), int(k.max()) + 1) if len(k) else []
    rows = []
    for name, mask in groups.items():
        sub = k[np.asarray(mask, dtype=bool)]
        total = len(sub)
        for kk in ks:
            c = int((sub == kk).sum())
            rows.append({"group": name, "k": int(kk), "count": c, "share": c / total if total else 0.0})
    return pd.DataFrame(rows, columns=["group", "k", "count", "share"])


def format_distribution(dist: pd.DataFrame) -> str:
    """Aligned text in the layout ``τ−9 | 1,263 | (0.3%) | ...`` one row per k."""
    groups = list(dict.fromkeys(dist["group"]))
    ks = sorted(set(dist["k"]))
    cells = {(r.group, r.k): (r.count, r.share) for r in dist.itertuples()}
    lines = [[""] + [part for g in groups for part in (g, "")]]
    for kk in ks:
        row = [tau_label(kk)]
        for g in groups:
            c, s = cells.get((g, kk), (0, 0.0))
            row += [f"{c:,}", f"({100 * s:.1f}%)"]
        lines.append(row)
    widths = [max(len(r[i]) for r in lines) for i in range(len(lines[0]))]
    out = []
    for r in lines:
        out.append(" | ".join(cell.rjust(w) if i else cell.ljust(w) for i, (cell, w) in enumerate(zip(r, widths))))
    return "\n".join(s.rstrip() for s in out) + "\n"
