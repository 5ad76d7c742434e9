"""Student-level exam records: ingestion, validation, filtering, standardization.

The analysis outcome is the mean of the four multiple-choice area grades,
z-scored within each exam year using the population (divide-by-n) standard
deviation. Essay grades are only used to filter out zero-essay records.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable

import numpy as np
import pandas as pd

from .errors import DataValidationError, DegenerateScaleError

AREA_GRADES = ["grade_nat", "grade_hum", "grade_lang", "grade_math"]
CATEGORICALS = ["sex", "race", "family_income", "father_hs", "mother_hs", "marital_status"]
NUMERIC_CONTROLS = ["age"]
STUDENT_COLUMNS = [
    "student_id", "municipality_id", "state_id", "year",
    *AREA_GRADES, "essay_grade", "present_day1", "present_day2",
    "sex", "race", "age", "family_income", "father_hs", "mother_hs", "marital_status",
]
MISSING = "missing"
DEFAULT_EXCLUDED_YEARS = (2011, 2012)

_FLOAT_COLUMNS = [*AREA_GRADES, "essay_grade", "age"]


@dataclass
class Codebook:
    """Categorical codes per column plus the reference (omitted) level.

    ``levels`` maps column -> {code: label}. Empty cells are coded as the
    explicit ``missing`` level, never dropped.
    """

    levels: dict[str, dict[str, str]]
    reference: dict[str, str]

    def categories(self, column: str) -> list[str]:
        return [*self.levels[column], MISSING]

    @classmethod
    def from_dict(cls, d: dict) -> "Codebook":
        try:
            cols = d["columns"]
            levels = {c: {str(k): str(v) for k, v in spec["levels"].items()} for c, spec in cols.items()}
            reference = {c: str(spec["reference"]) for c, spec in cols.items()}
        except (KeyError, TypeError, AttributeError) as exc:
            raise DataValidationError(f"malformed codebook: {exc}") from exc
        missing = [c for c in CATEGORICALS if c not in levels]
        if missing:
            raise DataValidationError(f"codebook lacks columns {missing}")
        for c, ref in reference.items():
            if ref not in levels[c] and ref != MISSING:
                raise DataValidationError(f"codebook reference {ref!r} is not a level of {c}")
        return cls(levels, reference)

    @classmethod
    def load(cls, path=None) -> "Codebook":
        if path is None:
            text = resources.files("eventstudy").joinpath("codebook.json").read_text(encoding="utf-8")
        else:
            try:
                text = Path(path).read_text(encoding="utf-8")
            except OSError as exc:
                raise DataValidationError(f"cannot read codebook {path}: {exc}") from exc
        return cls.from_dict(json.loads(text))

    def to_dict(self) -> dict:
        return {"columns": {c: {"levels": self.levels[c], "reference": self.reference[c]} for c in self.levels}}


@dataclass
class IngestReport:
    rows_read: int = 0
    rows_kept: int = 0
    dropped: dict[str, int] = field(default_factory=dict)
    singletons_dropped: int = 0
    standardization: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "rows_read": self.rows_read,
            "rows_kept": self.rows_kept,
            "dropped": dict(sorted(self.dropped.items())),
            "singletons_dropped": self.singletons_dropped,
            "standardization": self.standardization,
        }


def coerce_records(df: pd.DataFrame, codebook: Codebook, year_range: tuple[int, int] | None = None,
                   source: str = "records") -> pd.DataFrame:
    """Validate a raw string/NaN frame against the schema and return typed columns.

    Empty strings and NaN are treated as missing. Raises DataValidationError
    naming the first offending rows.
    """
    if list(df.columns) != STUDENT_COLUMNS:
        raise DataValidationError(f"{source}: expected header {','.join(STUDENT_COLUMNS)}")
    out = pd.DataFrame(index=df.index)
    for c in ("student_id", "municipality_id", "state_id"):
        col = df[c].astype("string")
        bad = col.isna() | (col == "")
        if bad.any():
            raise DataValidationError(f"{source}: empty {c} at rows {_rows(bad)}")
        out[c] = col.astype(str).to_numpy()

    year = pd.to_numeric(df["year"], errors="coerce")
    bad = year.isna() | (year != np.round(year))
    if bad.any():
        raise DataValidationError(f"{source}: non-integer year at rows {_rows(bad)}")
    year = year.astype("int64")
    if year_range is not None:
        bad = (year < year_range[0]) | (year > year_range[1])
        if bad.any():
            raise DataValidationError(f"{source}: year outside {year_range} at rows {_rows(bad)}")
    out["year"] = year.to_numpy()

    for c in _FLOAT_COLUMNS:
        raw = df[c].replace("", np.nan)
        val = pd.to_numeric(raw, errors="coerce")
        bad = val.isna() & raw.notna()
        if bad.any():
            raise DataValidationError(f"{source}: non-numeric {c} at rows {_rows(bad)}")
        neg = val < 0
        if neg.any():
            raise DataValidationError(f"{source}: negative {c} at rows {_rows(neg)}")
        out[c] = val.astype("float64").to_numpy()

    for c in ("present_day1", "present_day2"):
        raw = df[c].replace("", np.nan).astype("string")
        bad = raw.notna() & ~raw.isin(["0", "1"])
        if bad.any():
            raise DataValidationError(f"{source}: {c} must be 0/1 at rows {_rows(bad)}")
        # missing presence counts as absent
        out[c] = (raw == "1").fillna(False).to_numpy(dtype=bool)

    for c in CATEGORICALS:
        raw = df[c].astype("string").fillna("").replace("", MISSING)
        cats = codebook.categories(c)
        bad = ~raw.isin(cats)
        if bad.any():
            vals = sorted(set(raw[bad].tolist()))[:5]
            raise DataValidationError(f"{source}: unknown {c} codes {vals} at rows {_rows(bad)}")
        out[c] = pd.Categorical(raw.to_numpy(dtype=object), categories=cats)
    return out[STUDENT_COLUMNS]


def _rows(mask: pd.Series, limit: int = 5) -> list:
    return [int(i) for i in np.flatnonzero(np.asarray(mask))[:limit]]


def read_students(path, codebook: Codebook, year_range: tuple[int, int] | None = None,
                  chunksize: int = 250_000) -> tuple[pd.DataFrame, IngestReport]:
    """Stream ``students.csv`` in chunks, validating each as it arrives."""
    path = Path(path)
    report = IngestReport()
    parts = []
    try:
        reader = pd.read_csv(path, dtype=str, keep_default_na=False, chunksize=chunksize, encoding="utf-8")
        offset = 0
        for chunk in reader:
            chunk.index = pd.RangeIndex(offset, offset + len(chunk))
            parts.append(coerce_records(chunk, codebook, year_range, source=str(path)))
            offset += len(chunk)
    except (OSError, UnicodeDecodeError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DataValidationError(f"cannot read {path}: {exc}") from exc
    if not parts:
        raise DataValidationError(f"{path}: no records")
    df = pd.concat(parts, ignore_index=True)
    for c in CATEGORICALS:
        df[c] = pd.Categorical(df[c], categories=codebook.categories(c))
    report.rows_read = len(df)
    return df, report


def write_students(df: pd.DataFrame, path, extra: Iterable[str] = ()) -> None:
    cols = [*STUDENT_COLUMNS, *extra]
    out = df[cols].copy()
    for c in ("present_day1", "present_day2"):
        out[c] = out[c].astype("int8")
    for c in CATEGORICALS:
        out[c] = out[c].astype(str).replace(MISSING, "")
    out.to_csv(path, index=False, lineterminator="\n", float_format="%.17g", na_rep="")


def filter_records(df: pd.DataFrame, excluded_years: Iterable[int] = DEFAULT_EXCLUDED_YEARS,
                   report: IngestReport | None = None) -> pd.DataFrame:
    """Drop absentees, zero essays, records with missing area grades and excluded years.

    Reasons are counted in ``report`` in a fixed precedence order so every
    dropped row is attributed to exactly one reason.
    """
    reasons = [
        ("excluded_year", df["year"].isin(list(excluded_years)).to_numpy()),
        ("absent", ~(df["present_day1"].to_numpy(bool) & df["present_day2"].to_numpy(bool))),
        ("zero_essay", ~(df["essay_grade"].to_numpy() > 0)),
        ("missing_grade", df[AREA_GRADES].isna().any(axis=1).to_numpy()),
    ]
    drop = np.zeros(len(df), dtype=bool)
    for name, mask in reasons:
        if report is not None:
            report.dropped[name] = report.dropped.get(name, 0) + int((mask & ~drop).sum())
        drop |= mask
    out = df.loc[~drop].reset_index(drop=True)
    if report is not None:
        report.rows_kept = len(out)
    return out


def zscore_by_group(values: np.ndarray, groups: np.ndarray) -> np.ndarray:
    """Within-group z-scores with population SD; raises on a degenerate group."""
    values = np.asarray(values, dtype=float)
    keys, codes = np.unique(np.asarray(groups), return_inverse=True)
    n = np.bincount(codes, minlength=len(keys)).astype(float)
    for k, cnt in zip(keys, n):
        if cnt < 2:
            raise DegenerateScaleError(k)
    mean = np.bincount(codes, weights=values, minlength=len(keys)) / n
    dev = values - mean[codes]
    sd = np.sqrt(np.bincount(codes, weights=dev * dev, minlength=len(keys)) / n)
    scale = np.maximum(np.abs(mean), 1.0)
    for k, s, sc in zip(keys, sd, scale):
        if not s > 1e-12 * sc:
            raise DegenerateScaleError(k)
    return dev / sd[codes]


def standardize(df: pd.DataFrame, scope: str = "year", report: IngestReport | None = None) -> pd.DataFrame:
    """Add ``outcome``: mean area grade z-scored per exam year (or pooled)."""
    raw = df[AREA_GRADES].to_numpy(dtype=float).mean(axis=1)
    if scope == "year":
        groups = df["year"].to_numpy()
    elif scope == "pooled":
        groups = np.zeros(len(df), dtype=int)
    else:
        raise ValueError(f"unknown standardization scope {scope!r}")
    out = df.copy()
    out["outcome"] = zscore_by_group(raw, groups)
    if report is not None:
        report.standardization = {"scope": scope, "sd_convention": "population", "source": "mean of area grades"}
    return out


def leave_one_out_mean(group_outcomes, target_index: int) -> float:
    """Mean of a group's outcomes excluding one member."""
    g = np.asarray(group_outcomes, dtype=float)
    if len(g) < 2:
        raise ValueError("leave-one-out mean undefined for a singleton group")
    return float((g.sum() - g[target_index]) / (len(g) - 1))


def add_peer_means(df: pd.DataFrame, report: IngestReport | None = None) -> pd.DataFrame:
    """Add ``muni_year_mean`` and leave-one-out ``peer_mean``; drop singleton cells."""
    keys = df["municipality_id"].astype(str) + "\x1f" + df["year"].astype(str)
    _, codes = np.unique(keys.to_numpy(), return_inverse=True)
    n = np.bincount(codes)
    y = df["outcome"].to_numpy(dtype=float)
    total = np.bincount(codes, weights=y)
    size = n[codes]
    keep = size >= 2
    out = df.loc[keep].copy()
    if report is not None:
        report.singletons_dropped += int((~keep).sum())
    s = total[codes][keep]
    k = size[keep].astype(float)
    yk = y[keep]
    out["muni_year_mean"] = s / k
    out["peer_mean"] = (s - yk) / (k - 1.0)
    return out.reset_index(drop=True)


def prepare_panel(df: pd.DataFrame, excluded_years=DEFAULT_EXCLUDED_YEARS, scope: str = "year",
                  report: IngestReport | None = None) -> pd.DataFrame:
    """filter -> standardize -> peer means."""
    report = report if report is not None else IngestReport(rows_read=len(df))
    out = filter_records(df, excluded_years, report)
    out = standardize(out, scope, report)
    return add_peer_means(out, report)
