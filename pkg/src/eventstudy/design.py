"""Regressor assembly for the event-study models.

Column order is fixed: event dummies, dummies x distance, controls,
controls x distance, peer mean, mean x trend, state x trend. The intercept
is never materialised; fixed effects absorb it.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from . import treatment as tr
from .errors import DataValidationError, SampleError, SpecError
from .geo import EventMap
from .panel import CATEGORICALS, MISSING, Codebook

KEY_COLUMNS = ("municipality_id", "state_id", "year", "student_id")
DEFAULT_CONTROLS = ("sex", "race", "age", "family_income", "father_hs", "mother_hs", "marital_status")
# no source enumerates the distance-interacted subset; these defaults are arbitrary
DEFAULT_DISTANCE_CONTROLS = ("family_income", "father_hs", "mother_hs")

BALANCE_COVARIATES = ("male", "white", "age", "father_hs", "mother_hs", "income_gt6")
BALANCE_LABELS = {
    "male": "Male",
    "white": "White",
    "age": "Age",
    "father_hs": "Father completed high school",
    "mother_hs": "Mother completed high school",
    "income_gt6": "Family Income > 6 minimum wages",
}


@dataclass
class ModelSpec:
    mode: str = tr.SEMIDYNAMIC
    window: tuple[int, int] = tr.DEFAULT_WINDOW
    omitted: tuple[int, ...] | None = None
    bin_endpoints: bool = False
    report_k_max: int | None = None
    controls: tuple[str, ...] = DEFAULT_CONTROLS
    distance_interacted_controls: tuple[str, ...] = DEFAULT_DISTANCE_CONTROLS
    distance_interactions: bool = True
    include_peer_mean: bool = True
    include_mean_trend: bool = True
    mean_trend_source: str = "full"
    state_trends: bool = True
    cluster_by: str = "municipality_id"
    fe: tuple[str, ...] = ("municipality_id", "year")
    sample: str | None = None

    def __post_init__(self):
        self.window = tuple(int(k) for k in self.window)
        if self.omitted is not None:
            self.omitted = tuple(int(k) for k in self.omitted)
        self.controls = tuple(self.controls)
        self.distance_interacted_controls = tuple(self.distance_interacted_controls)
        self.fe = tuple(self.fe)
        self.validate()

    def validate(self) -> None:
        if self.mode not in tr.MODES:
            raise SpecError(f"unknown mode {self.mode!r}; expected one of {tr.MODES}")
        known = set(CATEGORICALS) | {"age"}
        unknown = [c for c in self.controls if c not in known]
        if unknown:
            raise SpecError(f"unknown controls {unknown}; known: {sorted(known)}")
        extra = [c for c in self.distance_interacted_controls if c not in self.controls]
        if extra:
            raise SpecError(f"distance-interacted controls {extra} are not among the controls")
        if not self.fe:
            raise SpecError("at least one fixed-effect dimension is required")
        bad = [f for f in (*self.fe, self.cluster_by) if f not in KEY_COLUMNS]
        if bad:
            raise SpecError(f"unknown key columns {bad}; expected among {KEY_COLUMNS}")
        if self.mean_trend_source not in ("full", "loo"):
            raise SpecError("mean_trend_source must be 'full' or 'loo'")
        if self.sample not in (None, "analysis", "ring", "all"):
            raise SpecError(f"unknown sample {self.sample!r}")
        tr.dummy_layout(self.mode, self.window, self.omitted)

    @property
    def sample_name(self) -> str:
        if self.sample is not None:
            return self.sample
        return "ring" if self.mode == tr.PLACEBO else "analysis"

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise SpecError(f"unknown spec keys {unknown}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ModelSpec":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise SpecError(f"cannot read spec {path}: {exc}") from exc
        return cls.from_dict(d)

    def replace(self, **changes) -> "ModelSpec":
        d = self.to_dict()
        d.update(changes)
        return ModelSpec.from_dict(d)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


@dataclass
class DesignMatrix:
    y: np.ndarray
    X: np.ndarray
    names: list[str]
    fe_ids: dict[str, np.ndarray]
    cluster_ids: np.ndarray
    row_keys: pd.DataFrame
    spec: ModelSpec
    meta: dict = field(default_factory=dict)
    report_intercept: bool = False

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise DataValidationError("duplicate design column names")
        n = len(self.y)
        if self.X.shape != (n, len(self.names)) or len(self.cluster_ids) != n or len(self.row_keys) != n \
                or any(len(v) != n for v in self.fe_ids.values()):
            raise DataValidationError("design fields are not row-aligned")

    @property
    def n_obs(self) -> int:
        return len(self.y)

    def column(self, name: str) -> np.ndarray:
        return self.X[:, self.names.index(name)]

    def drop_columns(self, drop: Sequence[str]) -> "DesignMatrix":
        keep = [i for i, n in enumerate(self.names) if n not in set(drop)]
        return DesignMatrix(self.y, self.X[:, keep], [self.names[i] for i in keep], self.fe_ids,
                            self.cluster_ids, self.row_keys, self.spec, dict(self.meta), self.report_intercept)

    def sidecar(self) -> dict:
        return {
            "columns": self.names,
            "n_obs": self.n_obs,
            "spec": self.spec.to_dict(),
            "fe_cardinality": {k: int(len(np.unique(v))) for k, v in self.fe_ids.items()},
            "n_clusters": int(len(np.unique(self.cluster_ids))),
            **self.meta,
        }

    def to_csv(self, path, sidecar_path=None) -> None:
        header = ["y", *self.names, *(f"fe_{k}" for k in self.fe_ids), "cluster"]
        fe = np.column_stack([self.fe_ids[k] for k in self.fe_ids]) if self.fe_ids else np.empty((self.n_obs, 0))
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for i in range(self.n_obs):
                w.writerow([repr(float(self.y[i])), *(repr(float(v)) for v in self.X[i]),
                            *(int(v) for v in fe[i]), int(self.cluster_ids[i])])
        if sidecar_path is not None:
            Path(sidecar_path).write_text(json.dumps(self.sidecar(), indent=2, sort_keys=True) + "\n",
                                          encoding="utf-8")


def attach_events(panel: pd.DataFrame, eventmap: EventMap) -> pd.DataFrame:
    """Add distance_km, opening_year, buffer_class and k from the event map."""
    if "k" in panel.columns:
        return panel
    em = eventmap.to_frame().set_index("municipality_id")
    mids = panel["municipality_id"].astype(str)
    missing = sorted(set(mids) - set(em.index))
    if missing:
        raise DataValidationError(f"panel municipalities missing from the event map: {missing[:10]}")
    out = panel.copy()
    out["distance_km"] = em["distance_km"].reindex(mids).to_numpy(dtype=float)
    out["opening_year"] = em["opening_year"].reindex(mids).to_numpy(dtype=np.int64)
    out["buffer_class"] = em["buffer_class"].reindex(mids).to_numpy()
    out["k"] = tr.relative_time(out["year"].to_numpy(), out["opening_year"].to_numpy())
    return out


def select_sample(panel: pd.DataFrame, eventmap: EventMap, sample: str) -> pd.DataFrame:
    if sample == "all":
        classes = None
    elif sample == "analysis":
        classes = eventmap.analysis_classes
    elif sample == "ring":
        if eventmap.ring_class is None:
            raise SampleError("the event map has no placebo ring (needs at least two radii)")
        classes = [eventmap.ring_class]
    else:
        raise SpecError(f"unknown sample {sample!r}")
    out = panel if classes is None else panel.loc[panel["buffer_class"].isin(classes)]
    if len(out) == 0:
        raise SampleError(f"the {sample} sample is empty")
    return out.reset_index(drop=True)


def _encode(values: np.ndarray) -> np.ndarray:
    return np.unique(values, return_inverse=True)[1].astype(np.int64)


def _one_hot(col: pd.Series, reference: str) -> tuple[list[str], list[np.ndarray]]:
    values = col.astype(str).to_numpy()
    cats = list(col.cat.categories) if hasattr(col, "cat") else sorted(set(values))
    names, cols = [], []
    for level in cats:
        if level == reference:
            continue
        x = (values == level).astype(np.float64)
        # unobserved levels carry no information; skip them
        if not x.any():
            continue
        names.append(f"{col.name}_{level}")
        cols.append(x)
    return names, cols


def control_columns(panel: pd.DataFrame, control: str, codebook: Codebook) -> tuple[list[str], list[np.ndarray]]:
    """Encoded columns for one control.

    Categoricals are one-hot against the codebook reference level (``missing``
    is its own level). Age enters linearly; missing ages become 0 with an
    ``age_missing`` indicator.
    """
    if control == "age":
        age = panel["age"].to_numpy(dtype=float)
        miss = np.isnan(age)
        names, cols = ["age"], [np.where(miss, 0.0, age)]
        if miss.any():
            names.append("age_missing")
            cols.append(miss.astype(np.float64))
        return names, cols
    if control not in panel.columns:
        raise SpecError(f"control {control!r} not found in panel")
    return _one_hot(panel[control], codebook.reference[control])


def _trend_time(years: np.ndarray) -> tuple[np.ndarray, float]:
    center = (float(years.min()) + float(years.max())) / 2.0
    return years.astype(float) - center, center


def _finalize(y, cols, names, panel, spec, meta, report_intercept=False, outcome="outcome") -> DesignMatrix:
    X = np.column_stack(cols) if cols else np.empty((len(y), 0))
    bad = ~np.isfinite(X)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise DataValidationError(f"non-finite value in column {names[j]} at row {i}")
    if not np.all(np.isfinite(y)):
        i = int(np.flatnonzero(~np.isfinite(y))[0])
        raise DataValidationError(f"non-finite {outcome} at row {i}")
    fe_ids = {f: _encode(panel[f].astype(str).to_numpy() if f != "year" else panel[f].to_numpy())
              for f in spec.fe}
    cluster = panel[spec.cluster_by]
    cluster_ids = _encode(cluster.astype(str).to_numpy() if spec.cluster_by != "year" else cluster.to_numpy())
    keys = [c for c in ("student_id", "municipality_id", "year", "k") if c in panel.columns]
    return DesignMatrix(np.ascontiguousarray(y, dtype=float), np.ascontiguousarray(X), names, fe_ids,
                        cluster_ids, panel[keys].reset_index(drop=True), spec, meta, report_intercept)


def _dummies(panel: pd.DataFrame, spec: ModelSpec) -> tr.DummySystem:
    return tr.build_dummies(panel["k"].to_numpy(), spec.mode, spec.window, spec.omitted, spec.bin_endpoints)


def build_design(panel: pd.DataFrame, eventmap: EventMap, spec: ModelSpec,
                 codebook: Codebook | None = None) -> DesignMatrix:
    """Full regressor set for the pre-trend, semi-dynamic or placebo regression."""
    codebook = codebook or Codebook.load()
    panel = select_sample(attach_events(panel, eventmap), eventmap, spec.sample_name)
    for c in spec.controls:
        if c not in panel.columns:
            raise SpecError(f"control {c!r} not found in panel")
    dist = panel["distance_km"].to_numpy(dtype=float)
    dummies = _dummies(panel, spec)

    names: list[str] = list(dummies.names)
    cols: list[np.ndarray] = [dummies.matrix[:, j] for j in range(dummies.matrix.shape[1])]
    if spec.distance_interactions:
        names += [f"{n}_x_dist" for n in dummies.names]
        cols += [dummies.matrix[:, j] * dist for j in range(dummies.matrix.shape[1])]

    control_cols: dict[str, tuple[list[str], list[np.ndarray]]] = {}
    for c in spec.controls:
        control_cols[c] = control_columns(panel, c, codebook)
        names += control_cols[c][0]
        cols += control_cols[c][1]
    if spec.distance_interactions:
        for c in spec.distance_interacted_controls:
            cn, cc = control_cols[c]
            names += [f"{n}_x_dist" for n in cn]
            cols += [x * dist for x in cc]

    t_c, center = _trend_time(panel["year"].to_numpy())
    if spec.include_peer_mean:
        names.append("peer_mean")
        cols.append(panel["peer_mean"].to_numpy(dtype=float))
    if spec.include_mean_trend:
        src = "muni_year_mean" if spec.mean_trend_source == "full" else "peer_mean"
        names.append("mean_x_trend")
        cols.append(panel[src].to_numpy(dtype=float) * t_c)
    states = sorted(set(panel["state_id"].astype(str)))
    if spec.state_trends and len(states) > 1:
        sid = panel["state_id"].astype(str).to_numpy()
        # the omitted state's trend is spanned by the year effects
        for s in states[1:]:
            names.append(f"state_{s}_x_trend")
            cols.append((sid == s).astype(np.float64) * t_c)

    meta = {
        "sample": spec.sample_name,
        "trend_center": center,
        "included_k": list(dummies.included),
        "omitted_k": list(dummies.omitted),
        "reference_levels": {c: codebook.reference[c] for c in spec.controls if c in codebook.reference},
        "reference_state": states[0] if spec.state_trends and len(states) > 1 else None,
        "outcome": "outcome",
    }
    return _finalize(panel["outcome"].to_numpy(dtype=float), cols, names, panel, spec, meta)


def balance_outcome(panel: pd.DataFrame, covariate: str) -> np.ndarray:
    """Numeric version of an observable characteristic; NaN where missing."""
    def flag(col, levels):
        v = panel[col].astype(str).to_numpy()
        return np.where(v == MISSING, np.nan, np.isin(v, levels).astype(float))

    if covariate == "male":
        return flag("sex", ["M"])
    if covariate == "white":
        return flag("race", ["1"])
    if covariate == "age":
        return panel["age"].to_numpy(dtype=float)
    if covariate in ("father_hs", "mother_hs"):
        return flag(covariate, ["1"])
    if covariate == "income_gt6":
        return flag("family_income", ["6", "7"])
    raise SpecError(f"unknown balance covariate {covariate!r}; known: {list(BALANCE_COVARIATES)}")


def balance_design(panel: pd.DataFrame, eventmap: EventMap, spec: ModelSpec, covariate: str) -> DesignMatrix:
    """Covariate on event dummies with municipality and year effects only."""
    spec = spec.replace(mode=tr.BALANCE, fe=["municipality_id", "year"])
    y_all = balance_outcome(panel, covariate)
    panel = panel.assign(_balance_y=y_all)
    panel = select_sample(attach_events(panel, eventmap), eventmap, spec.sample_name)
    y = panel["_balance_y"].to_numpy()
    keep = np.isfinite(y)
    dropped = int((~keep).sum())
    panel = panel.loc[keep].reset_index(drop=True)
    if len(panel) == 0:
        raise SampleError(f"no non-missing values of {covariate}")
    dummies = _dummies(panel, spec)
    cols = [dummies.matrix[:, j] for j in range(dummies.matrix.shape[1])]
    meta = {
        "sample": spec.sample_name,
        "covariate": covariate,
        "missing_dropped": dropped,
        "included_k": list(dummies.included),
        "omitted_k": list(dummies.omitted),
        "outcome": covariate,
    }
    return _finalize(panel["_balance_y"].to_numpy(dtype=float), cols, list(dummies.names), panel, spec, meta,
                     report_intercept=True, outcome=covariate)
