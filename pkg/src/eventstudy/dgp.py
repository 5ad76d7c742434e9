"""Synthetic panels from a student effort-choice model with staggered openings.

A student picks effort e to maximise

    U(e) = w_lo + phi(e) * (w_hi - w_lo - K) - c(e),
    phi(e) = 1 - exp(-a e),   c(e) = c0 e^2 / 2,

so optimal effort solves a exp(-a e) (w_hi - w_lo - K) = c0 e, with the
corner e = 0 when the net premium is not positive. An opening lowers the
attendance cost K from ``K_far`` to ``K_near + kappa * distance`` (never
above ``K_far``), starting ``anticipation`` years before the opening. The
latent exam score moves linearly with effort, so the event-time effect path
is known in closed form.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import pandas as pd

from . import geo
from .errors import ConfigError
from .panel import AREA_GRADES, CATEGORICALS, MISSING, STUDENT_COLUMNS, Codebook, write_students


@dataclass
class DgpConfig:
    w_hi: float = 3.0
    w_lo: float = 1.0
    K_far: float = 1.5
    K_near: float = 0.5
    kappa: float = 0.0
    phi_scale: float = 1.0
    cost_curv: float = 1.0
    anticipation: int = 2
    # 0.038 / (e*(K_near) - e*(K_far)) at the defaults above
    effect_map: float = 0.10155
    fe_sd_muni: float = 0.3
    fe_sd_year: float = 0.2
    noise_sd: float = 0.94
    control_effect: float = 1.0
    n_municipalities: int = 113
    n_ring: int = 30
    n_states: int = 5
    students_per_cell: int = 640
    first_year: int = 2004
    last_year: int = 2018
    opening_years: tuple[int, ...] = (2009, 2009, 2010, 2010, 2012, 2012, 2013, 2013)
    buffer_radius_km: float = 25.0
    ring_radius_km: float = 50.0
    p_absent: float = 0.03
    p_zero_essay: float = 0.01
    p_missing_income: float = 0.02
    grade_scale: float = 60.0
    area_noise: float = 20.0
    seed: int = 42

    def __post_init__(self):
        self.opening_years = tuple(int(y) for y in self.opening_years)
        self.validate()

    @property
    def n_events(self) -> int:
        return len(self.opening_years)

    @property
    def years(self) -> list[int]:
        return list(range(self.first_year, self.last_year + 1))

    @property
    def n_years(self) -> int:
        return len(self.years)

    def validate(self) -> None:
        if not self.w_hi > self.w_lo:
            raise ConfigError("w_hi must exceed w_lo")
        if self.K_far < 0 or self.K_near < 0 or self.kappa < 0:
            raise ConfigError("costs and the distance gradient must be nonnegative")
        if self.K_near > self.K_far:
            raise ConfigError("K_near must not exceed K_far")
        if not (self.phi_scale > 0 and self.cost_curv > 0):
            raise ConfigError("phi_scale and cost_curv must be positive")
        if self.anticipation < 0:
            raise ConfigError("anticipation must be nonnegative")
        if min(self.fe_sd_muni, self.fe_sd_year, self.noise_sd) < 0:
            raise ConfigError("standard deviations must be nonnegative")
        if self.first_year > self.last_year:
            raise ConfigError("first_year after last_year")
        if not self.opening_years:
            raise ConfigError("at least one opening is required")
        bad = [y for y in self.opening_years if not self.first_year <= y <= self.last_year]
        if bad:
            raise ConfigError(f"opening years {bad} outside the panel years {self.first_year}-{self.last_year}")
        if self.n_municipalities < self.n_events:
            raise ConfigError("n_municipalities must be at least the number of openings")
        if self.n_ring < 0 or self.n_states < 1:
            raise ConfigError("n_ring must be >= 0 and n_states >= 1")
        if self.students_per_cell < 2:
            raise ConfigError("students_per_cell must be at least 2")
        if not 0 < self.buffer_radius_km < self.ring_radius_km:
            raise ConfigError("need 0 < buffer_radius_km < ring_radius_km")
        for name in ("p_absent", "p_zero_essay", "p_missing_income"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigError(f"{name} must lie in [0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "DgpConfig":
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown DGP config keys {unknown}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "DgpConfig":
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["opening_years"] = list(self.opening_years)
        return d


@dataclass(frozen=True)
class EffortSolution:
    e_star: float
    admitted_prob: float


def _solve_foc(a: float, c0: float, premium: float, iters: int = 200) -> float:
    if premium <= 0.0:
        return 0.0
    lo, hi = 0.0, a * premium / c0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if a * math.exp(-a * mid) * premium - c0 * mid > 0.0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def optimal_effort(config: DgpConfig, K_effective: float, w_hi: float | None = None) -> EffortSolution:
    """Optimal effort by bisection on the first-order condition."""
    premium = (config.w_hi if w_hi is None else w_hi) - config.w_lo - K_effective
    e = _solve_foc(config.phi_scale, config.cost_curv, premium)
    return EffortSolution(e, 1.0 - math.exp(-config.phi_scale * e))


def foc_residual(config: DgpConfig, K_effective: float, e: float) -> float:
    premium = config.w_hi - config.w_lo - K_effective
    a = config.phi_scale
    return a * math.exp(-a * e) * premium - config.cost_curv * e


def post_opening_cost(config: DgpConfig, distance_km) -> np.ndarray:
    return np.minimum(config.K_far, config.K_near + config.kappa * np.asarray(distance_km, dtype=float))


def effect_at(config: DgpConfig, distance_km: float) -> float:
    """Outcome shift (z-units) once the opening's cost reduction applies."""
    e_post = optimal_effort(config, float(post_opening_cost(config, distance_km))).e_star
    e_pre = optimal_effort(config, config.K_far).e_star
    return config.effect_map * (e_post - e_pre)


def truth_path(config: DgpConfig, distance_km: float, ks) -> dict[int, float]:
    eff = effect_at(config, distance_km)
    return {int(k): (eff if k >= -config.anticipation else 0.0) for k in ks}


@dataclass
class SimulatedData:
    records: pd.DataFrame
    centroids: list[geo.Centroid]
    events: list[geo.OpeningEvent]
    eventmap: geo.EventMap
    truth: dict
    config: DgpConfig = field(repr=False, default=None)

    def write(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / "students.csv", out / "centroids.csv", out / "events.csv", out / "truth.json"]
        write_students(self.records, paths[0])
        geo.write_centroids(self.centroids, paths[1])
        geo.write_events(self.events, paths[2])
        paths[3].write_text(json.dumps(self.truth, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return paths


_RACE_P = [0.35, 0.10, 0.50, 0.03, 0.02]
_INCOME_P = [0.05, 0.30, 0.30, 0.15, 0.12, 0.05, 0.03]
_MARITAL_P = [0.90, 0.07, 0.03]


def _layout(config: DgpConfig):
    """Centroids, events and (distance, event index) for each municipality."""
    n_ev = config.n_events
    centroids, events, plan = [], [], []
    centers = []
    for i in range(n_ev):
        # events 2 degrees apart (~220 km): buffers never overlap
        lat = -10.0 + 2.0 * (i // 4)
        lon = -45.0 + 2.0 * (i % 4)
        centers.append((lat, lon))
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    n_neighbors = config.n_municipalities - n_ev
    dists = list(np.zeros(n_ev)) + list(rng.uniform(0.5, config.buffer_radius_km, n_neighbors)) \
        + list(rng.uniform(config.buffer_radius_km + 0.5, config.ring_radius_km - 0.5, config.n_ring))
    bearings = rng.uniform(0.0, 360.0, len(dists))
    total = len(dists)
    width = max(4, len(str(total)))
    for m in range(total):
        ev = m % n_ev
        mid = f"M{m + 1:0{width}d}"
        sid = f"S{ev % config.n_states + 1}"
        lat, lon = centers[ev]
        if m >= n_ev:
            lat, lon = geo.destination_point(lat, lon, float(bearings[m]), float(dists[m]))
        centroids.append(geo.Centroid(mid, sid, lat, lon))
        if m < n_ev:
            events.append(geo.OpeningEvent(mid, sid, config.opening_years[m]))
        plan.append((mid, sid, ev))
    return centroids, events, plan


def _cell(config: DgpConfig, rng: np.random.Generator, n: int, latent_shift: float) -> dict:
    sex = np.where(rng.random(n) < 0.45, "M", "F")
    race = rng.choice(np.array(["1", "2", "3", "4", "5"]), size=n, p=_RACE_P)
    age = 16.0 + rng.poisson(2.2, n)
    income_idx = rng.choice(7, size=n, p=_INCOME_P)
    income = (income_idx + 1).astype(str).astype(object)
    income[rng.random(n) < config.p_missing_income] = MISSING
    father = (rng.random(n) < 0.30).astype(int)
    mother = (rng.random(n) < 0.37).astype(int)
    marital = rng.choice(np.array(["1", "2", "3"]), size=n, p=_MARITAL_P)

    controls = config.control_effect * (
        0.08 * np.where(income == MISSING, 0.0, income_idx - 3.0)
        + 0.10 * father + 0.10 * mother + 0.05 * (race == "1") - 0.02 * (age - 18.0)
    )
    z = latent_shift + controls + config.noise_sd * rng.standard_normal(n)
    dev = rng.standard_normal((n, 4))
    dev = config.area_noise * (dev - dev.mean(axis=1, keepdims=True))
    grades = 500.0 + config.grade_scale * z[:, None] + dev

    absent1 = rng.random(n) < config.p_absent / 2
    absent2 = rng.random(n) < config.p_absent / 2
    essay = 20.0 * rng.integers(10, 51, n)
    essay[rng.random(n) < config.p_zero_essay] = 0.0
    grades[absent1, 0:2] = np.nan
    grades[absent2, 2:4] = np.nan
    essay[absent2] = np.nan
    return {
        "grades": grades, "essay": essay, "p1": ~absent1, "p2": ~absent2, "sex": sex, "race": race,
        "age": age, "income": income, "father": father.astype(str), "mother": mother.astype(str),
        "marital": marital,
    }


def simulate_panel(config: DgpConfig, codebook: Codebook | None = None) -> SimulatedData:
    """Draw a full synthetic dataset. Output is a pure function of ``config``."""
    config.validate()
    codebook = codebook or Codebook.load()
    centroids, events, plan = _layout(config)
    eventmap = geo.assign_events(centroids, events, (10.0, config.buffer_radius_km, config.ring_radius_km))

    top = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
    muni_fe = config.fe_sd_muni * top.standard_normal(len(plan))
    year_fe = dict(zip(config.years, config.fe_sd_year * top.standard_normal(config.n_years)))
    e_far = optimal_effort(config, config.K_far).e_star

    cols: dict[str, list] = {c: [] for c in STUDENT_COLUMNS}
    for m, (mid, sid, ev) in enumerate(plan):
        a = eventmap[mid]
        k_post = float(post_opening_cost(config, a.distance_km))
        e_post = optimal_effort(config, k_post).e_star
        opening = a.event.opening_year
        for year in config.years:
            rng = np.random.default_rng(np.random.SeedSequence([config.seed, 3, m, year]))
            n = max(2, int(rng.poisson(config.students_per_cell)))
            treated = year >= opening - config.anticipation
            shift = config.effect_map * ((e_post if treated else e_far) - e_far) + muni_fe[m] + year_fe[year]
            c = _cell(config, rng, n, shift)
            cols["student_id"].append(np.array([f"{mid}-{year}-{i:04d}" for i in range(n)], dtype=object))
            cols["municipality_id"].append(np.full(n, mid, dtype=object))
            cols["state_id"].append(np.full(n, sid, dtype=object))
            cols["year"].append(np.full(n, year, dtype=np.int64))
            for j, g in enumerate(AREA_GRADES):
                cols[g].append(c["grades"][:, j])
            cols["essay_grade"].append(c["essay"])
            cols["present_day1"].append(c["p1"])
            cols["present_day2"].append(c["p2"])
            cols["sex"].append(c["sex"])
            cols["race"].append(c["race"])
            cols["age"].append(c["age"])
            cols["family_income"].append(c["income"])
            cols["father_hs"].append(c["father"])
            cols["mother_hs"].append(c["mother"])
            cols["marital_status"].append(c["marital"])

    df = pd.DataFrame({c: np.concatenate(v) for c, v in cols.items()})
    for c in CATEGORICALS:
        df[c] = pd.Categorical(df[c].astype(str), categories=codebook.categories(c))

    ks = range(config.first_year - max(config.opening_years), config.last_year - min(config.opening_years) + 1)
    analysis = [a.distance_km for a in eventmap if a.buffer_class in eventmap.analysis_classes]
    d_bar = float(np.mean(analysis))
    truth = {
        "beta": {str(k): v for k, v in truth_path(config, d_bar, ks).items()},
        "beta_host": {str(k): v for k, v in truth_path(config, 0.0, ks).items()},
        "mean_distance_km": d_bar,
        "effect_host": effect_at(config, 0.0),
        "anticipation": config.anticipation,
        "config": config.to_dict(),
    }
    return SimulatedData(df, centroids, events, eventmap, truth, config)
