"""Centroid distances and assignment of municipalities to opening events.

Distances are great-circle (haversine) on a sphere of radius
``EARTH_RADIUS_KM`` (6371.0 km); pass ``radius`` to use another value, e.g.
the IUGG mean radius ``MEAN_EARTH_RADIUS_KM``. At the 10-50 km scale used for buffers the spherical
error against an ellipsoid is well under 0.5%, which never matters for
buffer membership in practice.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from .errors import DataValidationError, OverlapError

EARTH_RADIUS_KM = 6371.0
MEAN_EARTH_RADIUS_KM = 6371.0088

HOST = "host"
OUTSIDE = "outside"

EVENTMAP_COLUMNS = [
    "municipality_id",
    "event_municipality_id",
    "distance_km",
    "buffer_class",
    "opening_year",
]


@dataclass(frozen=True)
class Centroid:
    municipality_id: str
    state_id: str
    lat: float
    lon: float

    def __post_init__(self):
        _check_coords(self.lat, self.lon)


@dataclass(frozen=True)
class OpeningEvent:
    municipality_id: str
    state_id: str
    opening_year: int


@dataclass(frozen=True)
class Assignment:
    municipality_id: str
    event: OpeningEvent
    distance_km: float
    buffer_class: str


def _check_coords(lat, lon):
    lat = np.asarray(lat, dtype=float)
    lon = np.asarray(lon, dtype=float)
    if not (np.all(np.isfinite(lat)) and np.all(np.isfinite(lon))):
        raise DataValidationError("non-finite coordinate")
    if np.any(np.abs(lat) > 90.0):
        raise DataValidationError(f"latitude out of [-90, 90]: {lat[np.abs(lat) > 90.0].tolist()}")
    if np.any(np.abs(lon) > 180.0):
        raise DataValidationError(f"longitude out of [-180, 180]: {lon[np.abs(lon) > 180.0].tolist()}")


def haversine_array(lat1, lon1, lat2, lon2, radius: float = EARTH_RADIUS_KM) -> np.ndarray:
    """Vectorised great-circle distance in km between coordinate arrays (degrees)."""
    _check_coords(lat1, lon1)
    _check_coords(lat2, lon2)
    p1 = np.radians(np.asarray(lat1, dtype=float))
    p2 = np.radians(np.asarray(lat2, dtype=float))
    dphi = p2 - p1
    dlam = np.radians(np.asarray(lon2, dtype=float) - np.asarray(lon1, dtype=float))
    h = np.sin(dphi / 2.0) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlam / 2.0) ** 2
    # rounding can push h marginally past 1 for antipodal points
    h = np.clip(h, 0.0, 1.0)
    return 2.0 * radius * np.arcsin(np.sqrt(h))


def haversine_km(a: Centroid, b: Centroid) -> float:
    return float(haversine_array(a.lat, a.lon, b.lat, b.lon))


def destination_point(lat: float, lon: float, bearing_deg: float, distance_km: float,
                      radius: float = EARTH_RADIUS_KM) -> tuple[float, float]:
    """Point reached travelling ``distance_km`` from (lat, lon) along an initial bearing."""
    phi1 = math.radians(lat)
    lam1 = math.radians(lon)
    theta = math.radians(bearing_deg)
    delta = distance_km / radius
    phi2 = math.asin(math.sin(phi1) * math.cos(delta)
                     + math.cos(phi1) * math.sin(delta) * math.cos(theta))
    lam2 = lam1 + math.atan2(math.sin(theta) * math.sin(delta) * math.cos(phi1),
                             math.cos(delta) - math.sin(phi1) * math.sin(phi2))
    lon2 = (math.degrees(lam2) + 540.0) % 360.0 - 180.0
    return math.degrees(phi2), lon2


def buffer_labels(radii: Sequence[float]) -> list[str]:
    """Class labels for each radius, innermost first.

    With more than one radius the outermost one defines a ring around the
    previous radius (the placebo ring), e.g. radii (10, 25, 50) give
    ``<=10km``, ``<=25km``, ``ring(25,50]``.
    """
    radii = list(radii)
    labels = [f"<={r:g}km" for r in radii]
    if len(radii) > 1:
        labels[-1] = f"ring({radii[-2]:g},{radii[-1]:g}]"
    return labels


def class_order(radii: Sequence[float]) -> list[str]:
    return [HOST, *buffer_labels(radii), OUTSIDE]


def classify_distance(distance_km: float, radii: Sequence[float], is_host: bool = False) -> str:
    """Smallest enclosing radius wins; boundaries are inclusive (``d <= r``)."""
    if is_host:
        return HOST
    for r, label in zip(radii, buffer_labels(radii)):
        if distance_km <= r:
            return label
    return OUTSIDE


def _check_radii(radii: Sequence[float]) -> None:
    if len(radii) == 0:
        raise ValueError("at least one radius is required")
    if any(r <= 0 for r in radii) or any(b <= a for a, b in zip(radii, radii[1:])):
        raise ValueError(f"radii must be positive and strictly increasing, got {list(radii)}")


class EventMap:
    """Per-municipality nearest opening event, distance and buffer class."""

    def __init__(self, assignments: Iterable[Assignment], radii: Sequence[float]):
        self.radii = tuple(float(r) for r in radii)
        self._by_id = {a.municipality_id: a for a in sorted(assignments, key=lambda a: a.municipality_id)}

    def __getitem__(self, municipality_id: str) -> Assignment:
        return self._by_id[municipality_id]

    def __contains__(self, municipality_id) -> bool:
        return municipality_id in self._by_id

    def __len__(self) -> int:
        return len(self._by_id)

    def __iter__(self):
        return iter(self._by_id.values())

    @property
    def analysis_classes(self) -> list[str]:
        """Classes inside the analysis buffers (host plus every radius but the ring)."""
        labels = buffer_labels(self.radii)
        inner = labels[:-1] if len(labels) > 1 else labels
        return [HOST, *inner]

    @property
    def ring_class(self) -> str | None:
        labels = buffer_labels(self.radii)
        return labels[-1] if len(labels) > 1 else None

    def to_frame(self) -> pd.DataFrame:
        rows = [
            {
                "municipality_id": a.municipality_id,
                "event_municipality_id": a.event.municipality_id,
                "distance_km": a.distance_km,
                "buffer_class": a.buffer_class,
                "opening_year": a.event.opening_year,
            }
            for a in self
        ]
        return pd.DataFrame(rows, columns=EVENTMAP_COLUMNS)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(EVENTMAP_COLUMNS)
            for a in self:
                w.writerow([a.municipality_id, a.event.municipality_id, repr(float(a.distance_km)),
                            a.buffer_class, a.event.opening_year])


def assign_events(centroids: Sequence[Centroid], events: Sequence[OpeningEvent],
                  radii: Sequence[float] = (10.0, 25.0, 50.0),
                  overlap_radius: float | None = None) -> EventMap:
    """Map each municipality to its nearest opening event.

    Ties in distance go to the event with the smallest municipality id. A
    municipality within ``overlap_radius`` (default: the smallest radius) of
    two distinct events raises :class:`OverlapError`.
    """
    _check_radii(radii)
    if overlap_radius is None:
        overlap_radius = radii[0]
    if not events:
        raise DataValidationError("no opening events given")

    cents = sorted(centroids, key=lambda c: c.municipality_id)
    ids = [c.municipality_id for c in cents]
    if len(set(ids)) != len(ids):
        raise DataValidationError("duplicate municipality_id in centroids")
    index = {mid: i for i, mid in enumerate(ids)}

    evs = sorted(events, key=lambda e: e.municipality_id)
    ev_ids = [e.municipality_id for e in evs]
    if len(set(ev_ids)) != len(ev_ids):
        raise DataValidationError("more than one opening event for a municipality")
    missing = [m for m in ev_ids if m not in index]
    if missing:
        raise DataValidationError(f"event municipalities missing from centroids: {missing}")

    lat = np.array([c.lat for c in cents])
    lon = np.array([c.lon for c in cents])
    ev_idx = np.array([index[m] for m in ev_ids])
    # (n_municipalities, n_events)
    dist = haversine_array(lat[:, None], lon[:, None], lat[ev_idx][None, :], lon[ev_idx][None, :])
    for j, i in enumerate(ev_idx):
        dist[i, j] = 0.0

    host_of = {index[e.municipality_id]: j for j, e in enumerate(evs)}
    # argmin returns the first minimum; events are sorted by id, so ties go to the smallest id
    nearest = np.argmin(dist, axis=1)

    assignments = []
    for i, c in enumerate(cents):
        close = np.flatnonzero(dist[i] <= overlap_radius)
        if i not in host_of and len(close) > 1:
            raise OverlapError(
                f"municipality {c.municipality_id} lies within {overlap_radius:g} km of events "
                f"{[ev_ids[j] for j in close]}"
            )
        j = host_of.get(i, nearest[i])
        d = float(dist[i, j])
        assignments.append(Assignment(c.municipality_id, evs[j], d,
                                      classify_distance(d, radii, is_host=i in host_of)))
    return EventMap(assignments, radii)


def read_centroids(path) -> list[Centroid]:
    df = _read_csv(path, ["municipality_id", "state_id", "lat", "lon"],
                   {"municipality_id": str, "state_id": str, "lat": float, "lon": float})
    _check_coords(df["lat"].to_numpy(), df["lon"].to_numpy())
    return [Centroid(r.municipality_id, r.state_id, float(r.lat), float(r.lon)) for r in df.itertuples()]


def read_events(path) -> list[OpeningEvent]:
    df = _read_csv(path, ["municipality_id", "state_id", "opening_year"],
                   {"municipality_id": str, "state_id": str, "opening_year": "int64"})
    return [OpeningEvent(r.municipality_id, r.state_id, int(r.opening_year)) for r in df.itertuples()]


def read_eventmap(path, radii: Sequence[float] = (10.0, 25.0, 50.0)) -> EventMap:
    df = _read_csv(path, EVENTMAP_COLUMNS,
                   {"municipality_id": str, "event_municipality_id": str, "distance_km": float,
                    "buffer_class": str, "opening_year": "int64"})
    return EventMap(
        [Assignment(r.municipality_id, OpeningEvent(r.event_municipality_id, "", int(r.opening_year)),
                    float(r.distance_km), r.buffer_class) for r in df.itertuples()],
        radii,
    )


def write_centroids(centroids: Sequence[Centroid], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["municipality_id", "state_id", "lat", "lon"])
        for c in sorted(centroids, key=lambda c: c.municipality_id):
            w.writerow([c.municipality_id, c.state_id, repr(c.lat), repr(c.lon)])


def write_events(events: Sequence[OpeningEvent], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["municipality_id", "state_id", "opening_year"])
        for e in sorted(events, key=lambda e: e.municipality_id):
            w.writerow([e.municipality_id, e.state_id, e.opening_year])


def _read_csv(path, columns, dtypes) -> pd.DataFrame:
    path = Path(path)
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except (OSError, UnicodeDecodeError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DataValidationError(f"cannot read {path}: {exc}") from exc
    if list(df.columns) != columns:
        raise DataValidationError(f"{path}: expected header {','.join(columns)}, got {','.join(df.columns)}")
    try:
        return df.astype(dtypes)
    except ValueError as exc:
        raise DataValidationError(f"{path}: {exc}") from exc
