"""Deterministic synthetic datasets: the toy KG, the cyclic imitation user and
the small smoke fixture used by the CLI."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import List, Tuple

import numpy as np

from .ingest import CheckinEvent, GridSpec, TaxiTrip

CATEGORY_NAMES = ["coffee shop", "bar", "gym", "park", "art museum", "bus station", "bakery", "bookstore"]


def toy_kg_events() -> Tuple[List[CheckinEvent], GridSpec]:
    """4 POIs, 2 categories, 2 zones (a 1x2 grid)."""
    grid = GridSpec(0.0, 1.0, 0.0, 1.0, 1, 2)
    spots = [("p1", "c1", 0.5, 0.2), ("p2", "c2", 0.5, 0.3), ("p3", "c1", 0.5, 0.7), ("p4", "c2", 0.5, 0.8)]
    names = {"c1": "coffee shop", "c2": "bar"}
    events = [
        CheckinEvent("u1", p, c, names[c], lat, lon, float(i)) for i, (p, c, lat, lon) in enumerate(spots)
    ]
    return events, grid


def cyclic_user(
    n_pois: int = 5, cycles: int = 10, gap: float = 600.0, base=(40.70, -74.00), step_deg: float = 0.01
) -> Tuple[List[CheckinEvent], GridSpec]:
    """One user visiting POIs 0..n-1 in a loop; each POI has its own category and cell."""
    lat0, lon0 = base
    grid = GridSpec(lat0 - step_deg / 2, lat0 + step_deg / 2, lon0, lon0 + n_pois * step_deg, 1, n_pois)
    events = []
    for k in range(cycles * n_pois):
        j = k % n_pois
        events.append(
            CheckinEvent(
                "u0",
                f"poi{j}",
                f"cat{j}",
                CATEGORY_NAMES[j % len(CATEGORY_NAMES)],
                lat0,
                lon0 + (j + 0.5) * step_deg,
                1_333_000_000.0 + k * gap,
            )
        )
    return events, grid


def random_trips(grid: GridSpec, start: float, end: float, n: int, seed: int = 0) -> List[TaxiTrip]:
    rng = np.random.default_rng(seed)
    trips = []
    for i in range(n):
        t0 = float(rng.uniform(start, end))
        pts = rng.uniform([grid.lat_min, grid.lon_min], [grid.lat_max, grid.lon_max], (2, 2))
        trips.append(TaxiTrip(f"t{i}", *pts[0], *pts[1], t0, t0 + float(rng.uniform(60, 1800))))
    trips.sort(key=lambda t: t.pickup_time)
    return trips


def periodic_trips(
    grid: GridSpec, start: float, end: float, per_window: int, window_len: float = 3600.0, seed: int = 0
) -> List[TaxiTrip]:
    """The same random trip pattern repeated in every window covering [start, end]."""
    base = random_trips(grid, 0.0, window_len, per_window, seed)
    trips = []
    for w in range(int(start // window_len), int(end // window_len) + 1):
        off = w * window_len
        trips += [
            TaxiTrip(f"{t.trip_id}w{w}", t.pickup_lat, t.pickup_lon, t.dropoff_lat, t.dropoff_lon,
                     t.pickup_time + off, t.dropoff_time + off)
            for t in base
        ]
    return trips


def word_vectors(dim: int = 8, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    tokens = sorted({t for name in CATEGORY_NAMES for t in name.split()})
    return {t: rng.normal(size=dim) for t in tokens}


def smoke_events(n_users: int = 4, n_events: int = 200, n_pois: int = 12, seed: int = 0):
    """``n_events`` check-ins from users with noisy personal routines over a 3x3 grid."""
    rng = np.random.default_rng(seed)
    grid = GridSpec(40.70, 40.73, -74.02, -73.99, 3, 3)
    poi_lat = rng.uniform(grid.lat_min, grid.lat_max, n_pois)
    poi_lon = rng.uniform(grid.lon_min, grid.lon_max, n_pois)
    poi_cat = rng.integers(0, 6, n_pois)
    routines = [rng.permutation(n_pois)[:4] for _ in range(n_users)]
    events = []
    t = 1_333_000_000.0
    pos = [0] * n_users
    for k in range(n_events):
        u = k % n_users
        if rng.random() < 0.8:
            j = int(routines[u][pos[u] % 4])
            pos[u] += 1
        else:
            j = int(rng.integers(n_pois))
        c = int(poi_cat[j])
        events.append(
            CheckinEvent(f"u{u}", f"poi{j:02d}", f"cat{c}", CATEGORY_NAMES[c], float(poi_lat[j]), float(poi_lon[j]), t)
        )
        t += float(rng.integers(300, 1200))
    return events, grid


def write_checkins(path, events) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["user_id", "poi_id", "category_id", "category_name", "lat", "lon", "timestamp"])
        for e in events:
            w.writerow([e.user_id, e.poi_id, e.category_id, e.category_name, *(repr(float(v)) for v in (e.lat, e.lon, e.timestamp))])


def write_trips(path, trips) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trip_id", "pickup_lat", "pickup_lon", "dropoff_lat", "dropoff_lon", "pickup_time", "dropoff_time"])
        for t in trips:
            w.writerow(
                [t.trip_id]
                + [repr(float(v)) for v in (t.pickup_lat, t.pickup_lon, t.dropoff_lat, t.dropoff_lon,
                                            t.pickup_time, t.dropoff_time)]
            )


def write_word_vectors(path, words: dict) -> None:
    with open(path, "w") as fh:
        for tok in sorted(words):
            fh.write(tok + " " + " ".join(repr(float(x)) for x in words[tok]) + "\n")


def write_smoke_fixture(directory) -> dict:
    """Write checkins.csv, taxi.csv and words.txt; returns their paths."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    events, grid = smoke_events()
    trips = random_trips(grid, events[0].timestamp, events[-1].timestamp, 300, seed=1)
    paths = {"checkins": d / "checkins.csv", "taxi": d / "taxi.csv", "words": d / "words.txt"}
    write_checkins(paths["checkins"], events)
    write_trips(paths["taxi"], trips)
    write_word_vectors(paths["words"], word_vectors())
    return paths
