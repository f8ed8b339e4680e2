"""Check-in / taxi ingestion, grid segmentation and per-window traffic matrices."""

from __future__ import annotations

import bisect
import csv
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, DataError

LOG = logging.getLogger(__name__)

OUTSIDE = -1

INNER, INFLOW, OUTFLOW = 0, 1, 2

CHECKIN_FIELDS = ("user_id", "poi_id", "category_id", "category_name", "lat", "lon", "timestamp")
TAXI_FIELDS = (
    "trip_id",
    "pickup_lat",
    "pickup_lon",
    "dropoff_lat",
    "dropoff_lon",
    "pickup_time",
    "dropoff_time",
)

_TIME_FORMATS = (
    "%a %b %d %H:%M:%S %z %Y",  # raw Foursquare dumps
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%d %H:%M",
)


@dataclass(frozen=True)
class CheckinEvent:
    user_id: str
    poi_id: str
    category_id: str
    category_name: str
    lat: float
    lon: float
    timestamp: float


@dataclass(frozen=True)
class TaxiTrip:
    trip_id: str
    pickup_lat: float
    pickup_lon: float
    dropoff_lat: float
    dropoff_lon: float
    pickup_time: float
    dropoff_time: float


@dataclass(frozen=True)
class GridSpec:
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float
    rows: int
    cols: int

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ConfigError(f"grid needs rows, cols >= 1 (got {self.rows}x{self.cols})")
        if not (self.lat_max > self.lat_min and self.lon_max > self.lon_min):
            raise ConfigError("degenerate grid bounding box")

    @property
    def m(self) -> int:
        return self.rows * self.cols

    @property
    def bbox(self):
        return (self.lat_min, self.lat_max, self.lon_min, self.lon_max)


@dataclass
class TemporalContext:
    window_id: int
    start: float
    end: float
    matrix: np.ndarray  # (m, 3): inner, in-flow, out-flow

    def flat(self) -> np.ndarray:
        return self.matrix.reshape(-1)


@dataclass
class ParseReport:
    path: str
    total_rows: int = 0
    skipped_rows: int = 0
    reasons: Counter = field(default_factory=Counter)

    def skip(self, reason: str) -> None:
        self.skipped_rows += 1
        self.reasons[reason] += 1

    def log(self) -> None:
        LOG.info(
            "parsed %s rows=%d skipped=%d reasons=%s",
            self.path,
            self.total_rows,
            self.skipped_rows,
            dict(self.reasons),
        )


def parse_timestamp(value: str) -> float:
    """ISO-8601, a few common layouts, or epoch seconds -> UTC epoch seconds."""
    text = value.strip()
    if not text:
        raise ValueError("empty timestamp")
    try:
        return float(text)
    except ValueError:
        pass
    iso = text[:-1] + "+00:00" if text.endswith("Z") else text
    try:
        dt = datetime.fromisoformat(iso)
    except ValueError:
        dt = None
        for fmt in _TIME_FORMATS:
            try:
                dt = datetime.strptime(text, fmt)
                break
            except ValueError:
                continue
        if dt is None:
            raise ValueError(f"unparseable timestamp {value!r}")
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def _coord(value: str, bound: float) -> float:
    x = float(value)
    if not math.isfinite(x) or abs(x) > bound:
        raise ValueError(f"coordinate {value!r} out of range")
    return x


ColumnMap = Mapping[str, Union[str, int]]


def _read_rows(path, fields: Sequence[str], columns: Optional[ColumnMap], delimiter: str, header: bool):
    path = Path(path)
    try:
        handle = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with handle:
        reader = csv.reader(handle, delimiter=delimiter)
        names = next(reader, None) if header else None
        if header and names is None:
            return
        index = {}
        for f in fields:
            col = (columns or {}).get(f, f if header else fields.index(f))
            if isinstance(col, int):
                index[f] = col
            elif names is not None and col in names:
                index[f] = names.index(col)
            else:
                raise ConfigError(f"{path}: column {col!r} for field {f!r} not found")
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            try:
                yield {f: row[i] for f, i in index.items()}
            except IndexError:
                yield None


def parse_checkins(
    path,
    columns: Optional[ColumnMap] = None,
    delimiter: str = ",",
    header: bool = True,
    report: Optional[ParseReport] = None,
) -> List[CheckinEvent]:
    """Read check-ins and return them as one time-ordered mixed-user stream.

    Malformed rows are skipped and tallied in ``report``. Raises DataError
    when nothing usable remains.
    """
    report = report if report is not None else ParseReport(str(path))
    events = []
    for rec in _read_rows(path, CHECKIN_FIELDS, columns, delimiter, header):
        report.total_rows += 1
        if rec is None:
            report.skip("short_row")
            continue
        try:
            name = rec["category_name"].strip()
            if not name:
                raise ValueError("empty category name")
            events.append(
                CheckinEvent(
                    user_id=rec["user_id"].strip(),
                    poi_id=rec["poi_id"].strip(),
                    category_id=rec["category_id"].strip(),
                    category_name=name,
                    lat=_coord(rec["lat"], 90.0),
                    lon=_coord(rec["lon"], 180.0),
                    timestamp=parse_timestamp(rec["timestamp"]),
                )
            )
        except ValueError:
            report.skip("bad_value")
    report.log()
    if not events:
        raise DataError(f"{path}: no valid check-in rows")
    events.sort(key=lambda e: e.timestamp)
    return events


def parse_taxi(
    path,
    columns: Optional[ColumnMap] = None,
    delimiter: str = ",",
    header: bool = True,
    report: Optional[ParseReport] = None,
) -> List[TaxiTrip]:
    report = report if report is not None else ParseReport(str(path))
    trips = []
    for rec in _read_rows(path, TAXI_FIELDS, columns, delimiter, header):
        report.total_rows += 1
        if rec is None:
            report.skip("short_row")
            continue
        try:
            trip = TaxiTrip(
                trip_id=rec["trip_id"].strip(),
                pickup_lat=_coord(rec["pickup_lat"], 90.0),
                pickup_lon=_coord(rec["pickup_lon"], 180.0),
                dropoff_lat=_coord(rec["dropoff_lat"], 90.0),
                dropoff_lon=_coord(rec["dropoff_lon"], 180.0),
                pickup_time=parse_timestamp(rec["pickup_time"]),
                dropoff_time=parse_timestamp(rec["dropoff_time"]),
            )
        except ValueError:
            report.skip("bad_value")
            continue
        if trip.dropoff_time < trip.pickup_time:
            report.skip("dropoff_before_pickup")
            continue
        trips.append(trip)
    report.log()
    if not trips:
        raise DataError(f"{path}: no valid taxi rows")
    trips.sort(key=lambda t: t.pickup_time)
    return trips


def cell_of(lat: float, lon: float, grid: GridSpec) -> int:
    """Row-major cell index, or OUTSIDE.

    A point on an interior boundary belongs to the lower-index cell; the
    bbox minimum edges fall in row/col 0 and the maximum edges in the last.
    """
    if not (grid.lat_min <= lat <= grid.lat_max and grid.lon_min <= lon <= grid.lon_max):
        return OUTSIDE
    r = math.ceil((lat - grid.lat_min) / (grid.lat_max - grid.lat_min) * grid.rows) - 1
    c = math.ceil((lon - grid.lon_min) / (grid.lon_max - grid.lon_min) * grid.cols) - 1
    return min(max(r, 0), grid.rows - 1) * grid.cols + min(max(c, 0), grid.cols - 1)


def nearest_cell(lat: float, lon: float, grid: GridSpec) -> int:
    """Like cell_of, but clamps outside points onto the nearest boundary cell."""
    lat = min(max(lat, grid.lat_min), grid.lat_max)
    lon = min(max(lon, grid.lon_min), grid.lon_max)
    return cell_of(lat, lon, grid)


def compute_temporal_contexts(
    trips: Sequence[TaxiTrip], grid: GridSpec, window_len: float
) -> List[TemporalContext]:
    if window_len <= 0:
        raise ConfigError("window_len must be positive")
    if not trips:
        return []
    first = math.floor(min(t.pickup_time for t in trips) / window_len)
    last = math.floor(max(t.pickup_time for t in trips) / window_len)
    mats = np.zeros((last - first + 1, grid.m, 3))
    for t in trips:
        w = math.floor(t.pickup_time / window_len) - first
        a = cell_of(t.pickup_lat, t.pickup_lon, grid)
        b = cell_of(t.dropoff_lat, t.dropoff_lon, grid)
        if a != OUTSIDE and a == b:
            mats[w, a, INNER] += 1
            continue
        if a != OUTSIDE:
            mats[w, a, OUTFLOW] += 1
        if b != OUTSIDE:
            mats[w, b, INFLOW] += 1
    return [
        TemporalContext(
            window_id=i,
            start=(first + i) * window_len,
            end=(first + i + 1) * window_len,
            matrix=mats[i],
        )
        for i in range(len(mats))
    ]


def context_for(time: float, contexts: Sequence[TemporalContext], m: Optional[int] = None) -> TemporalContext:
    """Context whose window holds ``time``; else the latest earlier one; else zeros."""
    if contexts:
        starts = [c.start for c in contexts]
        i = bisect.bisect_right(starts, time) - 1
        if i >= 0:
            return contexts[i]
        m = contexts[0].matrix.shape[0]
    if m is None:
        raise ConfigError("grid size needed when no contexts are available")
    return TemporalContext(window_id=-1, start=-math.inf, end=-math.inf, matrix=np.zeros((m, 3)))


def save_contexts(path, contexts: Sequence[TemporalContext], **meta) -> None:
    arrays: Dict[str, np.ndarray] = {
        **{f"meta_{k}": np.array(str(v)) for k, v in meta.items()},
        "window_id": np.array([c.window_id for c in contexts], dtype=np.int64),
        "start": np.array([c.start for c in contexts], dtype=np.float64),
        "end": np.array([c.end for c in contexts], dtype=np.float64),
        "matrix": np.stack([c.matrix for c in contexts]) if contexts else np.zeros((0, 0, 3)),
    }
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_contexts(path) -> List[TemporalContext]:
    with np.load(path) as z:
        return [
            TemporalContext(int(w), float(s), float(e), np.array(m))
            for w, s, e, m in zip(z["window_id"], z["start"], z["end"], z["matrix"])
        ]
