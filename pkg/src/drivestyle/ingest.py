"""Fleet GPS log parsing and kinematic derivation.

Input rows carry ``driver_id, trip_id, t, speed_kmh, bearing_deg`` at 1 Hz.
Every trip is split on sampling gaps and turned into six signals per point:
speed, acceleration, jerk, bearing, angular speed and angular jerk.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .errors import (
    EmptyFile,
    EmptyFleet,
    MissingColumn,
    NonMonotonicTimestamp,
    OutOfRangeValue,
    TooShort,
    ValidationError,
)

log = logging.getLogger(__name__)

CSV_COLUMNS = ("driver_id", "trip_id", "t", "speed_kmh", "bearing_deg")
SIGNALS = ("v", "a", "j", "b", "ba", "bj")
SIGNAL_NAMES = ("speed", "acceleration", "jerk", "bearing", "angularSpeed", "angularJerk")
DEFAULT_MAX_GAP = 3


class GpsRecord(NamedTuple):
    driver_id: str
    trip_id: str
    t: int
    speed: float
    bearing: float


class TrajectoryPoint(NamedTuple):
    v: float
    a: float
    j: float
    b: float
    ba: float
    bj: float


@dataclass
class RawTrip:
    driver_id: str
    trip_id: str
    records: list[GpsRecord] = field(default_factory=list)


@dataclass
class Trip:
    """A gap-free 1 Hz trip.

    ``points`` is an ``(n, 6)`` array with columns ``[v, a, j, b, ba, bj]``;
    ``db`` holds the signed, wrapped bearing change per point (turn direction).
    """

    driver_id: str
    trip_id: str
    points: np.ndarray
    db: np.ndarray

    def __len__(self) -> int:
        return len(self.points)

    def point(self, i: int) -> TrajectoryPoint:
        return TrajectoryPoint(*map(float, self.points[i]))

    def to_json(self) -> dict:
        return {
            "driver_id": self.driver_id,
            "trip_id": self.trip_id,
            "points": self.points.tolist(),
            "db": self.db.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Trip":
        points = np.asarray(obj["points"], dtype=float).reshape(-1, 6)
        db = np.asarray(obj["db"], dtype=float)
        if len(db) != len(points):
            raise ValidationError(f"trip {obj.get('trip_id')}: db length != points length")
        return cls(str(obj["driver_id"]), str(obj["trip_id"]), points, db)


@dataclass
class ParseResult:
    trips: list[RawTrip]
    n_parsed: int
    n_rejected: int


def _check_row(row_no: int, speed: float, bearing: float) -> None:
    if not np.isfinite(speed) or speed < 0:
        raise OutOfRangeValue(row_no, f"speed {speed} must be >= 0")
    if not np.isfinite(bearing) or not 0.0 <= bearing < 360.0:
        raise OutOfRangeValue(row_no, f"bearing {bearing} outside [0, 360)")


def parse_fleet_csv(path: str | Path, strict: bool = True) -> ParseResult:
    """Read a fleet CSV into per-(driver, trip) record groups.

    Row numbers in errors count the header as row 1. With ``strict=False``
    malformed or out-of-range rows are skipped and counted instead of raised.
    """
    path = Path(path)
    groups: dict[tuple[str, str], RawTrip] = {}
    n_parsed = n_rejected = 0
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise EmptyFile(f"{path}: empty file")
        header = [h.strip() for h in header]
        missing = [c for c in CSV_COLUMNS if c not in header]
        if missing:
            raise MissingColumn(f"{path}: missing column(s) {', '.join(missing)}")
        idx = [header.index(c) for c in CSV_COLUMNS]
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                driver, trip, t_raw, s_raw, b_raw = (row[i].strip() for i in idx)
                t_f = float(t_raw)
                if t_f != int(t_f):
                    raise OutOfRangeValue(row_no, f"timestamp {t_raw} is not integral")
                rec = GpsRecord(driver, trip, int(t_f), float(s_raw), float(b_raw))
                _check_row(row_no, rec.speed, rec.bearing)
                group = groups.setdefault((driver, trip), RawTrip(driver, trip))
                if group.records and rec.t <= group.records[-1].t:
                    raise NonMonotonicTimestamp(row_no)
            except (ValueError, IndexError, ValidationError) as exc:
                if strict:
                    if isinstance(exc, ValidationError):
                        raise
                    raise OutOfRangeValue(row_no, f"unparseable row: {exc}") from exc
                n_rejected += 1
                continue
            group.records.append(rec)
            n_parsed += 1
    if n_parsed == 0:
        raise EmptyFile(f"{path}: no data rows")
    trips = [groups[k] for k in sorted(groups)]
    log.info("parsed %d rows (%d rejected) into %d trips", n_parsed, n_rejected, len(trips))
    return ParseResult(trips, n_parsed, n_rejected)


def wrap_delta(delta):
    """Wrap a bearing difference into (-180, 180]."""
    w = np.mod(np.asarray(delta, dtype=float) + 180.0, 360.0) - 180.0
    return np.where(w == -180.0, 180.0, w)


def split_on_gaps(records: Sequence[GpsRecord], max_gap: int = DEFAULT_MAX_GAP) -> list[list[GpsRecord]]:
    """Split time-sorted records into 1 Hz runs.

    Gaps of 2..max_gap seconds are filled (linear speed, shortest-arc bearing);
    larger gaps start a new run. Runs shorter than 3 points are dropped.
    """
    runs: list[list[GpsRecord]] = []
    cur: list[GpsRecord] = []
    for rec in records:
        if cur:
            prev = cur[-1]
            gap = rec.t - prev.t
            if gap > max_gap or gap < 1:
                runs.append(cur)
                cur = []
            elif gap > 1:
                turn = float(wrap_delta(rec.bearing - prev.bearing))
                for k in range(1, gap):
                    frac = k / gap
                    speed = prev.speed + frac * (rec.speed - prev.speed)
                    bearing = (prev.bearing + frac * turn) % 360.0
                    cur.append(GpsRecord(rec.driver_id, rec.trip_id, prev.t + k, speed, bearing))
        cur.append(rec)
    if cur:
        runs.append(cur)
    return [r for r in runs if len(r) >= 3]


def derive_kinematics(run: Sequence[GpsRecord], trip_id: str | None = None) -> Trip:
    """Speed/bearing derivatives at 1 Hz.

    ``a`` and ``ba`` are defined from index 1, ``j`` and ``bj`` from index 2;
    the underivable leading entries are zero.
    """
    if len(run) < 3:
        raise TooShort(f"run of {len(run)} points; need >= 3")
    v = np.array([r.speed for r in run], dtype=float)
    b = np.array([r.bearing for r in run], dtype=float)
    n = len(v)
    a = np.zeros(n)
    j = np.zeros(n)
    db = np.zeros(n)
    ba = np.zeros(n)
    bj = np.zeros(n)
    a[1:] = np.diff(v)
    j[2:] = np.diff(a[1:])
    db[1:] = wrap_delta(np.diff(b))
    ba[1:] = np.abs(db[1:])
    bj[2:] = np.abs(np.diff(ba[1:]))
    points = np.column_stack([v, a, j, b, ba, bj])
    first = run[0]
    return Trip(first.driver_id, trip_id or first.trip_id, points, db)


def prepare_trips(
    raw: Iterable[RawTrip],
    max_gap: int = DEFAULT_MAX_GAP,
    min_trip_secs: int = 0,
) -> list[Trip]:
    """Split every raw trip on gaps and derive kinematics for each run."""
    trips = []
    for rt in raw:
        runs = split_on_gaps(rt.records, max_gap)
        for k, run in enumerate(runs):
            if len(run) < min_trip_secs:
                log.info("dropping %s/%s run %d: %d s < %d s", rt.driver_id, rt.trip_id, k, len(run), min_trip_secs)
                continue
            tid = rt.trip_id if len(runs) == 1 else f"{rt.trip_id}.{k}"
            trips.append(derive_kinematics(run, tid))
    return trips


def write_trips_jsonl(trips: Iterable[Trip], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for trip in trips:
            fh.write(json.dumps(trip.to_json(), separators=(",", ":")))
            fh.write("\n")


def read_trips_jsonl(path: str | Path) -> list[Trip]:
    trips = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                trips.append(Trip.from_json(json.loads(line)))
    return trips


DESCRIBE_ROWS = ("count", "mean", "std", "min", "25%", "50%", "75%", "max")


def describe_fleet(trips: Sequence[Trip]) -> dict[str, dict[str, float]]:
    """Descriptive statistics per signal over all points of all trips.

    Returns ``{statistic: {signal_name: value}}`` with population std and
    linearly interpolated quartiles.
    """
    if not trips:
        raise EmptyFleet("no trips to describe")
    data = np.concatenate([t.points for t in trips], axis=0)
    if len(data) == 0:
        raise EmptyFleet("trips contain no points")
    q25, q50, q75 = np.percentile(data, [25, 50, 75], axis=0)
    cols = {
        "count": np.full(6, float(len(data))),
        "mean": data.mean(axis=0),
        "std": data.std(axis=0),
        "min": data.min(axis=0),
        "25%": q25,
        "50%": q50,
        "75%": q75,
        "max": data.max(axis=0),
    }
    return {stat: dict(zip(SIGNAL_NAMES, map(float, vals))) for stat, vals in cols.items()}


def format_description(table: dict[str, dict[str, float]]) -> str:
    """Render a describe_fleet table as CSV text."""
    lines = ["stat," + ",".join(SIGNAL_NAMES)]
    for stat in DESCRIBE_ROWS:
        row = table[stat]
        lines.append(stat + "," + ",".join(f"{row[s]:.6g}" for s in SIGNAL_NAMES))
    return "\n".join(lines) + "\n"
