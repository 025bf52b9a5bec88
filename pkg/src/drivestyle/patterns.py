"""Segment-level driving patterns.

Two encodings per kinematic segment:

* MS: 6 signals x 7 descriptive statistics (42 values).
* ST: 9x9 matrix of average transition intensities between the nine
  longitudinal x lateral driving states (81 values).

FUSED concatenates them (123 values). A subtrajectory becomes a ``(T, M)``
sequence, one row per segment.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyTrainingSet, ValidationError
from .windowing import Subtrajectory, WindowConfig, segment_bounds

MODES = ("MS", "ST", "FUSED")
MODE_DIMS = {"MS": 42, "ST": 81, "FUSED": 123}
MS_DIM = 42
STAT_NAMES = ("mean", "min", "max", "q25", "q50", "q75", "std")

# longitudinal: accel, decel, constant; lateral: right, left, straight
STATE_NAMES = {
    1: "accelerate/right",
    2: "accelerate/left",
    3: "accelerate/straight",
    4: "decelerate/right",
    5: "decelerate/left",
    6: "decelerate/straight",
    7: "constant/right",
    8: "constant/left",
    9: "constant/straight",
}


def normalize_mode(mode: str) -> str:
    m = mode.upper().replace(" ", "")
    if m in ("MS+ST", "ST+MS"):
        m = "FUSED"
    if m not in MODES:
        raise ValidationError(f"unknown pattern mode {mode!r}; expected one of {MODES}")
    return m


@dataclass(frozen=True)
class Thresholds:
    dv: float = 1.0  # km/h
    db: float = 1.0  # degrees

    def __post_init__(self):
        if not self.dv > 0:
            raise ValidationError(f"dv must be > 0, got {self.dv}")
        if not self.db >= 0:
            raise ValidationError(f"db must be >= 0, got {self.db}")


@dataclass(frozen=True)
class EncodingConfig:
    window: WindowConfig = WindowConfig()
    thresholds: Thresholds = Thresholds()
    mode: str = "FUSED"
    wrap_st_bearing: bool = False

    def __post_init__(self):
        object.__setattr__(self, "mode", normalize_mode(self.mode))

    @property
    def feature_dim(self) -> int:
        return MODE_DIMS[self.mode]

    def to_json(self) -> dict:
        return {
            "ls": self.window.ls,
            "lf": self.window.lf,
            "dv": self.thresholds.dv,
            "db": self.thresholds.db,
            "mode": self.mode,
            "wrap_st_bearing": self.wrap_st_bearing,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "EncodingConfig":
        return cls(
            WindowConfig(int(obj["ls"]), int(obj["lf"])),
            Thresholds(float(obj["dv"]), float(obj["db"])),
            obj["mode"],
            bool(obj.get("wrap_st_bearing", False)),
        )


def classify_state(v_prev: float, v_cur: float, signed_db: float, dv: float = 1.0, db: float = 1.0) -> int:
    """Driving state index 1..9 for one step."""
    delta = v_cur - v_prev
    if abs(delta) < dv:
        lon = 2
    elif delta > 0:
        lon = 0
    else:
        lon = 1
    if signed_db > db:
        lat = 0
    elif signed_db < -db:
        lat = 1
    else:
        lat = 2
    return 3 * lon + lat + 1


def _states_array(v: np.ndarray, signed_db: np.ndarray, th: Thresholds) -> np.ndarray:
    """Vectorized classify_state; entry 0 is 0 (no state)."""
    delta = np.diff(v)
    lon = np.where(np.abs(delta) < th.dv, 2, np.where(delta > 0, 0, 1))
    sdb = signed_db[1:]
    lat = np.where(sdb > th.db, 0, np.where(sdb < -th.db, 1, 2))
    return np.concatenate([[0], 3 * lon + lat + 1]).astype(int)


def state_sequence(sub: Subtrajectory, thresholds: Thresholds = Thresholds()) -> list[tuple[int, int]]:
    """``(index, state)`` for indices 1..L_s-1; index 0 has no predecessor."""
    states = _states_array(sub.points[:, 0], sub.signed_db, thresholds)
    return [(i, int(states[i])) for i in range(1, len(states))]


def transition_intensity(src, dst, wrap_bearing: bool = False) -> float:
    """Speed/bearing distance between two points plus the unit frequency term."""
    dv = src[0] - dst[0]
    db = src[3] - dst[3]
    if wrap_bearing:
        db = _wrap(db)
    return float(np.sqrt(dv * dv + db * db) + 1.0)


def _wrap(x):
    w = np.mod(x + 180.0, 360.0) - 180.0
    return np.where(w == -180.0, 180.0, w)


@dataclass
class StMatrix:
    cells: np.ndarray  # (9, 9) float
    counts: np.ndarray  # (9, 9) int
    degenerate: bool = False


def st_matrix(states: Sequence[int], v: Sequence[float], b: Sequence[float], wrap_bearing: bool = False) -> StMatrix:
    """Average transition intensity per ordered state pair.

    ``states[k]`` belongs to the point with speed ``v[k]`` and bearing ``b[k]``;
    consecutive entries form the transitions.
    """
    states = np.asarray(states, dtype=int)
    cells = np.zeros((9, 9))
    counts = np.zeros((9, 9), dtype=int)
    if len(states) < 2:
        return StMatrix(cells, counts, degenerate=True)
    v = np.asarray(v, dtype=float)
    b = np.asarray(b, dtype=float)
    db = np.diff(b)
    if wrap_bearing:
        db = _wrap(db)
    intensity = np.sqrt(np.diff(v) ** 2 + db ** 2) + 1.0
    src = states[:-1] - 1
    dst = states[1:] - 1
    np.add.at(cells, (src, dst), intensity)
    np.add.at(counts, (src, dst), 1)
    nz = counts > 0
    cells[nz] /= counts[nz]
    return StMatrix(cells, counts)


def ms_matrix(points: np.ndarray) -> np.ndarray:
    """6x7 statistics matrix: rows are signals, columns STAT_NAMES."""
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[0] < 1:
        raise ValidationError("ms_matrix needs at least one point")
    q25, q50, q75 = np.percentile(points, [25, 50, 75], axis=0)
    return np.column_stack([
        points.mean(axis=0),
        points.min(axis=0),
        points.max(axis=0),
        q25,
        q50,
        q75,
        points.std(axis=0),
    ])


@dataclass
class PatternSequence:
    x: np.ndarray  # (T, M)
    y: int
    driver_id: str
    mode: str


def encode_subtrajectory(sub: Subtrajectory, enc: EncodingConfig = EncodingConfig()) -> np.ndarray:
    """Unscaled ``(T, M)`` pattern sequence for one subtrajectory."""
    cfg = enc.window
    if len(sub.points) != cfg.ls:
        raise ValidationError(f"subtrajectory has {len(sub.points)} points, expected {cfg.ls}")
    pts = sub.points
    states = _states_array(pts[:, 0], sub.signed_db, enc.thresholds)
    rows = []
    for seg in segment_bounds(cfg):
        parts = []
        if enc.mode in ("MS", "FUSED"):
            parts.append(ms_matrix(pts[seg.start:seg.stop]).ravel())
        if enc.mode in ("ST", "FUSED"):
            lo = max(seg.start, 1)
            st = st_matrix(states[lo:seg.stop], pts[lo:seg.stop, 0], pts[lo:seg.stop, 3], enc.wrap_st_bearing)
            parts.append(st.cells.ravel())
        rows.append(np.concatenate(parts))
    return np.vstack(rows)


def encode_subtrajectories(
    subs: Iterable[Subtrajectory],
    labels: dict[str, int],
    enc: EncodingConfig = EncodingConfig(),
) -> list[PatternSequence]:
    return [PatternSequence(encode_subtrajectory(s, enc), labels[s.driver_id], s.driver_id, enc.mode) for s in subs]


@dataclass
class FeatureScaler:
    """Per-dimension min-max scaler; ``passthrough`` dims are left untouched."""

    min: np.ndarray
    max: np.ndarray
    passthrough: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return len(self.min)

    def to_json(self) -> dict:
        out = {"min": self.min.tolist(), "max": self.max.tolist()}
        if self.passthrough is not None:
            out["passthrough"] = self.passthrough.astype(bool).tolist()
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "FeatureScaler":
        pt = obj.get("passthrough")
        return cls(
            np.asarray(obj["min"], dtype=float),
            np.asarray(obj["max"], dtype=float),
            None if pt is None else np.asarray(pt, dtype=bool),
        )

    def save(self, path: str | Path, **extra) -> None:
        Path(path).write_text(json.dumps({**self.to_json(), **extra}))

    @classmethod
    def load(cls, path: str | Path) -> "FeatureScaler":
        return cls.from_json(json.loads(Path(path).read_text()))


def _stack(seqs) -> np.ndarray:
    if isinstance(seqs, np.ndarray):
        return seqs.reshape(-1, seqs.shape[-1])
    arrs = [s.x if isinstance(s, PatternSequence) else np.asarray(s) for s in seqs]
    if not arrs:
        return np.empty((0, 0))
    return np.concatenate([a.reshape(-1, a.shape[-1]) for a in arrs], axis=0)


def fit_scaler(seqs, mode: str | None = None, st_only: bool = False) -> FeatureScaler:
    """Min/max per feature over every segment of the training sequences.

    With ``st_only`` the MS columns of a FUSED (or MS) input are passed through
    unscaled; ``mode`` is then required to locate them.
    """
    rows = _stack(seqs)
    if rows.size == 0:
        raise EmptyTrainingSet("cannot fit scaler on an empty training set")
    passthrough = None
    if st_only:
        if mode is None:
            raise ValidationError("st_only scaling needs the pattern mode")
        mode = normalize_mode(mode)
        passthrough = np.zeros(rows.shape[1], dtype=bool)
        if mode in ("MS", "FUSED"):
            passthrough[:MS_DIM] = True
    return FeatureScaler(rows.min(axis=0), rows.max(axis=0), passthrough)


def apply_scaler(scaler: FeatureScaler, x: np.ndarray) -> np.ndarray:
    """Scale to [0, 1] with clipping; constant dimensions map to 0."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != scaler.dim:
        raise DimensionMismatch(f"feature dim {x.shape[-1]} != scaler dim {scaler.dim}")
    span = scaler.max - scaler.min
    safe = np.where(span > 0, span, 1.0)
    out = np.where(span > 0, (x - scaler.min) / safe, 0.0)
    out = np.clip(out, 0.0, 1.0)
    if scaler.passthrough is not None:
        out = np.where(scaler.passthrough, x, out)
    return out


def write_encoded_jsonl(seqs: Iterable[PatternSequence], path: str | Path) -> None:
    """One ``{"y", "driver_id", "x"}`` object per line; ``x`` rounded to float32."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for s in seqs:
            x = np.asarray(s.x, dtype=np.float32).tolist()
            fh.write(json.dumps({"y": int(s.y), "driver_id": s.driver_id, "x": x}, separators=(",", ":")))
            fh.write("\n")


def read_encoded_jsonl(path: str | Path, mode: str = "FUSED") -> list[PatternSequence]:
    seqs = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                seqs.append(PatternSequence(np.asarray(obj["x"], dtype=float), int(obj["y"]), str(obj["driver_id"]), mode))
    return seqs
