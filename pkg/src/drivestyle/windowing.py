"""Fixed-length subtrajectories and their overlapping kinematic segments."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import InvalidWindowConfig
from .ingest import Trip

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class WindowConfig:
    ls: int = 60
    lf: int = 10

    def __post_init__(self):
        problems = []
        if self.lf < 2:
            problems.append(f"lf={self.lf} must be >= 2")
        if self.lf >= self.ls:
            problems.append(f"lf={self.lf} must be < ls={self.ls}")
        if problems:
            raise InvalidWindowConfig("; ".join(problems))

    @property
    def n_segments(self) -> int:
        # exact when lf divides 2*ls; odd or non-dividing lf (15, 25) floors
        return 2 * self.ls // self.lf


@dataclass
class Subtrajectory:
    driver_id: str
    points: np.ndarray  # (ls, 6)
    signed_db: np.ndarray  # (ls,)
    trip_id: str = ""
    start: int = 0


class Segment(NamedTuple):
    start: int
    len: int

    @property
    def stop(self) -> int:
        return self.start + self.len


def slice_subtrajectories(trip: Trip, cfg: WindowConfig) -> list[Subtrajectory]:
    """Non-overlapping windows of exactly ``cfg.ls`` points; the remainder is dropped."""
    n = len(trip) // cfg.ls
    if n == 0:
        log.info("trip %s/%s too short (%d < %d)", trip.driver_id, trip.trip_id, len(trip), cfg.ls)
    return [
        Subtrajectory(
            trip.driver_id,
            trip.points[k * cfg.ls:(k + 1) * cfg.ls],
            trip.db[k * cfg.ls:(k + 1) * cfg.ls],
            trip.trip_id,
            k * cfg.ls,
        )
        for k in range(n)
    ]


def segment_bounds(cfg: WindowConfig) -> list[Segment]:
    """``2*ls/lf`` segments with stride ``lf/2``; the last one is truncated at ``ls``.

    Odd ``lf`` rounds each start down, so strides alternate between
    ``lf//2`` and ``lf//2 + 1``.
    """
    starts = [k * cfg.lf // 2 for k in range(cfg.n_segments)]
    return [Segment(s, min(cfg.lf, cfg.ls - s)) for s in starts]


def slice_segments(sub: Subtrajectory, cfg: WindowConfig) -> list[Segment]:
    if len(sub.points) != cfg.ls:
        raise InvalidWindowConfig(f"subtrajectory has {len(sub.points)} points, expected {cfg.ls}")
    return segment_bounds(cfg)
