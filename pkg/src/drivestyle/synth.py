"""Deterministic synthetic fleets with known driver archetypes.

Each driver runs a latent accelerate / cruise / brake regime chain. Regime
pushes scale with the archetype's aggressiveness, and a mean-reverting pull
keeps speed near the trip's cruise target. Leaving cruise, the driver tends to
accelerate when below the target and brake when above it, so aggressive
archetypes still average their cruise speed. Independent turn events ramp the
bearing at the archetype's sharpness.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidSpec
from .ingest import CSV_COLUMNS

MAX_SPEED = 130.0
PULL = 0.1  # per-second mean reversion toward the cruise target
STEER = 5.0  # km/h: logistic scale of the accelerate-vs-brake choice around the target


@dataclass(frozen=True)
class ArchetypeSpec:
    cruise_mean: float
    cruise_std: float = 1.0
    sigma_a: float = 1.0  # km/h/s
    event_rate: float = 3.0  # events per minute (longitudinal and turn each)
    turn_sharpness: float = 8.0  # deg/s
    persistence: float = 0.7

    def problems(self) -> list[str]:
        out = []
        for name in ("cruise_mean", "cruise_std", "sigma_a", "event_rate", "turn_sharpness"):
            if getattr(self, name) < 0:
                out.append(f"{name} must be >= 0")
        if not 0.0 < self.persistence < 1.0:
            out.append("persistence must lie in (0, 1)")
        if self.event_rate > 60:
            out.append("event_rate must be <= 60 per minute")
        return out


@dataclass(frozen=True)
class FleetSpec:
    archetypes: tuple[ArchetypeSpec, ...]
    trips_per_driver: int = 3
    trip_secs: int = 600
    seed: int = 0
    min_trip_secs: int = 60

    def validate(self) -> None:
        problems = []
        if len(self.archetypes) < 2:
            problems.append("need at least 2 archetypes")
        if self.trips_per_driver < 1:
            problems.append("trips_per_driver must be >= 1")
        if self.trip_secs < self.min_trip_secs:
            problems.append(f"trip_secs must be >= {self.min_trip_secs}")
        for k, a in enumerate(self.archetypes):
            problems += [f"archetype {k}: {p}" for p in a.problems()]
        if problems:
            raise InvalidSpec("; ".join(problems))


def driver_id(k: int) -> str:
    return f"D{k + 1:02d}"


def simulate_trip(arch: ArchetypeSpec, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """``(speed, bearing)`` arrays of length ``n`` at 1 Hz."""
    target = float(np.clip(arch.cruise_mean + arch.cruise_std * rng.standard_normal(), 0.0, MAX_SPEED))
    p_event = arch.event_rate / 60.0
    speed = np.empty(n)
    bearing = np.empty(n)
    v = target
    b = rng.uniform(0.0, 360.0)
    regime = 0  # 0 cruise, 1 accelerate, 2 brake
    turn_left = 0
    turn_rate = 0.0
    for t in range(n):
        speed[t] = v
        bearing[t] = b
        if regime == 0:
            if rng.random() < p_event:
                p_acc = 1.0 / (1.0 + np.exp((v - target) / STEER))
                regime = 1 if rng.random() < p_acc else 2
        elif rng.random() >= arch.persistence:
            regime = 0
        push = arch.sigma_a * (0.5 + abs(rng.standard_normal()))
        step = PULL * (target - v) + 0.2 * arch.sigma_a * rng.standard_normal()
        if regime == 1:
            step += push
        elif regime == 2:
            step -= push
        v = min(max(v + step, 0.0), MAX_SPEED)
        if turn_left == 0 and rng.random() < p_event:
            turn_left = int(rng.integers(3, 9))
            turn_rate = arch.turn_sharpness * (0.7 + 0.6 * rng.random()) * (1 if rng.random() < 0.5 else -1)
        if turn_left > 0:
            b = (b + turn_rate) % 360.0
            turn_left -= 1
    return speed, bearing


def generate_fleet(spec: FleetSpec) -> str:
    """CSV text (ingest schema) for every driver and trip in ``spec``."""
    spec.validate()
    out = io.StringIO()
    out.write(",".join(CSV_COLUMNS) + "\n")
    for d, arch in enumerate(spec.archetypes):
        for k in range(spec.trips_per_driver):
            rng = np.random.default_rng([spec.seed, d, k])
            speed, bearing = simulate_trip(arch, spec.trip_secs, rng)
            did = driver_id(d)
            for t, (v, b) in enumerate(zip(speed, bearing)):
                b_txt = f"{b:.2f}"
                if b_txt == "360.00":
                    b_txt = "0.00"
                out.write(f"{did},T{k + 1},{t},{v:.2f},{b_txt}\n")
    return out.getvalue()


def write_fleet(spec: FleetSpec, path: str | Path) -> None:
    Path(path).write_text(generate_fleet(spec), encoding="utf-8")


def _ladder(n, cruise0, cruise_step, sa0, sa_step, rate0, rate_step, sharp0, sharp_step, rho0, rho_step, cruise_std):
    return tuple(
        ArchetypeSpec(
            cruise_mean=cruise0 + k * cruise_step,
            cruise_std=cruise_std,
            sigma_a=round(sa0 + k * sa_step, 4),
            event_rate=round(rate0 + k * rate_step, 4),
            turn_sharpness=round(sharp0 + k * sharp_step, 4),
            persistence=round(rho0 + k * rho_step, 4),
        )
        for k in range(n)
    )


def preset_fleets(seed: int = 0) -> dict[str, FleetSpec]:
    """Named fleets: two well separated, one deliberately overlapping."""
    return {
        "separable5": FleetSpec(_ladder(5, 30, 15, 0.5, 0.5, 2.0, 1.0, 5.0, 2.5, 0.60, 0.05, 1.0), 3, 600, seed),
        "separable10": FleetSpec(_ladder(10, 15, 10, 0.5, 0.5, 1.5, 0.5, 4.0, 1.5, 0.55, 0.02, 1.0), 3, 600, seed),
        "hard10": FleetSpec(_ladder(10, 48, 2, 1.2, 0.1, 3.0, 0.1, 7.0, 0.3, 0.65, 0.01, 3.0), 3, 600, seed),
    }
