import numpy as np
import pytest

from drivestyle import synth
from drivestyle.ingest import GpsRecord, derive_kinematics


def make_records(speeds, bearings, driver="A", trip="T1", t0=0, times=None):
    times = range(t0, t0 + len(speeds)) if times is None else times
    return [GpsRecord(driver, trip, int(t), float(v), float(b)) for t, v, b in zip(times, speeds, bearings)]


def make_trip(speeds, bearings, driver="A", trip="T1"):
    return derive_kinematics(make_records(speeds, bearings, driver, trip))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_fleet_csv(tmp_path_factory):
    """Three quick drivers, two 3-minute trips each."""
    spec = synth.FleetSpec(
        (
            synth.ArchetypeSpec(30, sigma_a=0.5, event_rate=2, turn_sharpness=4, persistence=0.6),
            synth.ArchetypeSpec(60, sigma_a=1.5, event_rate=4, turn_sharpness=9, persistence=0.7),
            synth.ArchetypeSpec(90, sigma_a=2.5, event_rate=6, turn_sharpness=14, persistence=0.8),
        ),
        trips_per_driver=2,
        trip_secs=180,
        seed=3,
    )
    path = tmp_path_factory.mktemp("fleet") / "fleet.csv"
    synth.write_fleet(spec, path)
    return path


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
