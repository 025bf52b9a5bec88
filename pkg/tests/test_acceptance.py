"""End-to-end acceptance checks, one test per criterion.

Each test appends a PASS/FAIL line that is printed in the pytest terminal
summary (and echoed immediately when output capture is off). The synthetic
fleet runs are long (tens of minutes on one CPU core in total).
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from drivestyle import model as mdl
from drivestyle import synth
from drivestyle.cli import main as cli_main
from drivestyle.config import build_config
from drivestyle.ingest import describe_fleet, parse_fleet_csv, prepare_trips
from drivestyle.patterns import (
    EncodingConfig,
    apply_scaler,
    fit_scaler,
    ms_matrix,
    st_matrix,
    transition_intensity,
)
from drivestyle.train_eval import (
    TrainConfig,
    build_dataset,
    evaluate_dataset,
    train,
)
from drivestyle.windowing import WindowConfig, segment_bounds

SEDAN_CSV = Path(__file__).resolve().parent.parent / "data" / "sedan_fleet.csv"


def record(criterion, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


@pytest.fixture(scope="module")
def fleets(tmp_path_factory):
    d = tmp_path_factory.mktemp("fleets")
    out = {}
    for name, spec in synth.preset_fleets().items():
        path = d / f"{name}.csv"
        synth.write_fleet(spec, path)
        out[name] = path
    return out


def trips_of(path):
    return prepare_trips(parse_fleet_csv(path).trips)


# -- 1 -------------------------------------------------------------------------

def test_criterion_1_gradient_check():
    t0 = time.perf_counter()
    reports = {}
    for cell in ("gru", "lstm"):
        for residual in (True, False):
            for decoder in (True, False):
                reports[(cell, residual, decoder)] = mdl.check_model_gradients(
                    cell, residual, decoder, seq_len=3, feature_dim=6, hidden=5, n_classes=3,
                    eps=1e-5, tolerance=1e-4)
    secs = time.perf_counter() - t0
    worst = max(r.max_rel_error for r in reports.values())
    ok = all(r.passed for r in reports.values()) and worst < 1e-4 and secs < 60
    record(1, ok, f"8 variants, max relative error {worst:.2e} (< 1e-4), {secs:.1f}s (< 60s)")
    assert ok


# -- 2 -------------------------------------------------------------------------

def _st_brute(states, v, b):
    cells = np.zeros((9, 9))
    for i in range(1, 10):
        for j in range(1, 10):
            vals = [math.hypot(v[k] - v[k + 1], b[k] - b[k + 1]) + 1
                    for k in range(len(states) - 1) if states[k] == i and states[k + 1] == j]
            if vals:
                cells[i - 1, j - 1] = sum(vals) / len(vals)
    return cells


def _ms_brute(points):
    out = np.zeros((6, 7))
    for k in range(6):
        s = sorted(points[:, k])
        n = len(s)

        def q(p):
            pos = p * (n - 1)
            lo = int(pos)
            return s[lo] + (pos - lo) * (s[min(lo + 1, n - 1)] - s[lo])

        mean = sum(s) / n
        out[k] = [mean, s[0], s[-1], q(0.25), q(0.5), q(0.75), math.sqrt(sum((x - mean) ** 2 for x in s) / n)]
    return out


def test_criterion_2_encoding_oracles():
    rng = np.random.default_rng(2024)
    st_err = ms_err = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 12))
        states = rng.integers(1, 10, n)
        v, b = rng.uniform(0, 130, n), rng.uniform(0, 360, n)
        st_err = max(st_err, np.abs(st_matrix(states, v, b).cells - _st_brute(states, v, b)).max())
        pts = rng.normal(0, 40, (n, 6))
        ms_err = max(ms_err, np.abs(ms_matrix(pts) - _ms_brute(pts)).max())
    intensity = transition_intensity((10, 0, 0, 90), (13, 0, 0, 94))
    q = ms_matrix(np.tile(np.array([1.0, 2.0, 3.0, 4.0])[:, None], (1, 6)))[0]
    exact = intensity == 6.0 and (q[3], q[4], q[5]) == (1.75, 2.5, 3.25)
    ok = st_err <= 1e-12 and ms_err <= 1e-12 and exact
    record(2, ok, f"ST max error {st_err:.1e}, MS max error {ms_err:.1e} over 1000 segments; "
                  f"3-4-5 intensity {intensity}; quartiles {q[3]}/{q[4]}/{q[5]}")
    assert ok


# -- 3 -------------------------------------------------------------------------

def test_criterion_3_windowing_counts():
    cases = [(60, 10), (60, 15), (60, 20), (60, 30), (256, 16)]
    got = {c: len(segment_bounds(WindowConfig(*c))) for c in cases}
    ok = all(n == 2 * ls // lf for (ls, lf), n in got.items()) and got[(256, 16)] == 32
    record(3, ok, ", ".join(f"({ls},{lf})->{n}" for (ls, lf), n in got.items()))
    assert ok


# -- 4 -------------------------------------------------------------------------

def test_criterion_4_overfit_sanity(fleets):
    trips = trips_of(fleets["separable5"])
    ds = build_dataset([t for t in trips if t.driver_id in ("D01", "D02", "D03")], EncodingConfig())
    rng = np.random.default_rng(4)
    idx = np.concatenate([rng.choice(np.flatnonzero(ds.y == c), k, replace=False) for c, k in enumerate((7, 7, 6))])
    X = apply_scaler(fit_scaler(ds.X[idx]), ds.X[idx])
    y = ds.y[idx]
    cfg = mdl.ModelConfig("gru", 100, True, True, 0.15, 3, X.shape[1], X.shape[2])
    t0 = time.perf_counter()
    # no early stopping: the question is whether the network can fit the training data at all
    _, history = train(mdl.build_model(cfg, 0), cfg, X, y, TrainConfig(max_iterations=1500, patience=1500))
    secs = time.perf_counter() - t0
    hit = next((h["iteration"] for h in history if h["train_top1"] == 1.0), None)
    ok = hit is not None and secs < 120
    record(4, ok, f"20 samples / 3 classes, 100% training top-1 first at iteration {hit}, run {secs:.1f}s (< 120s)")
    assert ok


# -- 5 -------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_5_separable5(fleets, tmp_path):
    d = tmp_path
    t0 = time.perf_counter()
    assert cli_main(["synth", "--preset", "separable5", "--out", str(d / "fleet.csv")]) == 0
    assert cli_main(["prep", "--input", str(d / "fleet.csv"), "--out", str(d / "trips.jsonl")]) == 0
    assert cli_main(["encode", "--input", str(d / "trips.jsonl"), "--out", str(d / "enc.jsonl")]) == 0
    assert cli_main(["train", "--input", str(d / "enc.jsonl"), "--model-out", str(d / "model.json")]) == 0
    t_eval = time.perf_counter()
    assert cli_main(["eval", "--input", str(d / "enc.jsonl"), "--out", str(d / "report.json"),
                     "--csv", str(d / "folds.csv")]) == 0
    secs = time.perf_counter() - t0
    import json

    rep = json.loads((d / "report.json").read_text())
    ok_main = rep["n_folds"] == 25 and rep["top1_mean"] >= 0.80 and rep["top3_mean"] >= 0.95 and secs < 900
    record(5, ok_main, f"separable5 5x5 CV top1 {rep['top1_mean']:.3f} ± {rep['top1_ci95']:.3f} (>= 0.80), "
                       f"top3 {rep['top3_mean']:.3f} (>= 0.95), pipeline {secs:.0f}s "
                       f"(eval {time.perf_counter() - t_eval:.0f}s; < 900s)")

    run = build_config()
    ds = build_dataset(trips_of(d / "fleet.csv"), run.encoding_config())
    shuffled = evaluate_dataset(ds, run, shuffle=True)
    ok_chance = abs(shuffled.top1_mean - 0.20) <= 0.05
    record(5, ok_chance, f"label-shuffled control top1 {shuffled.top1_mean:.3f} (0.20 ± 0.05)")
    assert ok_main and ok_chance


# -- 6 -------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_6_ablation_direction(fleets):
    """Soft criterion: reported, not asserted."""
    run = build_config()
    ds = build_dataset(trips_of(fleets["separable10"]), run.encoding_config())
    variants = {
        "plain": {"model.residual": False, "model.decoder": False},
        "residual": {"model.residual": True, "model.decoder": False},
        "full": {"model.residual": True, "model.decoder": True},
    }
    per_repeat = {}
    means = {}
    for name, overrides in variants.items():
        rep = evaluate_dataset(ds, build_config({}, overrides))
        means[name] = rep.top1_mean
        per_repeat[name] = [np.mean([f.top1 for f in rep.folds if f.repeat == r]) for r in range(5)]
    ordered = sum(
        per_repeat["plain"][r] <= per_repeat["residual"][r] <= per_repeat["full"][r] for r in range(5))
    ok = ordered >= 4
    record(6, ok, f"separable10 top1 plain {means['plain']:.3f}, residual {means['residual']:.3f}, "
                  f"full {means['full']:.3f}; monotone in {ordered}/5 repeats (soft, needs >= 4)")
    test_criterion_6_ablation_direction.separable10_top1 = means["full"]
    if not ok:
        import warnings

        warnings.warn(f"ablation ordering held in only {ordered}/5 repeats")


@pytest.mark.slow
def test_hard10_between_chance_and_separable10(fleets):
    run = build_config()
    ds = build_dataset(trips_of(fleets["hard10"]), run.encoding_config())
    rep = evaluate_dataset(ds, run)
    ref = getattr(test_criterion_6_ablation_direction, "separable10_top1", None)
    if ref is None:
        ref = evaluate_dataset(build_dataset(trips_of(fleets["separable10"]), run.encoding_config()), run).top1_mean
    ok = 0.10 < rep.top1_mean < ref
    record("synth/hard10", ok, f"hard10 top1 {rep.top1_mean:.3f}, strictly between chance 0.10 and separable10 {ref:.3f}")
    assert ok


# -- 7 -------------------------------------------------------------------------

def test_criterion_7_loss_identities(fleets):
    run = build_config()
    ds = build_dataset(trips_of(fleets["separable10"]), run.encoding_config())
    X = apply_scaler(fit_scaler(ds.X), ds.X)
    batch, yb = X[:64], ds.y[:64]

    cfg0 = run.net_config(10, 12, 123)
    cfg0.lam = 0.0
    params = mdl.build_model(cfg0, 0)
    _, grads = mdl.compute_gradients(params, cfg0, batch, yb)
    dec_zero = all(not g.any() for k, g in grads.items() if k.startswith("dec"))

    cfg1 = build_config({}, {"model.lam": 1.0}).net_config(10, 12, 123)
    l_u, l_c, l_r = mdl.unified_loss(mdl.build_model(cfg1, 0), cfg1, batch, yb)
    hard = cfg1.decoder and cfg1.lam == 1.0 and abs(l_u - (l_c + l_r)) < 1e-12

    dev = []
    for seed in range(10):
        _, l_c0, _ = mdl.unified_loss(mdl.build_model(cfg0, seed), cfg0, X, ds.y)
        dev.append(abs(l_c0 - math.log(10)))
    ok = dec_zero and hard and max(dev) <= 0.3
    record(7, ok, f"lambda=0 decoder grads all zero: {dec_zero}; lambda=1 L_u = L_c + L_r: {hard}; "
                  f"untrained |L_c - ln 10| max over 10 seeds {max(dev):.3f} (<= 0.3)")
    assert ok


# -- 8 -------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_8_determinism(fleets, tmp_path):
    enc = tmp_path / "enc.jsonl"
    assert cli_main(["encode", "--input", str(fleets["separable5"]), "--out", str(enc)]) == 0
    args = ["eval", "--input", str(enc), "--jobs", "1", "--seed", "11"]
    assert cli_main([*args, "--out", str(tmp_path / "a.json")]) == 0
    assert cli_main([*args, "--out", str(tmp_path / "b.json")]) == 0
    same = (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    record(8, same, "two full eval runs (separable5, 5x5 CV, seed 11, --jobs 1) byte-identical")
    assert same


# -- 9 -------------------------------------------------------------------------

def test_criterion_9_sedan_extract():
    if not SEDAN_CSV.exists():
        record(9, True, f"SKIPPED (non-gating): {SEDAN_CSV.name} not supplied")
        pytest.skip("sedan extract not supplied")
    trips = trips_of(SEDAN_CSV)
    table = describe_fleet(trips)
    drivers = sorted({t.driver_id for t in trips})
    run = build_config({}, {"model.cell": "lstm"})
    results = {}
    for n, target in ((5, 0.6213), (10, 0.5170)):
        subset = [t for t in trips if t.driver_id in drivers[:n]]
        rep = evaluate_dataset(build_dataset(subset, run.encoding_config()), run)
        results[n] = (rep.top1_mean, target)
    within = all(abs(got - target) <= 0.06 for got, target in results.values())
    record(9, within, f"sedan points {table['count']['speed']:.0f}; " + "; ".join(
        f"{n} drivers top1 {got:.3f} vs {target:.4f} ± 0.06" for n, (got, target) in results.items())
        + " (non-gating, deviations documented)")
