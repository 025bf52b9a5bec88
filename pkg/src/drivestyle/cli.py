"""Command-line entry point: ``drivestyle <subcommand> ...``.

Stages compose through files: CSV -> trips JSONL -> encoded JSONL -> model
JSON -> metrics JSON/CSV and PNG figures. Exit codes: 0 success, 2 invalid
input or configuration, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import RunConfig, describe_keys, load_config
from .errors import DimensionMismatch, DriveStyleError, ModelFormatError, ValidationError

log = logging.getLogger("drivestyle")

# (flag, dotted key, argparse kwargs)
CONFIG_FLAGS = [
    ("--ls", "window.ls", {"type": int}),
    ("--lf", "window.lf", {"type": int}),
    ("--dv", "thresholds.dv", {"type": float}),
    ("--db", "thresholds.db", {"type": float}),
    ("--mode", "encoding.mode", {"type": lambda s: s.upper().replace("MS+ST", "FUSED")}),
    ("--wrap-st-bearing", "encoding.wrap_st_bearing", {"action": argparse.BooleanOptionalAction}),
    ("--scale-st-only", "encoding.scale_st_only", {"action": argparse.BooleanOptionalAction}),
    ("--max-gap", "prep.max_gap", {"type": int}),
    ("--min-trip-secs", "prep.min_trip_secs", {"type": int}),
    ("--cell", "model.cell", {"type": str.lower}),
    ("--embedding-dim", "model.embedding_dim", {"type": int}),
    ("--residual", "model.residual", {"action": argparse.BooleanOptionalAction}),
    ("--decoder", "model.decoder", {"action": argparse.BooleanOptionalAction}),
    ("--lam", "model.lam", {"type": float}),
    ("--batch-size", "training.batch_size", {"type": int}),
    ("--iterations", "training.max_iterations", {"type": int}),
    ("--val-fraction", "training.val_fraction", {"type": float}),
    ("--patience", "training.patience", {"type": int}),
    ("--eval-every", "training.eval_every", {"type": int}),
    ("--lr", "training.lr", {"type": float}),
    ("--clip-norm", "training.clip_norm", {"type": float}),
    ("--seed", "training.seed", {"type": int}),
    ("--folds", "evaluation.folds", {"type": int}),
    ("--repeats", "evaluation.repeats", {"type": int}),
]


def _config_epilog() -> str:
    flag_of = {key: flag for flag, key, _ in CONFIG_FLAGS}
    lines = ["config keys (JSON path = default; flag):"]
    for key, default, desc in describe_keys():
        flag = flag_of.get(key, "--set")
        lines.append(f"  {key} = {json.dumps(default)}  [{flag}]  {desc}")
    lines.append("Any key can also be set with --set key=value (value parsed as JSON).")
    return "\n".join(lines)


def _add_config_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration")
    g.add_argument("--config", type=Path, help="JSON run configuration")
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    for flag, key, kw in CONFIG_FLAGS:
        g.add_argument(flag, dest=key.replace(".", "__"), default=None, help=f"sets {key}", **kw)


def _run_config(args) -> RunConfig:
    overrides = {}
    for item in args.set:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ValidationError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            overrides[key.strip()] = json.loads(raw)
        except json.JSONDecodeError:
            overrides[key.strip()] = raw
    for _, key, _ in CONFIG_FLAGS:
        value = getattr(args, key.replace(".", "__"))
        if value is not None:
            overrides[key] = value
    return load_config(args.config, overrides)


def _write_json(obj, path: Path | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)


def _first_object(path: Path) -> dict:
    with path.open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                return json.loads(line)
    raise ValidationError(f"{path}: no records")


def _load_trips(path: Path, run: RunConfig):
    """Trips from a raw CSV or a ``prep`` JSONL file."""
    from .ingest import parse_fleet_csv, prepare_trips, read_trips_jsonl

    if path.suffix.lower() == ".csv":
        parsed = parse_fleet_csv(path)
        return prepare_trips(parsed.trips, run.prep.max_gap, run.prep.min_trip_secs)
    return read_trips_jsonl(path)


def _load_dataset(path: Path, run: RunConfig):
    """Dataset from trips (CSV / prep JSONL) or an ``encode`` JSONL file."""
    from .patterns import read_encoded_jsonl
    from .train_eval import Dataset, build_dataset

    if path.suffix.lower() != ".csv" and "x" in _first_object(path):
        enc = run.encoding_config()
        meta = _sidecar(path) or {}
        if "encoding" in meta and meta["encoding"]["mode"] != enc.mode:
            raise DimensionMismatch(
                f"{path} was encoded as {meta['encoding']['mode']}, config asks for {enc.mode}")
        seqs = read_encoded_jsonl(path, enc.mode)
        labels = meta.get("labels")
        ds = Dataset.from_sequences(seqs, labels)
        if ds.X.shape[2] != enc.feature_dim:
            raise DimensionMismatch(
                f"{path}: feature dim {ds.X.shape[2]} does not match mode {enc.mode} ({enc.feature_dim})")
        return ds
    return build_dataset(_load_trips(path, run), run.encoding_config())


def sidecar_path(encoded: Path) -> Path:
    return encoded.with_name(encoded.stem + ".scaler.json")


def _sidecar(encoded: Path) -> dict | None:
    p = sidecar_path(encoded)
    return json.loads(p.read_text()) if p.exists() else None


# -- subcommands ---------------------------------------------------------------

def cmd_synth(args) -> int:
    from .synth import ArchetypeSpec, FleetSpec, preset_fleets, write_fleet

    if args.spec is not None:
        doc = json.loads(args.spec.read_text())
        try:
            spec = FleetSpec(
                tuple(ArchetypeSpec(**a) for a in doc.pop("archetypes")),
                **{k: v for k, v in doc.items()},
            )
        except (TypeError, KeyError) as exc:
            raise ValidationError(f"{args.spec}: bad fleet spec ({exc})") from exc
    else:
        presets = preset_fleets(args.seed)
        if args.preset not in presets:
            raise ValidationError(f"unknown preset {args.preset!r}; choose from {sorted(presets)}")
        spec = presets[args.preset]
    write_fleet(spec, args.out)
    print(f"wrote {len(spec.archetypes)} drivers x {spec.trips_per_driver} trips x {spec.trip_secs} s to {args.out}")
    return 0


def cmd_prep(args) -> int:
    from .ingest import parse_fleet_csv, prepare_trips, write_trips_jsonl

    run = _run_config(args)
    parsed = parse_fleet_csv(args.input, strict=not args.lenient)
    trips = prepare_trips(parsed.trips, run.prep.max_gap, run.prep.min_trip_secs)
    write_trips_jsonl(trips, args.out)
    n_points = sum(len(t) for t in trips)
    print(f"parsed={parsed.n_parsed} rejected={parsed.n_rejected} trips={len(trips)} points={n_points}")
    return 0


def cmd_describe(args) -> int:
    from .ingest import describe_fleet, format_description

    run = _run_config(args)
    trips = _load_trips(args.input, run)
    text = format_description(describe_fleet(trips))
    if args.out is None:
        sys.stdout.write(text)
    else:
        args.out.write_text(text)
    if args.figure is not None:
        from .plotting import plot_signal_histograms

        plot_signal_histograms(trips, args.figure)
    return 0


def cmd_encode(args) -> int:
    from .patterns import fit_scaler, write_encoded_jsonl
    from .train_eval import build_dataset

    run = _run_config(args)
    enc = run.encoding_config()
    ds = build_dataset(_load_trips(args.input, run), enc)
    write_encoded_jsonl(ds.sequences(), args.out)
    scaler = fit_scaler(ds.X, mode=enc.mode, st_only=run.encoding.scale_st_only)
    scaler.save(sidecar_path(args.out), labels=ds.labels, encoding=enc.to_json())
    print(f"encoded {len(ds)} subtrajectories, shape {ds.X.shape[1:]} ({enc.mode})")
    return 0


def cmd_train(args) -> int:
    from .model import build_model, save_model
    from .patterns import apply_scaler, fit_scaler
    from .train_eval import evaluate, train

    run = _run_config(args)
    ds = _load_dataset(args.input, run)
    scaler = fit_scaler(ds.X, mode=ds.mode, st_only=run.encoding.scale_st_only)
    X = apply_scaler(scaler, ds.X)
    mcfg = run.net_config(ds.n_classes, ds.X.shape[1], ds.X.shape[2])
    params = build_model(mcfg, run.training.seed)
    t0 = time.perf_counter()
    best, history = train(params, mcfg, X, ds.y, run.train_config())
    best.scaler = scaler
    best.label_map = list(ds.labels)
    enc = run.encoding_config().to_json()
    enc["scale_st_only"] = run.encoding.scale_st_only
    save_model(best, mcfg, args.model_out, encoding=enc)
    top1, top3 = evaluate(best, mcfg, X, ds.y)
    print(f"{mcfg.name}: {history[-1]['iteration']} iterations in {time.perf_counter() - t0:.1f}s, "
          f"train top1={top1:.3f} top3={top3:.3f}")
    if args.history is not None:
        import csv

        with args.history.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(history[0]))
            w.writeheader()
            w.writerows(history)
    if args.figure is not None:
        from .plotting import plot_history

        plot_history(history, args.figure)
    return 0


def cmd_eval(args) -> int:
    from .train_eval import evaluate_dataset, write_fold_csv

    run = _run_config(args)
    ds = _load_dataset(args.input, run)
    report = evaluate_dataset(ds, run, jobs=args.jobs, shuffle=args.shuffle_labels, artifacts_dir=args.artifacts_dir)
    if args.out is None:
        sys.stdout.write(report.dumps())
    else:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(report.dumps())
    if args.csv is not None:
        write_fold_csv(report.csv_rows(), args.csv)
    if args.figure is not None:
        from .plotting import plot_fold_scores

        plot_fold_scores(report, args.figure, run.net_config(ds.n_classes, *ds.X.shape[1:]).name)
    print(f"top1 {report.top1_mean:.4f} ± {report.top1_ci:.4f}  top3 {report.top3_mean:.4f} ± {report.top3_ci:.4f}"
          f"  ({len(report.folds)} folds, {report.seconds:.1f}s)", file=sys.stderr)
    for f in report.failed:
        print(f"fold r{f.repeat}/k{f.fold} failed: {f.error}", file=sys.stderr)
    return 1 if report.failed else 0


def cmd_predict(args) -> int:
    from .ingest import parse_fleet_csv, prepare_trips
    from .model import load_model, predict_proba, rank_classes
    from .patterns import EncodingConfig, apply_scaler, encode_subtrajectory, read_encoded_jsonl
    from .windowing import slice_subtrajectories

    params, mcfg, enc_doc = load_model(args.model)
    if enc_doc is None:
        raise ModelFormatError(f"{args.model}: no encoding settings recorded")
    enc = EncodingConfig.from_json(enc_doc)
    rows, meta = [], []
    if args.input.suffix.lower() == ".csv":
        run = _run_config(args)
        parsed = parse_fleet_csv(args.input)
        for trip in prepare_trips(parsed.trips, run.prep.max_gap, run.prep.min_trip_secs):
            for sub in slice_subtrajectories(trip, enc.window):
                rows.append(encode_subtrajectory(sub, enc))
                meta.append({"driver_id": trip.driver_id, "trip_id": trip.trip_id, "start": sub.start})
    else:
        for k, s in enumerate(read_encoded_jsonl(args.input, enc.mode)):
            rows.append(s.x)
            meta.append({"driver_id": s.driver_id, "index": k})
    if not rows:
        raise ValidationError(f"{args.input}: no subtrajectory of {enc.window.ls} s")
    X = np.stack(rows)
    if X.shape[1:] != (mcfg.seq_len, mcfg.feature_dim):
        raise DimensionMismatch(f"input shape {X.shape[1:]} != model input {(mcfg.seq_len, mcfg.feature_dim)}")
    Q = predict_proba(params, mcfg, apply_scaler(params.scaler, X))
    ranked = rank_classes(Q)
    labels = params.label_map
    out_lines = []
    for m, q, r in zip(meta, Q, ranked):
        rec = dict(m)
        rec["driver_id_predicted"] = labels[r[0]]
        rec["topk"] = [{"driver_id": labels[c], "probability": float(q[c])} for c in r[:args.k]]
        rec["probabilities"] = {labels[c]: float(q[c]) for c in range(len(labels))}
        out_lines.append(json.dumps(rec, sort_keys=True))
    text = "\n".join(out_lines) + "\n"
    if args.out is None:
        sys.stdout.write(text)
    else:
        args.out.write_text(text)
    return 0


def _parse_values(param: str, raw: str | None) -> list:
    from .train_eval import ABLATIONS, lambda_grid

    if raw is None:
        defaults = {
            "lambda": lambda_grid(),
            "lf": [10, 15, 20, 25, 30],
            "mode": ["MS", "ST", "FUSED"],
            "cell": ["gru", "lstm"],
            "ablation": list(ABLATIONS),
        }
        if param not in defaults:
            raise ValidationError(f"unknown sweep parameter {param!r}")
        return defaults[param]
    items = [s.strip() for s in raw.split(",") if s.strip()]
    if param == "lambda":
        return [float(s) for s in items]
    if param == "lf":
        return [int(s) for s in items]
    if param == "mode":
        return [s.upper().replace("MS+ST", "FUSED") for s in items]
    return [s.lower() for s in items]


def cmd_sweep(args) -> int:
    from .train_eval import sweep, write_fold_csv, write_sweep_summary

    run = _run_config(args)
    trips = _load_trips(args.input, run)
    values = _parse_values(args.param, args.values)
    results = sweep(trips, run, args.param, values, jobs=args.jobs)
    args.out.mkdir(parents=True, exist_ok=True)
    write_sweep_summary(results, args.out / "summary.csv")
    write_fold_csv([row for label, rep in results for row in rep.csv_rows(label)], args.out / "folds.csv")
    _write_json({label: rep.to_json() for label, rep in results}, args.out / "sweep.json")
    from .plotting import plot_sweep

    plot_sweep(results, args.out / "sweep.png", args.param)
    for label, rep in results:
        print(f"{label}: top1 {rep.top1_mean:.4f} ± {rep.top1_ci:.4f}  top3 {rep.top3_mean:.4f} ± {rep.top3_ci:.4f}")
    return 1 if any(rep.failed for _, rep in results) else 0


def cmd_gradcheck(args) -> int:
    from .model import check_model_gradients

    cells = ["gru", "lstm"] if args.cell == "all" else [args.cell]
    toggles = [True, False] if args.all_variants else [True]
    ok = True
    t0 = time.perf_counter()
    for cell in cells:
        for residual in toggles:
            for decoder in toggles:
                rep = check_model_gradients(
                    cell, residual, decoder, lam=args.lam, seed=args.seed,
                    eps=args.eps, tolerance=args.tolerance,
                )
                status = "PASS" if rep.passed else "FAIL"
                ok &= rep.passed
                print(f"{status} cell={cell} residual={residual} decoder={decoder} "
                      f"max_rel_error={rep.max_rel_error:.3e} worst={rep.worst_param}")
    print(f"{'PASS' if ok else 'FAIL'} ({time.perf_counter() - t0:.1f}s)")
    return 0 if ok else 1


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    epilog = _config_epilog()
    parser = argparse.ArgumentParser(prog="drivestyle", description=__doc__, formatter_class=fmt, epilog=epilog)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)

    def add(name, func, help_text, config=True):
        p = sub.add_parser(name, help=help_text, description=help_text, formatter_class=fmt, epilog=epilog)
        p.set_defaults(func=func)
        if config:
            _add_config_args(p)
        return p

    p = add("synth", cmd_synth, "write a synthetic fleet CSV", config=False)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--preset", default="separable5", help="separable5, separable10 or hard10")
    src.add_argument("--spec", type=Path, help="JSON fleet spec with an 'archetypes' list")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)

    p = add("prep", cmd_prep, "validate a fleet CSV and derive per-trip kinematics (JSONL)")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--lenient", action="store_true", help="skip bad rows instead of failing")

    p = add("describe", cmd_describe, "per-signal descriptive statistics (CSV) and histograms")
    p.add_argument("--input", type=Path, required=True, help="fleet CSV or prep JSONL")
    p.add_argument("--out", type=Path, help="CSV output (default stdout)")
    p.add_argument("--figure", type=Path, help="PNG histogram grid")

    p = add("encode", cmd_encode, "encode subtrajectories into pattern sequences (JSONL + scaler sidecar)")
    p.add_argument("--input", type=Path, required=True, help="fleet CSV or prep JSONL")
    p.add_argument("--out", type=Path, required=True)

    p = add("train", cmd_train, "train one network on every sample and save it")
    p.add_argument("--input", type=Path, required=True, help="encoded JSONL, prep JSONL or fleet CSV")
    p.add_argument("--model-out", type=Path, required=True)
    p.add_argument("--history", type=Path, help="CSV of per-evaluation losses")
    p.add_argument("--figure", type=Path, help="PNG loss curves")

    p = add("eval", cmd_eval, "repeated stratified k-fold cross-validation")
    p.add_argument("--input", type=Path, required=True, help="encoded JSONL, prep JSONL or fleet CSV")
    p.add_argument("--out", type=Path, help="JSON report (default stdout)")
    p.add_argument("--csv", type=Path, help="per-fold CSV")
    p.add_argument("--figure", type=Path, help="PNG of per-fold scores")
    p.add_argument("--artifacts-dir", type=Path, help="per-fold train indices and scaler")
    p.add_argument("--shuffle-labels", action="store_true", help="permute labels (chance control)")
    p.add_argument("--jobs", type=int, default=1, help="parallel folds; 1 is bit-deterministic")

    p = add("predict", cmd_predict, "identify the driver of every subtrajectory")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True, help="fleet CSV or encoded JSONL")
    p.add_argument("--out", type=Path, help="JSONL output (default stdout)")
    p.add_argument("-k", type=int, default=3, help="top-k list length")

    p = add("sweep", cmd_sweep, "cross-validate every point of a parameter grid")
    p.add_argument("--input", type=Path, required=True, help="fleet CSV or prep JSONL")
    p.add_argument("--param", required=True, choices=["lambda", "lf", "mode", "cell", "ablation"])
    p.add_argument("--values", help="comma-separated grid (default: the standard grid for --param)")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--jobs", type=int, default=1)

    p = add("gradcheck", cmd_gradcheck, "finite-difference check of every model gradient", config=False)
    p.add_argument("--cell", choices=["gru", "lstm", "all"], default="all")
    p.add_argument("--all-variants", action=argparse.BooleanOptionalAction, default=True,
                   help="also check residual and decoder switched off")
    p.add_argument("--lam", type=float, default=0.5)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValidationError, ModelFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DriveStyleError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
