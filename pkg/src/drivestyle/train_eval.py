"""Mini-batch training with early stopping, repeated stratified k-fold
cross-validation, top-k metrics and grid sweeps."""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import partial
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import model as mdl
from . import net
from .errors import ClassTooSmall, NonFiniteLoss, TooFewSamplesPerClass, ValidationError
from .ingest import Trip
from .patterns import (
    EncodingConfig,
    FeatureScaler,
    PatternSequence,
    apply_scaler,
    encode_subtrajectory,
    fit_scaler,
)
from .windowing import slice_subtrajectories

log = logging.getLogger(__name__)

Z95 = 1.96


@dataclass
class Dataset:
    X: np.ndarray  # (n, T, M), unscaled
    y: np.ndarray  # (n,)
    labels: list[str]  # class index -> driver id
    mode: str = "FUSED"
    groups: list[str] = field(default_factory=list)  # source trip per sample

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=int)
        if self.X.ndim != 3 or len(self.X) != len(self.y):
            raise ValidationError(f"dataset shapes X{self.X.shape} / y{self.y.shape} inconsistent")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= len(self.labels)):
            raise ValidationError("labels out of range")

    @property
    def n_classes(self) -> int:
        return len(self.labels)

    def __len__(self) -> int:
        return len(self.y)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.n_classes)

    def sequences(self) -> list[PatternSequence]:
        return [PatternSequence(x, int(c), self.labels[c], self.mode) for x, c in zip(self.X, self.y)]

    @classmethod
    def from_sequences(cls, seqs: Sequence[PatternSequence], labels: list[str] | None = None) -> "Dataset":
        if not seqs:
            raise ValidationError("no encoded sequences")
        if labels is None:
            labels = sorted({s.driver_id for s in seqs})
        index = {d: k for k, d in enumerate(labels)}
        X = np.stack([s.x for s in seqs])
        y = np.array([index[s.driver_id] for s in seqs])
        return cls(X, y, list(labels), seqs[0].mode)


def build_dataset(trips: Iterable[Trip], enc: EncodingConfig = EncodingConfig(), labels: list[str] | None = None) -> Dataset:
    """Slice and encode every trip; labels default to sorted driver ids."""
    trips = list(trips)
    if labels is None:
        labels = sorted({t.driver_id for t in trips})
    index = {d: k for k, d in enumerate(labels)}
    xs, ys, groups = [], [], []
    for trip in trips:
        for sub in slice_subtrajectories(trip, enc.window):
            xs.append(encode_subtrajectory(sub, enc))
            ys.append(index[trip.driver_id])
            groups.append(f"{trip.driver_id}/{trip.trip_id}")
    if not xs:
        raise ValidationError(f"no trip is at least {enc.window.ls} s long")
    return Dataset(np.stack(xs), np.array(ys), labels, enc.mode, groups)


@dataclass
class TrainConfig:
    batch_size: int = 256
    max_iterations: int = 1500
    val_fraction: float = 0.15
    patience: int = 100
    eval_every: int = 10
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0


def topk_accuracy(ranked, labels, k: int) -> float:
    """Share of samples whose label is among the first ``k`` ranked classes."""
    ranked = np.asarray(ranked)
    labels = np.asarray(labels)
    if len(labels) == 0:
        return 0.0
    hits = (ranked[:, :k] == labels[:, None]).any(axis=1)
    return float(hits.mean())


def stratified_split(y: np.ndarray, fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Per-class hold-out of ``round(fraction * n_c)`` samples (at least 1, leaving 1)."""
    train, val = [], []
    for c in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == c))
        n_val = min(max(1, int(round(fraction * len(idx)))), len(idx) - 1)
        val.extend(idx[:n_val])
        train.extend(idx[n_val:])
    return np.sort(np.array(train, dtype=int)), np.sort(np.array(val, dtype=int))


def evaluate(params: mdl.ModelParams, cfg: mdl.ModelConfig, X, y) -> tuple[float, float]:
    """``(top1, top3)`` of params on a scaled set."""
    ranked = mdl.rank_classes(mdl.predict_proba(params, cfg, X))
    return topk_accuracy(ranked, y, 1), topk_accuracy(ranked, y, 3)


def train(params: mdl.ModelParams, cfg: mdl.ModelConfig, X, y, tcfg: TrainConfig = TrainConfig()):
    """Adam on shuffled mini-batches with validation-loss early stopping.

    ``X`` must already be scaled. Returns ``(best_params, history)``; history
    has one dict per evaluation.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    counts = np.bincount(y, minlength=cfg.n_classes)
    if (counts < 2).any():
        raise TooFewSamplesPerClass(f"every class needs >= 2 samples, got {counts.tolist()}")
    rng = np.random.default_rng(tcfg.seed)
    tr, va = stratified_split(y, tcfg.val_fraction, rng)
    Xtr, ytr, Xva, yva = X[tr], y[tr], X[va], y[va]
    batch = min(tcfg.batch_size, len(tr))

    flat = {k: v.copy() for k, v in params.flat().items()}
    state = net.adam_init(flat, tcfg.lr, tcfg.beta1, tcfg.beta2, tcfg.eps)
    best_flat, best_val, best_it = flat, np.inf, 0
    history = []
    order = np.empty(0, dtype=int)
    pos = 0
    for it in range(1, tcfg.max_iterations + 1):
        if pos >= len(order):
            order = rng.permutation(len(tr))
            pos = 0
        idx = order[pos:pos + batch]
        pos += batch
        current = params.with_flat(flat)
        try:
            (l_u, l_c, l_r), grads = mdl.compute_gradients(current, cfg, Xtr[idx], ytr[idx])
        except NonFiniteLoss as exc:
            raise NonFiniteLoss(f"non-finite loss at iteration {it}", iteration=it) from exc
        grads, _ = net.clip_global_norm(grads, tcfg.clip_norm)
        flat, state = net.adam_update(flat, grads, state)

        if it % tcfg.eval_every == 0 or it == tcfg.max_iterations:
            evaluated = params.with_flat(flat)
            v_u, v_c, v_r = mdl.unified_loss(evaluated, cfg, Xva, yva)
            v_top1, _ = evaluate(evaluated, cfg, Xva, yva)
            t_top1, _ = evaluate(evaluated, cfg, Xtr, ytr)
            history.append({
                "iteration": it, "loss_u": float(l_u), "loss_c": float(l_c), "loss_r": float(l_r),
                "val_u": float(v_u), "val_c": float(v_c), "val_r": float(v_r),
                "train_top1": t_top1, "val_top1": v_top1,
            })
            if v_u < best_val:
                best_flat, best_val, best_it = flat, v_u, it
            elif it - best_it >= tcfg.patience:
                break
    best = params.with_flat({k: v.copy() for k, v in best_flat.items()})
    return best, history


# -- cross-validation --------------------------------------------------------

def stratified_folds(y: np.ndarray, folds: int, rng: np.random.Generator) -> np.ndarray:
    """Fold id per sample; per-class fold counts differ by at most one."""
    fold_of = np.empty(len(y), dtype=int)
    offset = 0
    for c in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == c))
        fold_of[idx] = (offset + np.arange(len(idx))) % folds
        offset += len(idx)
    return fold_of


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence(list(keys)).generate_state(1)[0])


@dataclass
class FoldResult:
    repeat: int
    fold: int
    top1: float
    top3: float
    n_train: int
    n_test: int
    seconds: float = 0.0
    iterations: int = 0
    train_indices: list[int] = field(default_factory=list, repr=False)
    scaler: dict | None = field(default=None, repr=False)
    error: str | None = None


Runner = Callable[[np.ndarray, np.ndarray, np.ndarray, int, int], tuple[np.ndarray, dict]]


def network_runner(Xtr, ytr, Xte, n_classes, seed, mcfg: mdl.ModelConfig, tcfg: TrainConfig):
    """Default fold runner: build, train and rank test samples."""
    cfg = replace(mcfg, n_classes=n_classes, seq_len=Xtr.shape[1], feature_dim=Xtr.shape[2])
    params = mdl.build_model(cfg, seed)
    best, history = train(params, cfg, Xtr, ytr, replace(tcfg, seed=seed))
    ranked = mdl.rank_classes(mdl.predict_proba(best, cfg, Xte))
    return ranked, {"iterations": history[-1]["iteration"] if history else 0}


def _run_fold(job, X, y, n_classes, scale_st_only, mode, runner, seed):
    repeat, fold, tr, te = job
    t0 = time.perf_counter()
    scaler = fit_scaler(X[tr], mode=mode, st_only=scale_st_only)
    Xtr = apply_scaler(scaler, X[tr])
    Xte = apply_scaler(scaler, X[te])
    try:
        ranked, info = runner(Xtr, y[tr], Xte, n_classes, derive_seed(seed, repeat, fold))
        top1 = topk_accuracy(ranked, y[te], 1)
        top3 = topk_accuracy(ranked, y[te], 3)
        err = None
    except NonFiniteLoss as exc:
        top1 = top3 = float("nan")
        info, err = {}, str(exc)
    return FoldResult(
        repeat, fold, top1, top3, len(tr), len(te), time.perf_counter() - t0,
        int(info.get("iterations", 0)), tr.tolist(), scaler.to_json(), err,
    )


def ci95(values: Sequence[float]) -> float:
    """Normal-approximation half-width ``1.96 * s / sqrt(r)`` (sample std)."""
    v = np.asarray(values, dtype=float)
    if len(v) < 2:
        return 0.0
    return float(Z95 * v.std(ddof=1) / np.sqrt(len(v)))


@dataclass
class MetricsReport:
    folds: list[FoldResult]
    config: dict = field(default_factory=dict)
    seconds: float = 0.0

    def _values(self, attr):
        return [getattr(f, attr) for f in self.folds if f.error is None]

    @property
    def top1_mean(self) -> float:
        return float(np.mean(self._values("top1"))) if self._values("top1") else float("nan")

    @property
    def top3_mean(self) -> float:
        return float(np.mean(self._values("top3"))) if self._values("top3") else float("nan")

    @property
    def top1_ci(self) -> float:
        return ci95(self._values("top1"))

    @property
    def top3_ci(self) -> float:
        return ci95(self._values("top3"))

    @property
    def failed(self) -> list[FoldResult]:
        return [f for f in self.folds if f.error is not None]

    def to_json(self, include_timing: bool = False) -> dict:
        folds = []
        for f in self.folds:
            row = {"repeat": f.repeat, "fold": f.fold, "top1": f.top1, "top3": f.top3,
                   "n_train": f.n_train, "n_test": f.n_test, "iterations": f.iterations}
            if f.error:
                row["error"] = f.error
            if include_timing:
                row["seconds"] = f.seconds
            folds.append(row)
        out = {
            "top1_mean": self.top1_mean, "top1_ci95": self.top1_ci,
            "top3_mean": self.top3_mean, "top3_ci95": self.top3_ci,
            "n_folds": len(self.folds), "n_failed": len(self.failed),
            "config": self.config, "folds": folds,
        }
        if include_timing:
            out["seconds"] = self.seconds
        return out

    def dumps(self) -> str:
        """Deterministic JSON text (no wall-clock fields)."""
        return json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n"

    def csv_rows(self, grid_point: str = "base") -> list[dict]:
        return [
            {"grid_point": grid_point, "fold": f.fold, "repeat": f.repeat,
             "top1": f.top1, "top3": f.top3, "seconds": round(f.seconds, 3)}
            for f in self.folds
        ]


CSV_FIELDS = ("grid_point", "fold", "repeat", "top1", "top3", "seconds")


def write_fold_csv(rows: Iterable[dict], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        w.writerows(rows)


def kfold_cv(
    ds: Dataset,
    mcfg: mdl.ModelConfig | None = None,
    tcfg: TrainConfig = TrainConfig(),
    folds: int = 5,
    repeats: int = 5,
    seed: int = 0,
    scale_st_only: bool = False,
    runner: Runner | None = None,
    jobs: int = 1,
    config_echo: dict | None = None,
    artifacts_dir: str | Path | None = None,
) -> MetricsReport:
    """Repeated stratified k-fold CV with the scaler refitted per training fold."""
    counts = ds.class_counts()
    if len(ds) < folds or counts.min() < folds:
        raise ClassTooSmall(f"every class needs >= {folds} samples, got {counts.tolist()}")
    if runner is None:
        if mcfg is None:
            mcfg = mdl.ModelConfig(n_classes=ds.n_classes)
        runner = partial(network_runner, mcfg=mcfg, tcfg=tcfg)
    jobs_list = []
    for r in range(repeats):
        fold_of = stratified_folds(ds.y, folds, np.random.default_rng(derive_seed(seed, r)))
        for k in range(folds):
            jobs_list.append((r, k, np.flatnonzero(fold_of != k), np.flatnonzero(fold_of == k)))
    work = partial(_run_fold, X=ds.X, y=ds.y, n_classes=ds.n_classes, scale_st_only=scale_st_only,
                   mode=ds.mode, runner=runner, seed=seed)
    t0 = time.perf_counter()
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(work, jobs_list))
    else:
        results = []
        for job in jobs_list:
            res = work(job)
            log.info("repeat %d fold %d: top1=%.3f top3=%.3f (%.1fs)", res.repeat, res.fold, res.top1, res.top3, res.seconds)
            results.append(res)
    results.sort(key=lambda f: (f.repeat, f.fold))
    report = MetricsReport(results, config_echo or {}, time.perf_counter() - t0)
    if artifacts_dir is not None:
        out = Path(artifacts_dir)
        out.mkdir(parents=True, exist_ok=True)
        for f in results:
            (out / f"fold_r{f.repeat}_k{f.fold}.json").write_text(json.dumps(
                {"repeat": f.repeat, "fold": f.fold, "train_indices": f.train_indices, "scaler": f.scaler}))
    return report


def shuffled_labels(ds: Dataset, seed: int) -> Dataset:
    """Copy of ``ds`` with labels permuted (chance-level control)."""
    y = np.random.default_rng(seed).permutation(ds.y)
    return Dataset(ds.X, y, ds.labels, ds.mode, ds.groups)


# -- end-to-end evaluation and sweeps ------------------------------------------

def evaluate_trips(trips: Sequence[Trip], run, jobs: int = 1, shuffle: bool = False, artifacts_dir=None) -> MetricsReport:
    """Encode ``trips`` with a RunConfig and cross-validate the configured network."""
    ds = build_dataset(trips, run.encoding_config())
    return evaluate_dataset(ds, run, jobs, shuffle, artifacts_dir)


def evaluate_dataset(ds: Dataset, run, jobs: int = 1, shuffle: bool = False, artifacts_dir=None) -> MetricsReport:
    if shuffle:
        ds = shuffled_labels(ds, derive_seed(run.training.seed, 7919))
    mcfg = run.net_config(ds.n_classes, ds.X.shape[1], ds.X.shape[2])
    echo = run.model_dump()
    echo["n_samples"] = len(ds)
    echo["labels"] = ds.labels
    echo["shuffled_labels"] = shuffle
    return kfold_cv(
        ds, mcfg, run.train_config(), run.evaluation.folds, run.evaluation.repeats,
        run.training.seed, run.encoding.scale_st_only, jobs=jobs, config_echo=echo,
        artifacts_dir=artifacts_dir,
    )


SWEEP_KEYS = {
    "lambda": "model.lam",
    "lf": "window.lf",
    "mode": "encoding.mode",
    "cell": "model.cell",
}
ABLATIONS = {
    "plain": {"model.residual": False, "model.decoder": False},
    "residual": {"model.residual": True, "model.decoder": False},
    "full": {"model.residual": True, "model.decoder": True},
}


def lambda_grid(step: float = 0.05) -> list[float]:
    n = int(round(1.0 / step))
    return [round(k * step, 10) for k in range(n + 1)]


def sweep_points(param: str, values: Sequence) -> list[tuple[str, dict]]:
    """``(label, dotted overrides)`` per grid point."""
    if not values:
        raise ValidationError("sweep grid is empty")
    if param == "ablation":
        unknown = [v for v in values if v not in ABLATIONS]
        if unknown:
            raise ValidationError(f"unknown ablation(s) {unknown}; expected {list(ABLATIONS)}")
        return [(str(v), ABLATIONS[v]) for v in values]
    if param not in SWEEP_KEYS:
        raise ValidationError(f"unknown sweep parameter {param!r}; expected {list(SWEEP_KEYS) + ['ablation']}")
    key = SWEEP_KEYS[param]
    return [(f"{param}={v}", {key: v}) for v in values]


def sweep(trips: Sequence[Trip], base, param: str, values: Sequence, jobs: int = 1) -> list[tuple[str, MetricsReport]]:
    """One full cross-validation per grid point."""
    from .config import build_config

    results = []
    cache: dict = {}
    for label, overrides in sweep_points(param, values):
        run = build_config(base.model_dump(), overrides)
        enc = run.encoding_config()
        if enc not in cache:
            cache[enc] = build_dataset(trips, enc)
        report = evaluate_dataset(cache[enc], run, jobs)
        report.config["grid_point"] = label
        results.append((label, report))
    return results


SUMMARY_FIELDS = ("grid_point", "top1_mean", "top1_ci95", "top3_mean", "top3_ci95", "n_folds")


def write_sweep_summary(results: Sequence[tuple[str, MetricsReport]], path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS)
        w.writeheader()
        for label, rep in results:
            w.writerow({"grid_point": label, "top1_mean": rep.top1_mean, "top1_ci95": rep.top1_ci,
                        "top3_mean": rep.top3_mean, "top3_ci95": rep.top3_ci, "n_folds": len(rep.folds)})
