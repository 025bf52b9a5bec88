"""ResRNNARNet: residual recurrent encoder, softmax prediction head and a
residual recurrent decoder used as a reconstruction regularizer.

Wiring for an input ``x`` of shape ``(T, M)``::

    S1 = relu(enc1(x))            enc1 hidden = M
    A  = x + S1                   (S1 alone without residual)
    e  = enc2(A)[-1]              embedding, enc2 hidden = embedding_dim
    q  = softmax(W e + b)
    R  = repeat(e, T)
    D1 = relu(dec1(R))            dec1 hidden = embedding_dim
    B  = R + D1                   (D1 alone without residual)
    x~ = dec2(B)                  dec2 hidden = M

Loss: ``L_u = L_c + lam * L_r``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import net
from .errors import (
    ChecksumMismatch,
    DimensionMismatch,
    FormatVersionMismatch,
    InvalidConfig,
    ModelFormatError,
    NonFiniteLoss,
)
from .patterns import FeatureScaler

FORMAT_VERSION = 1
BLOCKS = ("enc1", "enc2", "dec1", "dec2")


@dataclass
class ModelConfig:
    cell: str = "gru"
    embedding_dim: int = 100
    residual: bool = True
    decoder: bool = True
    lam: float = 0.15
    n_classes: int = 2
    seq_len: int = 12
    feature_dim: int = 123

    def __post_init__(self):
        self.cell = self.cell.lower()
        problems = []
        if self.cell not in net.CELL_KINDS:
            problems.append(f"cell must be one of {net.CELL_KINDS}, got {self.cell!r}")
        if self.embedding_dim < 1:
            problems.append("embedding_dim must be >= 1")
        if self.n_classes < 2:
            problems.append("n_classes must be >= 2")
        if not 0.0 <= self.lam <= 1.0:
            problems.append("lam must lie in [0, 1]")
        if self.seq_len < 1 or self.feature_dim < 1:
            problems.append("seq_len and feature_dim must be >= 1")
        if problems:
            raise InvalidConfig("; ".join(problems))

    @property
    def name(self) -> str:
        base = self.cell.upper()
        if self.residual:
            base = "Res" + base
        if self.decoder:
            base += "ARNet"
        return base


@dataclass
class ModelParams:
    enc1: net.RnnCellParams
    enc2: net.RnnCellParams
    dec1: net.RnnCellParams | None
    dec2: net.RnnCellParams | None
    head_W: np.ndarray
    head_b: np.ndarray
    scaler: FeatureScaler | None = None
    label_map: list[str] = field(default_factory=list)

    def blocks(self):
        for name in BLOCKS:
            cell = getattr(self, name)
            if cell is not None:
                yield name, cell

    def flat(self) -> dict[str, np.ndarray]:
        """Name -> array view of every trainable parameter (e.g. ``enc1.W_z``)."""
        out = {}
        for name, cell in self.blocks():
            for k in cell.names():
                out[f"{name}.{k}"] = cell.weights[k]
        out["head.W"] = self.head_W
        out["head.b"] = self.head_b
        return out

    def with_flat(self, flat: dict[str, np.ndarray]) -> "ModelParams":
        """A new ModelParams holding ``flat``'s arrays (scaler/labels shared)."""
        cells = {}
        for name, cell in self.blocks():
            w = {k: flat[f"{name}.{k}"] for k in cell.names()}
            cells[name] = net.RnnCellParams(cell.kind, cell.input_dim, cell.hidden_dim, w)
        return ModelParams(
            cells["enc1"], cells["enc2"], cells.get("dec1"), cells.get("dec2"),
            flat["head.W"], flat["head.b"], self.scaler, list(self.label_map),
        )

    def copy(self) -> "ModelParams":
        return self.with_flat({k: v.copy() for k, v in self.flat().items()})


def build_model(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    M, E = cfg.feature_dim, cfg.embedding_dim
    enc1 = net.init_cell(cfg.cell, M, M, rng)
    enc2 = net.init_cell(cfg.cell, M, E, rng)
    dec1 = dec2 = None
    if cfg.decoder:
        dec1 = net.init_cell(cfg.cell, E, E, rng)
        dec2 = net.init_cell(cfg.cell, E, M, rng)
    head_W = net.glorot_uniform(rng, E, cfg.n_classes).T.copy()
    return ModelParams(enc1, enc2, dec1, dec2, head_W, np.zeros(cfg.n_classes))


@dataclass
class ForwardResult:
    embedding: np.ndarray
    q: np.ndarray
    x_rec: np.ndarray | None


def _batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x)
    if x.dtype.kind != "f":
        x = x.astype(float)
    if x.ndim == 2:
        return x[None], True
    return x, False


def _check_x(cfg: ModelConfig, X: np.ndarray) -> None:
    if X.ndim != 3 or X.shape[2] != cfg.feature_dim:
        raise DimensionMismatch(f"input shape {X.shape} incompatible with feature_dim {cfg.feature_dim}")


def _forward(params: ModelParams, cfg: ModelConfig, X: np.ndarray, with_decoder: bool = True):
    _check_x(cfg, X)
    H1, c1 = net.rnn_sequence(params.enc1, X)
    S1 = net.relu(H1)
    A = X + S1 if cfg.residual else S1
    H2, c2 = net.rnn_sequence(params.enc2, A)
    e = H2[:, -1]
    q = net.dense_softmax(params.head_W, params.head_b, e)
    cache = {"X": X, "H1": H1, "c1": c1, "c2": c2, "e": e, "q": q}
    x_rec = None
    if cfg.decoder and with_decoder:
        T = X.shape[1]
        R = np.repeat(e[:, None, :], T, axis=1)
        H3, c3 = net.rnn_sequence(params.dec1, R)
        D1 = net.relu(H3)
        Bm = R + D1 if cfg.residual else D1
        x_rec, c4 = net.rnn_sequence(params.dec2, Bm)
        cache.update(H3=H3, c3=c3, c4=c4)
    cache["x_rec"] = x_rec
    return cache


def forward(params: ModelParams, cfg: ModelConfig, x) -> ForwardResult:
    """Embedding, class probabilities and (if enabled) the reconstruction."""
    X, single = _batch(x)
    c = _forward(params, cfg, X)
    if single:
        return ForwardResult(c["e"][0], c["q"][0], None if c["x_rec"] is None else c["x_rec"][0])
    return ForwardResult(c["e"], c["q"], c["x_rec"])


def _losses(cfg: ModelConfig, cache: dict, y: np.ndarray) -> tuple[float, float, float]:
    l_c, l_r = net.losses(cache["q"], y, cache["X"], cache["x_rec"])
    return l_c + cfg.lam * l_r, l_c, l_r


def unified_loss(params: ModelParams, cfg: ModelConfig, X, y) -> tuple[float, float, float]:
    """``(L_u, L_c, L_r)`` on a batch."""
    X, _ = _batch(X)
    y = np.atleast_1d(np.asarray(y, dtype=int))
    cache = _forward(params, cfg, X)
    out = _losses(cfg, cache, y)
    if not np.isfinite(out[0]):
        raise NonFiniteLoss(f"non-finite loss {out}")
    return out


def compute_gradients(params: ModelParams, cfg: ModelConfig, X, y):
    """Exact reverse-mode gradients of ``L_u`` for every parameter.

    Returns ``((L_u, L_c, L_r), grads)`` with grads keyed like ``params.flat()``.
    """
    X, _ = _batch(X)
    y = np.atleast_1d(np.asarray(y, dtype=int))
    cache = _forward(params, cfg, X)
    loss = _losses(cfg, cache, y)
    if not np.isfinite(loss[0]):
        raise NonFiniteLoss(f"non-finite loss {loss}")
    B, T, M = X.shape
    grads: dict[str, np.ndarray] = {}

    dlogits = cache["q"].copy()
    dlogits[np.arange(B), y] -= 1.0
    dlogits /= B
    e = cache["e"]
    grads["head.W"] = dlogits.T @ e
    grads["head.b"] = dlogits.sum(axis=0)
    de = dlogits @ params.head_W

    if cfg.decoder:
        if cfg.lam > 0:
            dXr = cfg.lam * 2.0 * (cache["x_rec"] - X) / X.size
            dBm, g4 = net.rnn_sequence_backward(params.dec2, cache["c4"], dXr)
            dH3 = dBm * (cache["H3"] > 0)
            dR, g3 = net.rnn_sequence_backward(params.dec1, cache["c3"], dH3)
            if cfg.residual:
                dR = dR + dBm
            de = de + dR.sum(axis=1)
        else:
            # lam = 0: the decoder cannot influence the loss
            g3 = {k: np.zeros_like(v) for k, v in params.dec1.weights.items()}
            g4 = {k: np.zeros_like(v) for k, v in params.dec2.weights.items()}
        for k, v in g3.items():
            grads[f"dec1.{k}"] = v
        for k, v in g4.items():
            grads[f"dec2.{k}"] = v

    dH2 = np.zeros((B, T, params.enc2.hidden_dim))
    dH2[:, -1] = de
    dA, g2 = net.rnn_sequence_backward(params.enc2, cache["c2"], dH2)
    dH1 = dA * (cache["H1"] > 0)
    _, g1 = net.rnn_sequence_backward(params.enc1, cache["c1"], dH1, need_dx=False)
    for k, v in g1.items():
        grads[f"enc1.{k}"] = v
    for k, v in g2.items():
        grads[f"enc2.{k}"] = v
    return loss, grads


def predict_proba(params: ModelParams, cfg: ModelConfig, X) -> np.ndarray:
    X, single = _batch(X)
    q = _forward(params, cfg, X, with_decoder=False)["q"]
    return q[0] if single else q


def rank_classes(q: np.ndarray) -> np.ndarray:
    """Class indices by descending probability; ties go to the smaller index."""
    return np.argsort(-np.asarray(q), axis=-1, kind="stable")


def predict(params: ModelParams, cfg: ModelConfig, x, k: int = 3):
    """``(label, [(class, prob), ...])`` for one ``(T, M)`` sample."""
    q = predict_proba(params, cfg, x)
    order = rank_classes(q)
    top = [(int(c), float(q[c])) for c in order[:k]]
    return int(order[0]), top


# -- serialization ---------------------------------------------------------

def _checksum(doc: dict) -> str:
    body = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(body.encode()).hexdigest()


def save_model(params: ModelParams, cfg: ModelConfig, path, encoding: dict | None = None) -> None:
    """Write a single JSON document; floats use shortest round-trip repr."""
    config = asdict(cfg)
    if encoding is not None:
        config["encoding"] = encoding
    cells = {name: {"kind": c.kind, "input_dim": c.input_dim, "hidden_dim": c.hidden_dim}
             for name, c in params.blocks()}
    doc = {
        "format_version": FORMAT_VERSION,
        "config": config,
        "cells": cells,
        "label_map": list(params.label_map),
        "scaler": None if params.scaler is None else params.scaler.to_json(),
        "params": {k: v.tolist() for k, v in params.flat().items()},
    }
    doc["checksum"] = _checksum(doc)
    Path(path).write_text(json.dumps(doc, separators=(",", ":")))


def load_model(path) -> tuple[ModelParams, ModelConfig, dict | None]:
    """Inverse of :func:`save_model`; returns ``(params, cfg, encoding)``."""
    try:
        doc = json.loads(Path(path).read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ChecksumMismatch(f"{path}: corrupt or truncated model file ({exc})") from exc
    if not isinstance(doc, dict) or doc.get("format_version") != FORMAT_VERSION:
        found = doc.get("format_version") if isinstance(doc, dict) else None
        raise FormatVersionMismatch(f"{path}: format_version {found!r}, expected {FORMAT_VERSION}")
    stored = doc.pop("checksum", None)
    if stored != _checksum(doc):
        raise ChecksumMismatch(f"{path}: checksum mismatch")
    try:
        config = dict(doc["config"])
        encoding = config.pop("encoding", None)
        cfg = ModelConfig(**config)
        cells = {}
        for name, meta in doc["cells"].items():
            w = {k.split(".", 1)[1]: np.asarray(v, dtype=float)
                 for k, v in doc["params"].items() if k.startswith(name + ".")}
            cells[name] = net.RnnCellParams(meta["kind"], meta["input_dim"], meta["hidden_dim"], w)
        scaler = None if doc["scaler"] is None else FeatureScaler.from_json(doc["scaler"])
        params = ModelParams(
            cells["enc1"], cells["enc2"], cells.get("dec1"), cells.get("dec2"),
            np.asarray(doc["params"]["head.W"], dtype=float),
            np.asarray(doc["params"]["head.b"], dtype=float),
            scaler, list(doc["label_map"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"{path}: malformed model document ({exc})") from exc
    return params, cfg, encoding


# -- gradient verification ---------------------------------------------------

def check_model_gradients(
    cell: str = "gru",
    residual: bool = True,
    decoder: bool = True,
    lam: float = 0.5,
    seed: int = 0,
    seq_len: int = 3,
    feature_dim: int = 6,
    hidden: int = 5,
    n_classes: int = 3,
    batch: int = 4,
    eps: float = 1e-5,
    tolerance: float = 1e-4,
    corrupt: str | None = None,
    dtype=np.longdouble,
) -> net.GradCheckReport:
    """Finite-difference check of :func:`compute_gradients` on a tiny model.

    ``corrupt`` names a parameter whose analytic gradient gets its sign
    flipped, as a negative control.
    """
    cfg = ModelConfig(cell, hidden, residual, decoder, lam, n_classes, seq_len, feature_dim)
    params = build_model(cfg, seed)
    rng = np.random.default_rng(seed + 1)
    # biases away from zero so ReLU kinks sit far from the evaluation point
    for k, v in params.flat().items():
        if ".b_" in k or k == "head.b":
            v[...] = rng.normal(0.0, 0.3, size=v.shape)
    X = rng.uniform(0.0, 1.0, size=(batch, seq_len, feature_dim))
    y = rng.integers(0, n_classes, size=batch)
    _, grads = compute_gradients(params, cfg, X, y)
    if corrupt is not None:
        grads[corrupt] = -grads[corrupt]

    def loss_fn(flat):
        dt = next(iter(flat.values())).dtype
        _, l_c, l_r = unified_loss(params.with_flat(flat), cfg, X.astype(dt), y)
        return l_c, cfg.lam * l_r

    return net.grad_check(loss_fn, params.flat(), grads, eps, tolerance, dtype)
