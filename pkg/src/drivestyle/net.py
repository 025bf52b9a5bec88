"""Small numpy neural-network kit: GRU/LSTM cells with BPTT, softmax head,
losses, Adam and a finite-difference gradient checker.

All arrays are float64 and batch-first: sequences are ``(B, T, D)``.
Weight layout is row-vector style, ``W_*`` is ``(input_dim, hidden)`` and
``U_*`` is ``(hidden, hidden)``, so a gate pre-activation reads
``x @ W + h @ U + b``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DimensionMismatch

GATES = {"gru": ("z", "r", "h"), "lstm": ("i", "f", "o", "g")}
CELL_KINDS = tuple(GATES)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def relu(x):
    return np.maximum(x, 0.0)


@dataclass
class RnnCellParams:
    kind: str
    input_dim: int
    hidden_dim: int
    weights: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def gates(self) -> tuple[str, ...]:
        return GATES[self.kind]

    def names(self) -> list[str]:
        return [f"{p}_{g}" for g in self.gates for p in ("W", "U", "b")]


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_cell(kind: str, input_dim: int, hidden_dim: int, rng: np.random.Generator) -> RnnCellParams:
    kind = kind.lower()
    if kind not in GATES:
        raise ValueError(f"unknown cell kind {kind!r}")
    w = {}
    for g in GATES[kind]:
        w[f"W_{g}"] = glorot_uniform(rng, input_dim, hidden_dim)
        w[f"U_{g}"] = glorot_uniform(rng, hidden_dim, hidden_dim)
        w[f"b_{g}"] = np.ones(hidden_dim) if (kind, g) == ("lstm", "f") else np.zeros(hidden_dim)
    return RnnCellParams(kind, input_dim, hidden_dim, w)


def _check_input(cell: RnnCellParams, x: np.ndarray) -> None:
    if x.shape[-1] != cell.input_dim:
        raise DimensionMismatch(f"input dim {x.shape[-1]} != cell input dim {cell.input_dim}")


def gru_step(cell: RnnCellParams, x_t: np.ndarray, h_prev: np.ndarray) -> np.ndarray:
    _check_input(cell, x_t)
    if h_prev.shape[-1] != cell.hidden_dim:
        raise DimensionMismatch(f"hidden dim {h_prev.shape[-1]} != {cell.hidden_dim}")
    w = cell.weights
    z = sigmoid(x_t @ w["W_z"] + h_prev @ w["U_z"] + w["b_z"])
    r = sigmoid(x_t @ w["W_r"] + h_prev @ w["U_r"] + w["b_r"])
    hh = np.tanh(x_t @ w["W_h"] + (r * h_prev) @ w["U_h"] + w["b_h"])
    return (1.0 - z) * h_prev + z * hh


def lstm_step(cell: RnnCellParams, x_t: np.ndarray, state: tuple[np.ndarray, np.ndarray]):
    _check_input(cell, x_t)
    h_prev, c_prev = state
    if h_prev.shape[-1] != cell.hidden_dim or c_prev.shape[-1] != cell.hidden_dim:
        raise DimensionMismatch("state dim does not match cell hidden dim")
    w = cell.weights
    i = sigmoid(x_t @ w["W_i"] + h_prev @ w["U_i"] + w["b_i"])
    f = sigmoid(x_t @ w["W_f"] + h_prev @ w["U_f"] + w["b_f"])
    o = sigmoid(x_t @ w["W_o"] + h_prev @ w["U_o"] + w["b_o"])
    g = np.tanh(x_t @ w["W_g"] + h_prev @ w["U_g"] + w["b_g"])
    c = f * c_prev + i * g
    return o * np.tanh(c), c


def _cat(cell: RnnCellParams, prefix: str, gates=None) -> np.ndarray:
    gates = gates or cell.gates
    return np.concatenate([cell.weights[f"{prefix}_{g}"] for g in gates], axis=-1)


def rnn_sequence(cell: RnnCellParams, X: np.ndarray):
    """Unrolled forward pass from a zero state.

    Returns ``(H, cache)`` where ``H`` is ``(B, T, hidden)``; the cache feeds
    :func:`rnn_sequence_backward`.
    """
    _check_input(cell, X)
    B, T, _ = X.shape
    Hd = cell.hidden_dim
    xw = X @ _cat(cell, "W") + _cat(cell, "b")
    dt = xw.dtype
    H = np.empty((B, T, Hd), dtype=dt)
    h = np.zeros((B, Hd), dtype=dt)
    if cell.kind == "gru":
        U_zr = _cat(cell, "U", ("z", "r"))
        U_h = cell.weights["U_h"]
        Z = np.empty((B, T, Hd), dtype=dt)
        R = np.empty((B, T, Hd), dtype=dt)
        HH = np.empty((B, T, Hd), dtype=dt)
        for t in range(T):
            hu = h @ U_zr
            z = sigmoid(xw[:, t, :Hd] + hu[:, :Hd])
            r = sigmoid(xw[:, t, Hd:2 * Hd] + hu[:, Hd:])
            hh = np.tanh(xw[:, t, 2 * Hd:] + (r * h) @ U_h)
            h = (1.0 - z) * h + z * hh
            Z[:, t], R[:, t], HH[:, t], H[:, t] = z, r, hh, h
        cache = {"X": X, "H": H, "Z": Z, "R": R, "HH": HH}
    else:
        U = _cat(cell, "U")
        c = np.zeros((B, Hd), dtype=dt)
        G = np.empty((B, T, 4 * Hd), dtype=dt)
        C = np.empty((B, T, Hd), dtype=dt)
        for t in range(T):
            a = xw[:, t] + h @ U
            i = sigmoid(a[:, :Hd])
            f = sigmoid(a[:, Hd:2 * Hd])
            o = sigmoid(a[:, 2 * Hd:3 * Hd])
            g = np.tanh(a[:, 3 * Hd:])
            c = f * c + i * g
            h = o * np.tanh(c)
            G[:, t, :Hd], G[:, t, Hd:2 * Hd], G[:, t, 2 * Hd:3 * Hd], G[:, t, 3 * Hd:] = i, f, o, g
            C[:, t], H[:, t] = c, h
        cache = {"X": X, "H": H, "G": G, "C": C}
    return H, cache


def rnn_forward(cell: RnnCellParams, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """``(H, h_T)`` for a ``(T, D)`` sequence or a ``(B, T, D)`` batch."""
    X = np.asarray(X, dtype=float)
    single = X.ndim == 2
    H, _ = rnn_sequence(cell, X[None] if single else X)
    if single:
        H = H[0]
    return H, H[..., -1, :]


def rnn_sequence_backward(cell: RnnCellParams, cache: dict, dH: np.ndarray, need_dx: bool = True):
    """BPTT through one unrolled cell.

    ``dH`` is the loss gradient w.r.t. every hidden output ``(B, T, hidden)``.
    Returns ``(dX or None, grads)`` with grads keyed like ``cell.weights``.
    """
    X, H = cache["X"], cache["H"]
    B, T, D = X.shape
    Hd = cell.hidden_dim
    w = cell.weights
    h0 = np.zeros((B, Hd))
    grads = {}
    if cell.kind == "gru":
        Z, R, HH = cache["Z"], cache["R"], cache["HH"]
        U_zr = _cat(cell, "U", ("z", "r"))
        U_h = w["U_h"]
        da_x = np.empty((B, T, 3 * Hd))
        dU_zr = np.zeros_like(U_zr)
        dU_h = np.zeros_like(U_h)
        dh_next = np.zeros((B, Hd))
        for t in range(T - 1, -1, -1):
            hp = H[:, t - 1] if t else h0
            z, r, hh = Z[:, t], R[:, t], HH[:, t]
            dh = dH[:, t] + dh_next
            dz = dh * (hh - hp)
            da_h = dh * z * (1.0 - hh * hh)
            dhp = dh * (1.0 - z)
            d_rh = da_h @ U_h.T
            dU_h += (r * hp).T @ da_h
            dhp += d_rh * r
            da_zr = np.concatenate([dz * z * (1.0 - z), d_rh * hp * r * (1.0 - r)], axis=1)
            dU_zr += hp.T @ da_zr
            dhp += da_zr @ U_zr.T
            da_x[:, t, :2 * Hd] = da_zr
            da_x[:, t, 2 * Hd:] = da_h
            dh_next = dhp
        grads["U_z"], grads["U_r"] = dU_zr[:, :Hd], dU_zr[:, Hd:]
        grads["U_h"] = dU_h
    else:
        G, C = cache["G"], cache["C"]
        U = _cat(cell, "U")
        da_x = np.empty((B, T, 4 * Hd))
        dU = np.zeros_like(U)
        dh_next = np.zeros((B, Hd))
        dc_next = np.zeros((B, Hd))
        for t in range(T - 1, -1, -1):
            hp = H[:, t - 1] if t else h0
            cp = C[:, t - 1] if t else h0
            i, f, o, g = G[:, t, :Hd], G[:, t, Hd:2 * Hd], G[:, t, 2 * Hd:3 * Hd], G[:, t, 3 * Hd:]
            tc = np.tanh(C[:, t])
            dh = dH[:, t] + dh_next
            dc = dc_next + dh * o * (1.0 - tc * tc)
            da = np.concatenate([
                dc * g * i * (1.0 - i),
                dc * cp * f * (1.0 - f),
                dh * tc * o * (1.0 - o),
                dc * i * (1.0 - g * g),
            ], axis=1)
            dU += hp.T @ da
            dh_next = da @ U.T
            dc_next = dc * f
            da_x[:, t] = da
        for k, gname in enumerate(cell.gates):
            grads[f"U_{gname}"] = dU[:, k * Hd:(k + 1) * Hd]
    flat_da = da_x.reshape(B * T, -1)
    dW = X.reshape(B * T, D).T @ flat_da
    db = flat_da.sum(axis=0)
    for k, gname in enumerate(cell.gates):
        grads[f"W_{gname}"] = dW[:, k * Hd:(k + 1) * Hd]
        grads[f"b_{gname}"] = db[k * Hd:(k + 1) * Hd]
    dX = da_x @ _cat(cell, "W").T if need_dx else None
    return dX, grads


def dense_softmax(W: np.ndarray, b: np.ndarray, e: np.ndarray) -> np.ndarray:
    """Softmax of ``e @ W.T + b`` with max-subtraction; ``W`` is ``(c, d)``."""
    e = np.asarray(e)
    if W.shape[1] != e.shape[-1] or W.shape[0] != b.shape[0]:
        raise DimensionMismatch(f"head {W.shape} / bias {b.shape} vs embedding {e.shape}")
    return softmax(e @ W.T + b)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=-1, keepdims=True)


def losses(q: np.ndarray, y, x: np.ndarray | None = None, x_rec: np.ndarray | None = None) -> tuple[float, float]:
    """Batch-mean cross-entropy and mean squared reconstruction error."""
    q = np.atleast_2d(q)
    y = np.atleast_1d(np.asarray(y, dtype=int))
    qy = np.maximum(q[np.arange(len(y)), y], 1e-15)
    l_c = -np.mean(np.log(qy))
    l_r = q.dtype.type(0.0) if x_rec is None else np.mean((np.asarray(x_rec) - np.asarray(x)) ** 2)
    return l_c, l_r


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params: dict[str, np.ndarray], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    return AdamState(
        {k: np.zeros_like(p) for k, p in params.items()},
        {k: np.zeros_like(p) for k, p in params.items()},
        0, lr, beta1, beta2, eps,
    )


def adam_update(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState):
    """One bias-corrected Adam step; inputs are not modified."""
    t = state.step + 1
    new_p, new_m, new_v = {}, {}, {}
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise DimensionMismatch(f"grad {k} shape {g.shape} != param shape {p.shape}")
        m = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g
        new_p[k] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(new_m, new_v, t, state.lr, state.beta1, state.beta2, state.eps)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        return {k: g * scale for k, g in grads.items()}, norm
    return grads, norm


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    passed: bool
    per_param: dict[str, float]
    tolerance: float


def grad_check(
    loss_fn: Callable[[dict[str, np.ndarray]], object],
    params: dict[str, np.ndarray],
    analytic: dict[str, np.ndarray],
    eps: float = 1e-5,
    tolerance: float = 1e-4,
    dtype=np.longdouble,
) -> GradCheckReport:
    """Compare analytic gradients with central differences of ``loss_fn``.

    ``loss_fn`` may return a scalar or a tuple of additive loss terms; terms
    are differenced separately so a term the parameter cannot touch cancels
    exactly. Parameters are perturbed in ``dtype`` (extended precision by
    default, which keeps round-off of the difference quotient near 1e-14).
    Relative error per element is ``|ga - gn| / max(1e-8, |ga| + |gn|)``.
    """
    work = {k: np.array(p, dtype=dtype, copy=True) for k, p in params.items()}

    def terms(w):
        out = loss_fn(w)
        return out if isinstance(out, tuple) else (out,)

    per_param = {}
    for name, p in work.items():
        ga = np.asarray(analytic[name], dtype=float)
        worst = 0.0
        flat = p.reshape(-1)
        gflat = ga.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            up = terms(work)
            flat[idx] = orig - eps
            down = terms(work)
            flat[idx] = orig
            gn = float(sum(u - d for u, d in zip(up, down)) / (2 * dtype(eps)))
            err = abs(gflat[idx] - gn) / max(1e-8, abs(gflat[idx]) + abs(gn))
            worst = max(worst, err)
        per_param[name] = worst
    worst_name = max(per_param, key=per_param.get) if per_param else ""
    max_err = per_param.get(worst_name, 0.0)
    return GradCheckReport(max_err, worst_name, max_err < tolerance, per_param, tolerance)
