"""Temporal feature extractors: a single-layer LSTM cell and a GRU cell.

Both cells operate on batches of row vectors ``(B, D)``. Parameters live in a
:class:`~stlane.nn.ParamStore` under ``LSTM.*`` / ``GRU.*`` names:

LSTM, one triple per gate g in {f, i, c, o}::

    P_g  (D, D)  input map
    Q_g  (D, D)  recurrent map
    b_g  (D,)    bias

GRU, one triple per gate g in {z, r, n} with the same layout.
"""

from __future__ import annotations

import numpy as np

from .nn import ParamStore, Parameter, fan_in_normal, sigmoid

LSTM_GATES = ("f", "i", "c", "o")
GRU_GATES = ("z", "r", "n")


def init_lstm(store: ParamStore, hidden: int, rng: np.random.Generator, dtype=np.float32,
              prefix: str = "LSTM") -> None:
    for g in LSTM_GATES:
        store.add(Parameter(f"{prefix}.P_{g}", fan_in_normal(rng, (hidden, hidden), hidden, 1.0, dtype)))
        store.add(Parameter(f"{prefix}.Q_{g}", fan_in_normal(rng, (hidden, hidden), hidden, 1.0, dtype)))
        bias = np.ones(hidden, dtype) if g == "f" else np.zeros(hidden, dtype)
        store.add(Parameter(f"{prefix}.b_{g}", bias))


def init_gru(store: ParamStore, hidden: int, rng: np.random.Generator, dtype=np.float32,
             prefix: str = "GRU") -> None:
    for g in GRU_GATES:
        store.add(Parameter(f"{prefix}.P_{g}", fan_in_normal(rng, (hidden, hidden), hidden, 1.0, dtype)))
        store.add(Parameter(f"{prefix}.Q_{g}", fan_in_normal(rng, (hidden, hidden), hidden, 1.0, dtype)))
        store.add(Parameter(f"{prefix}.b_{g}", np.zeros(hidden, dtype)))


def lstm_param_count(hidden: int) -> int:
    return 4 * (hidden * hidden + hidden * hidden + hidden)


def gru_param_count(hidden: int) -> int:
    return 3 * (hidden * hidden + hidden * hidden + hidden)


def _pre(params: ParamStore, prefix: str, g: str, x, h):
    return params.value(f"{prefix}.b_{g}") + x @ params.value(f"{prefix}.P_{g}").T \
        + h @ params.value(f"{prefix}.Q_{g}").T


def lstm_step(x: np.ndarray, h_prev: np.ndarray, c_prev: np.ndarray, params: ParamStore,
              prefix: str = "LSTM"):
    """One LSTM update. Returns ``(h, c, cache)``."""
    f = sigmoid(_pre(params, prefix, "f", x, h_prev))
    i = sigmoid(_pre(params, prefix, "i", x, h_prev))
    c_tilde = np.tanh(_pre(params, prefix, "c", x, h_prev))
    o = sigmoid(_pre(params, prefix, "o", x, h_prev))
    c = f * c_prev + i * c_tilde
    tc = np.tanh(c)
    h = o * tc
    cache = (x, h_prev, c_prev, f, i, c_tilde, o, tc, prefix)
    return h, c, cache


def lstm_step_backward(dh: np.ndarray, dc: np.ndarray, cache, params: ParamStore):
    """Accumulates parameter grads; returns ``(dx, dh_prev, dc_prev)``."""
    x, h_prev, c_prev, f, i, c_tilde, o, tc, prefix = cache
    do = dh * tc
    dc = dc + dh * o * (1 - tc * tc)
    df = dc * c_prev
    di = dc * c_tilde
    dct = dc * i
    dc_prev = dc * f
    pre_grads = {
        "f": df * f * (1 - f),
        "i": di * i * (1 - i),
        "c": dct * (1 - c_tilde * c_tilde),
        "o": do * o * (1 - o),
    }
    dx = np.zeros_like(x)
    dh_prev = np.zeros_like(h_prev)
    for g in LSTM_GATES:
        da = pre_grads[g]
        P = params[f"{prefix}.P_{g}"]
        Q = params[f"{prefix}.Q_{g}"]
        P.grad += da.T @ x
        Q.grad += da.T @ h_prev
        params[f"{prefix}.b_{g}"].grad += da.sum(axis=0)
        dx += da @ P.value
        dh_prev += da @ Q.value
    return dx, dh_prev, dc_prev


def gru_step(x: np.ndarray, h_prev: np.ndarray, params: ParamStore, prefix: str = "GRU"):
    """One GRU update, reset gate applied to h before the recurrent map. Returns ``(h, cache)``.

    z = sigmoid(P_z x + Q_z h + b_z)
    r = sigmoid(P_r x + Q_r h + b_r)
    n = tanh(P_n x + Q_n (r * h) + b_n)
    h' = (1 - z) * n + z * h
    """
    z = sigmoid(_pre(params, prefix, "z", x, h_prev))
    r = sigmoid(_pre(params, prefix, "r", x, h_prev))
    rh = r * h_prev
    n = np.tanh(_pre(params, prefix, "n", x, rh))
    h = (1 - z) * n + z * h_prev
    return h, (x, h_prev, z, r, rh, n, prefix)


def gru_step_backward(dh: np.ndarray, cache, params: ParamStore):
    x, h_prev, z, r, rh, n, prefix = cache
    dn = dh * (1 - z)
    dz = dh * (h_prev - n)
    dh_prev = dh * z
    dan = dn * (1 - n * n)
    drh = dan @ params.value(f"{prefix}.Q_n")
    dr = drh * h_prev
    dh_prev = dh_prev + drh * r
    daz = dz * z * (1 - z)
    dar = dr * r * (1 - r)
    dx = np.zeros_like(x)
    for g, da, hin in (("z", daz, h_prev), ("r", dar, h_prev), ("n", dan, rh)):
        P = params[f"{prefix}.P_{g}"]
        Q = params[f"{prefix}.Q_{g}"]
        P.grad += da.T @ x
        Q.grad += da.T @ hin
        params[f"{prefix}.b_{g}"].grad += da.sum(axis=0)
        dx += da @ P.value
        if g != "n":
            dh_prev = dh_prev + da @ Q.value
    return dx, dh_prev
