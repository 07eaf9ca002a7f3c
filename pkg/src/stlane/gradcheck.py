"""Central finite-difference gradient checking at double precision.

Two details keep the comparison meaningful for a deep ReLU network:

* The loss is supplied as an array of per-element terms. The +eps and -eps
  evaluations are differenced term by term before summing, so the final
  rounding of a scalar loss does not swamp gradients near 1e-9.
* Each evaluation also reports its piecewise-linear pattern (ReLU on/off
  masks and max-pool argmaxes). A coordinate whose +-eps evaluations land
  on a different pattern than the unperturbed one straddles a kink, where
  the central difference is not a derivative estimate; it is replaced by
  a fresh draw.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import model as net
from .metrics import LossConfig, weighted_bce_logits, weighted_bce_terms
from .nn import ConvSpec, ParamStore, make_rng

Pattern = list[np.ndarray]
TermsFn = Callable[[], tuple[np.ndarray, Pattern | None]]


def rel_error(a, b, floor: float = 1e-12) -> np.ndarray:
    """``|a - b| / max(|a|, |b|, floor)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def numeric_grad(f: Callable[[], float], arr: np.ndarray, index: tuple, eps: float = 1e-5) -> float:
    """Central difference of scalar ``f`` w.r.t. ``arr[index]``; ``arr`` is restored afterwards."""
    old = arr[index]
    arr[index] = old + eps
    fp = f()
    arr[index] = old - eps
    fm = f()
    arr[index] = old
    return float((np.sum(np.asarray(fp, dtype=np.float64) - np.asarray(fm, dtype=np.float64))) / (2 * eps))


def numeric_grad_array(f: Callable[[], float], arr: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Dense numerical gradient over every entry of ``arr``."""
    g = np.zeros(arr.shape, dtype=np.float64)
    for idx in np.ndindex(arr.shape):
        g[idx] = numeric_grad(f, arr, idx, eps)
    return g


def activation_pattern(cache) -> Pattern:
    """ReLU masks and max-pool argmaxes found anywhere in a nested forward cache."""
    out: Pattern = []

    def walk(obj):
        if isinstance(obj, tuple) and obj and isinstance(obj[0], ConvSpec):
            if obj[4] is not None:
                out.append(obj[4] > 0)
            return
        if (isinstance(obj, tuple) and len(obj) == 3 and isinstance(obj[1], np.ndarray)
                and obj[1].dtype.kind == "i" and isinstance(obj[0], tuple)):
            out.append(obj[1])
            return
        if isinstance(obj, (tuple, list)):
            for item in obj:
                walk(item)

    walk(cache)
    return out


def _same(a: Pattern | None, b: Pattern | None) -> bool:
    if a is None or b is None:
        return True
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


@dataclass(frozen=True)
class GroupResult:
    name: str
    coords: int
    max_rel_error: float
    worst_analytic: float
    worst_numeric: float
    kinks: int = 0


def check_parameters(terms: TermsFn, backward: Callable[[], None], params: ParamStore,
                     per_group: int = 50, seed: int = 0, eps: float = 1e-5, floor: float = 1e-12,
                     groups=None) -> list[GroupResult]:
    """Compare analytic and numerical gradients on sampled coordinates.

    ``backward`` must leave the analytic gradients in ``params`` (it is called
    once with gradients zeroed). ``terms`` recomputes the loss from the current
    parameter values as ``(per_element_terms, pattern)``; the loss is the sum
    of the terms. Up to ``per_group`` distinct coordinates are checked per
    parameter; coordinates straddling a kink are replaced while any remain.
    """
    params.zero_grad()
    backward()
    _, base = terms()
    rng = make_rng(seed)
    results = []
    for p in params:
        if groups is not None and p.name not in groups:
            continue
        analytic = p.grad.copy()
        order = rng.permutation(p.value.size)
        worst = (0.0, 0.0, 0.0)
        done = kinks = 0
        for f in order:
            if done == per_group:
                break
            idx = np.unravel_index(int(f), p.value.shape)
            old = p.value[idx]
            p.value[idx] = old + eps
            tp, pp = terms()
            p.value[idx] = old - eps
            tm, pm = terms()
            p.value[idx] = old
            if not (_same(base, pp) and _same(base, pm)):
                kinks += 1
                continue
            n = float(np.sum(np.asarray(tp, np.float64) - np.asarray(tm, np.float64)) / (2 * eps))
            a = float(analytic[idx])
            e = float(rel_error(a, n, floor))
            if e >= worst[0]:
                worst = (e, a, n)
            done += 1
        results.append(GroupResult(p.name, done, *worst, kinks=kinks))
    params.zero_grad()
    return results


def model_check(frames: np.ndarray, target: np.ndarray, params: ParamStore, config: net.ModelConfig,
                loss_cfg: LossConfig, **kwargs) -> list[GroupResult]:
    """Gradient check of the full model under the weighted cross-entropy loss."""

    def terms():
        r = net.forward(frames, params, config)
        return weighted_bce_terms(r.logits, target, loss_cfg) / target.size, activation_pattern(r.cache)

    def backward():
        r = net.forward(frames, params, config)
        _, d = weighted_bce_logits(r.logits, target, loss_cfg)
        net.backward(d, r, params)

    return check_parameters(terms, backward, params, **kwargs)
