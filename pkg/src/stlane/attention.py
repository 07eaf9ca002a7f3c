"""Spatial-temporal attention between encoder and decoder.

Per frame n the bottleneck map is squeezed to one channel and flattened
(``x``), mixed with the previous hidden state (``z = U.x + H.h``), turned into
weights over the flattened positions (``w = softmax(W.z)``) and used to
reweight the input (``xbar = w * x``). ``xbar`` drives one step of the
recurrent extractor. After the last frame the hidden state is reshaped to the
bottleneck grid and expanded back to the bottleneck channel count.

How ``U``, ``H`` and ``W`` act depends on the variant:

=======  ==========================================
tem      one scalar each, broadcast over positions
st       one length-D vector each, elementwise
stfc     a full D -> D affine map each
=======  ==========================================
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import recurrent
from .nn import (ConvSpec, NonFiniteError, ParamStore, Parameter, ShapeError, conv2d, conv2d_backward,
                 fan_in_normal, linear, linear_backward, softmax, softmax_backward)

# layer names, in order: input weighting, hidden weighting, attention weighting
ATTENTION_LAYERS = ("AttentionLayer_1", "AttentionLayer_2", "AttentionLayer_3")


class AttentionVariant(str, Enum):
    TEM = "tem"
    ST = "st"
    STFC = "stfc"


class Extractor(str, Enum):
    LSTM = "lstm"
    GRU = "gru"


def k_in_spec(channels: int) -> ConvSpec:
    return ConvSpec("In_Attention_Conv_5_1", channels, 1, (1, 1), (0, 0), activation=None)


def k_out_spec(channels: int) -> ConvSpec:
    return ConvSpec("Out_Attention_Conv_5_2", 1, channels, (1, 1), (0, 0), activation=None)


def attention_param_count(variant: AttentionVariant, hidden: int) -> int:
    variant = AttentionVariant(variant)
    if variant is AttentionVariant.TEM:
        return 3
    if variant is AttentionVariant.ST:
        return 3 * hidden
    return 3 * (hidden * hidden + hidden)


def init_attention(store: ParamStore, variant: AttentionVariant, hidden: int, rng: np.random.Generator,
                   dtype=np.float32) -> None:
    variant = AttentionVariant(variant)
    for name in ATTENTION_LAYERS:
        if variant is AttentionVariant.TEM:
            store.add(Parameter(f"{name}.weight", np.ones(1, dtype)))
        elif variant is AttentionVariant.ST:
            store.add(Parameter(f"{name}.weight", np.ones(hidden, dtype)))
        else:
            store.add(Parameter(f"{name}.weight", fan_in_normal(rng, (hidden, hidden), hidden, 1.0, dtype)))
            store.add(Parameter(f"{name}.bias", np.zeros(hidden, dtype)))


@dataclass
class AttentionTrace:
    """Per-frame intermediates of one forward pass, all batched ``(B, N, D)``."""

    x: np.ndarray
    z: np.ndarray
    w: np.ndarray
    xbar: np.ndarray
    h: np.ndarray
    h_final: np.ndarray
    c_final: np.ndarray | None
    x_out: np.ndarray

    @property
    def frames(self) -> int:
        return self.w.shape[1]

    def weight_maps(self, grid: tuple[int, int]) -> np.ndarray:
        """Attention weights reshaped (row-major) to ``(B, N, gh, gw)``."""
        b, n, _ = self.w.shape
        return self.w.reshape(b, n, *grid)

    def save(self, path) -> None:
        arrays = {k: v for k, v in vars(self).items() if v is not None}
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path) -> "AttentionTrace":
        with np.load(path) as data:
            fields = {k: data[k] for k in data.files}
        fields.setdefault("c_final", None)
        return cls(**fields)


# --------------------------------------------------------------------------

def reduce_bottleneck(x_down4: np.ndarray, params: ParamStore):
    """1x1 conv to a single channel, then row-major flatten: (B,C,h,w) -> (B, h*w)."""
    spec = k_in_spec(x_down4.shape[-3])
    out, cache = conv2d(x_down4, spec, params.value(f"{spec.name}.weight"), params.value(f"{spec.name}.bias"))
    lead = out.shape[:-3]
    return out.reshape(*lead, -1), (cache, out.shape)


def reduce_bottleneck_backward(dx: np.ndarray, cache, params: ParamStore) -> np.ndarray:
    conv_cache, shape = cache
    dxd, dw, db = conv2d_backward(dx.reshape(shape), conv_cache)
    name = conv_cache[0].name
    params[f"{name}.weight"].grad += dw
    params[f"{name}.bias"].grad += db
    return dxd


def _mix(v: np.ndarray, layer: str, variant: AttentionVariant, params: ParamStore):
    if variant is AttentionVariant.STFC:
        return linear(v, params.value(f"{layer}.weight"), params.value(f"{layer}.bias"), layer)
    return v * params.value(f"{layer}.weight"), v


def _mix_backward(dout: np.ndarray, cache, layer: str, variant: AttentionVariant, params: ParamStore):
    if variant is AttentionVariant.STFC:
        dv, dw, db = linear_backward(dout, cache)
        params[f"{layer}.weight"].grad += dw
        params[f"{layer}.bias"].grad += db
        return dv
    v = cache
    weight = params[f"{layer}.weight"]
    g = (dout * v).sum(axis=0)
    weight.grad += g.sum(keepdims=True) if weight.value.size == 1 else g
    return dout * weight.value


def attention_step(x: np.ndarray, h_prev: np.ndarray, variant: AttentionVariant, params: ParamStore,
                   frame: int = 0):
    """Returns ``(w, xbar, z, cache)`` for one frame; inputs are ``(B, D)``."""
    variant = AttentionVariant(variant)
    if x.shape != h_prev.shape:
        raise ShapeError(f"attention frame {frame}: x {x.shape} and h {h_prev.shape} differ")
    ux, cu = _mix(x, ATTENTION_LAYERS[0], variant, params)
    hh, ch = _mix(h_prev, ATTENTION_LAYERS[1], variant, params)
    z = ux + hh
    a, ca = _mix(z, ATTENTION_LAYERS[2], variant, params)
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"attention frame {frame}: non-finite attention logits")
    w = softmax(a, axis=-1)
    xbar = w * x
    return w, xbar, z, (x, w, cu, ch, ca, variant)


def attention_step_backward(dxbar: np.ndarray, cache, params: ParamStore):
    """Returns ``(dx, dh_prev)`` and accumulates the U/H/W gradients."""
    x, w, cu, ch, ca, variant = cache
    dx = dxbar * w
    dw = dxbar * x
    da = softmax_backward(dw, w, axis=-1)
    dz = _mix_backward(da, ca, ATTENTION_LAYERS[2], variant, params)
    dh_prev = _mix_backward(dz, ch, ATTENTION_LAYERS[1], variant, params)
    dx = dx + _mix_backward(dz, cu, ATTENTION_LAYERS[0], variant, params)
    return dx, dh_prev


def attention_forward(xs: np.ndarray, grid: tuple[int, int], variant: AttentionVariant,
                      extractor: Extractor, params: ParamStore, h0: np.ndarray | None = None,
                      c0: np.ndarray | None = None):
    """Run the attention/recurrent loop over ``xs`` of shape ``(B, N, D)``.

    Returns ``(x_out, trace, cache)`` with ``x_out`` shaped ``(B, C, gh, gw)``.
    """
    variant = AttentionVariant(variant)
    extractor = Extractor(extractor)
    if xs.ndim != 3:
        raise ShapeError(f"expected (B, N, D) reduced features, got {xs.shape}")
    b, n_frames, d = xs.shape
    if n_frames < 1:
        raise ShapeError("attention needs at least one frame")
    if grid[0] * grid[1] != d:
        raise ShapeError(f"grid {grid} does not hold {d} features")
    h = np.zeros((b, d), xs.dtype) if h0 is None else h0
    c = np.zeros((b, d), xs.dtype) if c0 is None else c0

    zs, ws, xbars, hs, steps = [], [], [], [], []
    for n in range(n_frames):
        w, xbar, z, att_cache = attention_step(xs[:, n], h, variant, params, frame=n)
        if extractor is Extractor.LSTM:
            h, c, rec_cache = recurrent.lstm_step(xbar, h, c, params)
        else:
            h, rec_cache = recurrent.gru_step(xbar, h, params)
        zs.append(z)
        ws.append(w)
        xbars.append(xbar)
        hs.append(h)
        steps.append((att_cache, rec_cache))

    out_spec = k_out_spec(params.value("Out_Attention_Conv_5_2.weight").shape[0])
    hmap = h.reshape(b, 1, *grid)
    x_out, out_cache = conv2d(hmap, out_spec, params.value(f"{out_spec.name}.weight"),
                              params.value(f"{out_spec.name}.bias"))
    trace = AttentionTrace(
        x=xs, z=np.stack(zs, 1), w=np.stack(ws, 1), xbar=np.stack(xbars, 1), h=np.stack(hs, 1),
        h_final=h, c_final=c if extractor is Extractor.LSTM else None, x_out=x_out,
    )
    return x_out, trace, (steps, out_cache, extractor, xs.shape)


def attention_backward(dx_out: np.ndarray, cache, params: ParamStore) -> np.ndarray:
    """Gradient of the loss w.r.t. the reduced features ``xs``."""
    steps, out_cache, extractor, xs_shape = cache
    dhmap, dw, db = conv2d_backward(dx_out, out_cache)
    name = out_cache[0].name
    params[f"{name}.weight"].grad += dw
    params[f"{name}.bias"].grad += db
    b, n_frames, d = xs_shape
    dh = dhmap.reshape(b, d)
    dc = np.zeros_like(dh)
    dxs = np.zeros(xs_shape, dtype=dh.dtype)
    for n in reversed(range(n_frames)):
        att_cache, rec_cache = steps[n]
        if extractor is Extractor.LSTM:
            dxbar, dh, dc = recurrent.lstm_step_backward(dh, dc, rec_cache, params)
        else:
            dxbar, dh = recurrent.gru_step_backward(dh, rec_cache, params)
        dx, dh_att = attention_step_backward(dxbar, att_cache, params)
        dh = dh + dh_att
        dxs[:, n] = dx
    return dxs
