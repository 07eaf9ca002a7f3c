"""Differentiable primitives with explicit forward/backward passes.

Every forward function returns ``(out, cache)`` and the matching
``*_backward`` consumes the upstream gradient plus that cache. Arrays are
plain numpy arrays; image tensors are ``(B, C, H, W)`` and a missing batch
axis (``(C, H, W)``) is accepted and restored on the way out. The functions
are dtype-agnostic: training runs in float32, gradient checks in float64.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np


class ShapeError(ValueError):
    """Raised when a tensor does not fit the layer it is fed to."""


class NonFiniteError(ValueError):
    """Raised when NaN or Inf reaches an operation that forbids it."""


@dataclass(frozen=True)
class ConvSpec:
    name: str
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    padding: tuple[int, int] = (1, 1)
    stride: int = 1
    has_bias: bool = True
    activation: str | None = "relu"

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError(f"{self.name}: channel counts must be positive")
        if self.stride != 1:
            raise ValueError(f"{self.name}: only stride 1 convolutions are supported")
        if self.activation not in ("relu", None):
            raise ValueError(f"{self.name}: unknown activation {self.activation!r}")

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels, *self.kernel)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel
        ph, pw = self.padding
        return (h + 2 * ph - kh) // self.stride + 1, (w + 2 * pw - kw) // self.stride + 1


@dataclass
class Parameter:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise ShapeError(f"{self.name}: grad shape {self.grad.shape} != value shape {self.value.shape}")

    @property
    def size(self) -> int:
        return int(self.value.size)


class ParamStore:
    """Ordered, name-unique collection of parameters."""

    def __init__(self, params: list[Parameter] | None = None):
        self._params: OrderedDict[str, Parameter] = OrderedDict()
        for p in params or []:
            self.add(p)

    def add(self, param: Parameter) -> Parameter:
        if param.name in self._params:
            raise KeyError(f"duplicate parameter name {param.name!r}")
        self._params[param.name] = param
        return param

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def value(self, name: str) -> np.ndarray:
        return self._params[name].value

    def total_size(self) -> int:
        return sum(p.size for p in self)

    def zero_grad(self) -> None:
        for p in self:
            p.grad[...] = 0

    def astype(self, dtype) -> "ParamStore":
        return ParamStore([Parameter(p.name, p.value.astype(dtype)) for p in self])

    def copy(self) -> "ParamStore":
        return ParamStore([Parameter(p.name, p.value.copy(), p.grad.copy()) for p in self])


def check_finite(x: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{where}: non-finite values in input")


def _as_batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected a (C,H,W) or (B,C,H,W) tensor, got shape {x.shape}")


# --------------------------------------------------------------------------
# convolution

def conv2d(x: np.ndarray, spec: ConvSpec, weight: np.ndarray, bias: np.ndarray | None):
    """Cross-correlation (no kernel flip) with zero padding and optional ReLU."""
    xb, squeezed = _as_batched(x)
    if xb.shape[1] != spec.in_channels:
        raise ShapeError(f"{spec.name}: expected {spec.in_channels} input channels, got {xb.shape[1]}")
    if weight.shape != spec.weight_shape:
        raise ShapeError(f"{spec.name}: weight shape {weight.shape} != {spec.weight_shape}")
    check_finite(xb, spec.name)
    b, c, h, w = xb.shape
    kh, kw = spec.kernel
    ph, pw = spec.padding
    if h + 2 * ph < kh or w + 2 * pw < kw:
        raise ShapeError(f"{spec.name}: input {h}x{w} smaller than kernel {kh}x{kw}")
    ho, wo = spec.output_hw(h, w)

    if kh == 1 and kw == 1 and ph == 0 and pw == 0:
        cols = xb.reshape(b, c, h * w)
    else:
        xp = np.pad(xb, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
        cols = np.empty((b, c, kh, kw, ho, wo), dtype=xb.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, i, j] = xp[:, :, i:i + ho, j:j + wo]
        cols = cols.reshape(b, c * kh * kw, ho * wo)
    wmat = weight.reshape(spec.out_channels, -1)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias[:, None]
    out = out.reshape(b, spec.out_channels, ho, wo)
    if spec.activation == "relu":
        np.maximum(out, 0, out=out)
    cache = (spec, xb.shape, cols, weight, out if spec.activation == "relu" else None, squeezed, bias is not None)
    return (out[0] if squeezed else out), cache


def conv2d_backward(dout: np.ndarray, cache):
    """Returns ``(dx, dweight, dbias)``; ``dbias`` is None for bias-free layers."""
    spec, xshape, cols, weight, relu_out, squeezed, has_bias = cache
    db_, _ = _as_batched(dout)
    if relu_out is not None:
        db_ = db_ * (relu_out > 0)
    b, c, h, w = xshape
    kh, kw = spec.kernel
    ph, pw = spec.padding
    ho, wo = spec.output_hw(h, w)
    dmat = db_.reshape(b, spec.out_channels, ho * wo)
    wmat = weight.reshape(spec.out_channels, -1)
    # fixed reduction order over the batch keeps gradients deterministic
    dw = dmat[0] @ cols[0].T
    for k in range(1, b):
        dw += dmat[k] @ cols[k].T
    dweight = dw.reshape(spec.weight_shape)
    dbias = dmat.sum(axis=(0, 2)) if has_bias else None
    dcols = np.matmul(wmat.T, dmat)

    if kh == 1 and kw == 1 and ph == 0 and pw == 0:
        dx = dcols.reshape(b, c, h, w)
    else:
        dcols = dcols.reshape(b, c, kh, kw, ho, wo)
        dxp = np.zeros((b, c, h + 2 * ph, w + 2 * pw), dtype=dcols.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + ho, j:j + wo] += dcols[:, :, i, j]
        dx = np.ascontiguousarray(dxp[:, :, ph:ph + h, pw:pw + w])
    return (dx[0] if squeezed else dx), dweight, dbias


# --------------------------------------------------------------------------
# pooling / upsampling

def maxpool2x2(x: np.ndarray):
    xb, squeezed = _as_batched(x)
    b, c, h, w = xb.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial extents, got {h}x{w}")
    win = xb.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
    # argmax returns the first maximum, i.e. scan order (0,0),(0,1),(1,0),(1,1)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    cache = (xb.shape, idx, squeezed)
    return (out[0] if squeezed else out), cache


def maxpool2x2_backward(dout: np.ndarray, cache) -> np.ndarray:
    shape, idx, squeezed = cache
    db_, _ = _as_batched(dout)
    b, c, h, w = shape
    dwin = np.zeros((b, c, h // 2, w // 2, 4), dtype=db_.dtype)
    np.put_along_axis(dwin, idx[..., None], db_[..., None], axis=-1)
    dx = dwin.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)
    return dx[0] if squeezed else dx


def bilinear_matrix(n: int, dtype=np.float64) -> np.ndarray:
    """(2n, n) interpolation matrix, half-pixel centres, clamped at the edges."""
    m = np.zeros((2 * n, n), dtype=dtype)
    for i in range(2 * n):
        src = min(max((i + 0.5) / 2 - 0.5, 0.0), n - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n - 1)
        frac = src - lo
        m[i, lo] += 1 - frac
        m[i, hi] += frac
    return m


def upsample_bilinear_2x(x: np.ndarray):
    xb, squeezed = _as_batched(x)
    _, _, h, w = xb.shape
    if h < 1 or w < 1:
        raise ShapeError(f"upsample needs non-empty input, got {h}x{w}")
    ah = bilinear_matrix(h, xb.dtype)
    aw = bilinear_matrix(w, xb.dtype)
    out = np.matmul(np.matmul(ah, xb), aw.T)
    cache = (ah, aw, squeezed)
    return (out[0] if squeezed else out), cache


def upsample_bilinear_2x_backward(dout: np.ndarray, cache) -> np.ndarray:
    ah, aw, squeezed = cache
    db_, _ = _as_batched(dout)
    dx = np.matmul(np.matmul(ah.T, db_), aw)
    return dx[0] if squeezed else dx


# --------------------------------------------------------------------------
# pointwise / dense

def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(dout: np.ndarray, y: np.ndarray, axis: int = -1) -> np.ndarray:
    return y * (dout - (dout * y).sum(axis=axis, keepdims=True))


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None, name: str = "linear"):
    """Affine map on the last axis: ``x @ weight.T + bias``."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"{name}: input length {x.shape[-1]} != weight in-features {weight.shape[1]}")
    out = x @ weight.T
    if bias is not None:
        out = out + bias
    return out, (x, weight, bias is not None)


def linear_backward(dout: np.ndarray, cache):
    x, weight, has_bias = cache
    dx = dout @ weight
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    dweight = d2.T @ x2
    dbias = d2.sum(axis=0) if has_bias else None
    return dx, dweight, dbias


# --------------------------------------------------------------------------
# initialization

def make_rng(seed: int) -> np.random.Generator:
    """Philox4x64 counter-based generator; the only RNG used for weights and data."""
    return np.random.Generator(np.random.Philox(int(seed)))


def fan_in_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, gain: float = 2.0,
                  dtype=np.float32) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(gain / fan_in)).astype(dtype)
