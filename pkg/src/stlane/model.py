"""Sequence-to-one lane segmentation network.

N frames go through the shared encoder; their bottlenecks feed the attention
module and recurrent extractor; the decoder combines the attention output
with the skip features of the last frame and predicts its lane mask.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import backbone
from .attention import (AttentionTrace, AttentionVariant, Extractor, attention_backward, attention_forward,
                        init_attention, k_in_spec, k_out_spec, reduce_bottleneck, reduce_bottleneck_backward)
from .nn import ParamStore, ShapeError, make_rng
from .recurrent import init_gru, init_lstm


@dataclass(frozen=True)
class ModelConfig:
    variant: AttentionVariant = AttentionVariant.ST
    extractor: Extractor = Extractor.LSTM
    frames: int = 5
    height: int = 128
    width: int = 256
    channel_divisor: int = 1
    stream_hidden: bool = False

    def __post_init__(self):
        object.__setattr__(self, "variant", AttentionVariant(self.variant))
        object.__setattr__(self, "extractor", Extractor(self.extractor))
        if self.frames < 1:
            raise ValueError(f"frames must be >= 1, got {self.frames}")
        if self.height < 16 or self.width < 16 or self.height % 16 or self.width % 16:
            raise ValueError(f"height/width must be positive multiples of 16, got {self.height}x{self.width}")
        backbone.channel_schedule(self.channel_divisor)

    @property
    def grid(self) -> tuple[int, int]:
        return self.height // 16, self.width // 16

    @property
    def hidden(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def channels(self) -> tuple[int, int, int, int]:
        return backbone.channel_schedule(self.channel_divisor)

    @property
    def name(self) -> str:
        prefix = {"tem": "Tem_Att", "st": "ST_Att", "stfc": "STFC_Att"}[self.variant.value]
        return f"{prefix}-UNet_{self.extractor.name}"

    def to_dict(self) -> dict[str, str]:
        out = {}
        for k, v in asdict(self).items():
            if isinstance(v, bool):
                out[k] = str(int(v))
            elif isinstance(v, (AttentionVariant, Extractor)):
                out[k] = v.value
            else:
                out[k] = str(v)
        return out

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "ModelConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            raw = d[f.name]
            if f.name in ("variant", "extractor"):
                kwargs[f.name] = raw
            elif f.name == "stream_hidden":
                kwargs[f.name] = str(raw).lower() in ("1", "true", "yes")
            else:
                kwargs[f.name] = int(raw)
        return cls(**kwargs)


def init_parameters(config: ModelConfig, seed: int = 0, dtype=np.float32) -> ParamStore:
    """Deterministic initialization.

    Convolutions and dense maps get fan-in scaled normal weights, biases are
    zero except the LSTM forget gate (1.0), and the scalar/vector attention
    weights start at 1.0.
    """
    rng = make_rng(seed)
    store = ParamStore()
    backbone.init_backbone(store, config.channels, rng, dtype)
    c3 = config.channels[3]
    backbone.init_conv(store, k_in_spec(c3), rng, dtype)
    init_attention(store, config.variant, config.hidden, rng, dtype)
    if config.extractor is Extractor.LSTM:
        init_lstm(store, config.hidden, rng, dtype)
    else:
        init_gru(store, config.hidden, rng, dtype)
    backbone.init_conv(store, k_out_spec(c3), rng, dtype)
    return store


@dataclass
class ForwardResult:
    logits: np.ndarray
    trace: AttentionTrace
    activations: dict[str, np.ndarray] = field(repr=False)
    cache: tuple = field(repr=False)


def _validate_frames(frames, config: ModelConfig) -> np.ndarray:
    expected = (3, config.height, config.width)
    if isinstance(frames, (list, tuple)):
        # a list of per-frame arrays may be ragged; report the first bad one
        if len(frames) != config.frames:
            raise ShapeError(f"sequence has {len(frames)} frames, model expects {config.frames}")
        for i, f in enumerate(frames):
            if np.shape(f) != expected:
                raise ShapeError(f"frame {i} has shape {np.shape(f)}, expected {expected}")
        frames = np.stack(frames)
    frames = np.asarray(frames)
    if frames.ndim == 4:
        frames = frames[None]
    if frames.ndim != 5:
        raise ShapeError(f"expected (B, N, 3, H, W) frames, got shape {frames.shape}")
    if frames.shape[1] != config.frames:
        raise ShapeError(f"sequence has {frames.shape[1]} frames, model expects {config.frames}")
    if frames.shape[2:] != expected:
        raise ShapeError(f"frame 0 has shape {frames.shape[2:]}, expected {expected}")
    return frames


def forward(frames: np.ndarray, params: ParamStore, config: ModelConfig,
            h0: np.ndarray | None = None, c0: np.ndarray | None = None) -> ForwardResult:
    """Forward a batch ``(B, N, 3, H, W)`` (or one ``(N, 3, H, W)`` sequence)."""
    frames = _validate_frames(frames, config)
    b, n = frames.shape[:2]
    flat = frames.reshape(b * n, *frames.shape[2:])
    enc, enc_cache = backbone.encode(flat, params)
    xs, red_cache = reduce_bottleneck(enc.bottleneck, params)
    xs = xs.reshape(b, n, -1)
    x_out, trace, att_cache = attention_forward(xs, config.grid, config.variant, config.extractor, params, h0, c0)
    skips = [s.reshape(b, n, *s.shape[1:])[:, -1] for s in enc.skips]
    logits, dec_acts, dec_cache = backbone.decode(x_out, skips, params)
    acts = {k: v.reshape(b, n, *v.shape[1:]) for k, v in enc.activations.items()}
    acts["Attention"] = x_out
    acts.update(dec_acts)
    return ForwardResult(logits, trace, acts, (enc_cache, red_cache, att_cache, dec_cache, b, n))


def backward(dlogits: np.ndarray, result: ForwardResult, params: ParamStore) -> None:
    """Accumulate parameter gradients for upstream ``dlogits`` ``(B, 2, H, W)``."""
    enc_cache, red_cache, att_cache, dec_cache, b, n = result.cache
    dx_out, dskips = backbone.decode_backward(dlogits, dec_cache, params)
    dxs = attention_backward(dx_out, att_cache, params)
    dbottleneck = reduce_bottleneck_backward(dxs.reshape(b * n, -1), red_cache, params)
    full_skips = []
    for ds in dskips:
        z = np.zeros((b, n, *ds.shape[1:]), dtype=ds.dtype)
        z[:, -1] = ds
        full_skips.append(z.reshape(b * n, *ds.shape[1:]))
    backbone.encode_backward(dbottleneck, full_skips, enc_cache, params)


class LaneNet:
    """Parameters plus config, with optional hidden-state streaming at inference."""

    def __init__(self, config: ModelConfig, params: ParamStore | None = None, seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_parameters(config, seed)
        self._state: tuple[np.ndarray, np.ndarray | None] | None = None

    def reset_state(self) -> None:
        self._state = None

    def forward(self, frames: np.ndarray, stream: bool | None = None) -> ForwardResult:
        stream = self.config.stream_hidden if stream is None else stream
        h0 = c0 = None
        if stream and self._state is not None:
            h0, c0 = self._state
        result = forward(frames, self.params, self.config, h0, c0)
        if stream:
            self._state = (result.trace.h_final, result.trace.c_final)
        return result

    def backward(self, dlogits: np.ndarray, result: ForwardResult) -> None:
        backward(dlogits, result, self.params)

    def predict(self, frames: np.ndarray) -> np.ndarray:
        return predict_mask(self.forward(frames).logits)


def predict_mask(logits: np.ndarray) -> np.ndarray:
    """Per-pixel argmax over the two channels; ties go to background."""
    return (logits[..., 1, :, :] > logits[..., 0, :, :]).astype(np.uint8)


def lane_probability(logits: np.ndarray) -> np.ndarray:
    """Channel-softmax probability of the lane class."""
    d = logits[..., 1, :, :] - logits[..., 0, :, :]
    return 0.5 * (1.0 + np.tanh(0.5 * d))
