"""UNet encoder/decoder: the In, Down, Up and Out conv blocks and their layer names.

Encoder: In_ConvBlock, then Down_ConvBlock_1..4 (maxpool + two 3x3 convs).
Decoder: Up_ConvBlock_4..1 (bilinear x2, concat skip, two 3x3 convs) and a
1x1 Out_Conv producing two-class logits. Skips are the outputs of
In_ConvBlock and Down_ConvBlock_1..3; the decoder concatenates
``[upsampled, skip]`` along channels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import (ConvSpec, ParamStore, Parameter, ShapeError, conv2d, conv2d_backward, fan_in_normal,
                 maxpool2x2, maxpool2x2_backward, upsample_bilinear_2x, upsample_bilinear_2x_backward)

FULL_CHANNELS = (64, 128, 256, 512)

ENCODER_BLOCKS = ("In_ConvBlock", "Down_ConvBlock_1", "Down_ConvBlock_2", "Down_ConvBlock_3", "Down_ConvBlock_4")
DECODER_BLOCKS = ("Up_ConvBlock_4", "Up_ConvBlock_3", "Up_ConvBlock_2", "Up_ConvBlock_1", "Out_ConvBlock")


def channel_schedule(divisor: int = 1) -> tuple[int, int, int, int]:
    if divisor < 1 or any(c % divisor for c in FULL_CHANNELS):
        raise ValueError(f"channel divisor {divisor} must divide {FULL_CHANNELS}")
    return tuple(c // divisor for c in FULL_CHANNELS)  # type: ignore[return-value]


def encoder_specs(channels: tuple[int, int, int, int]) -> dict[str, list[ConvSpec]]:
    c0, c1, c2, c3 = channels
    return {
        "In_ConvBlock": [ConvSpec("In_Conv_1", 3, c0), ConvSpec("In_Conv_2", c0, c0)],
        "Down_ConvBlock_1": [ConvSpec("Down_Conv_1_1", c0, c1), ConvSpec("Down_Conv_1_2", c1, c1)],
        "Down_ConvBlock_2": [ConvSpec("Down_Conv_2_1", c1, c2), ConvSpec("Down_Conv_2_2", c2, c2)],
        "Down_ConvBlock_3": [ConvSpec("Down_Conv_3_1", c2, c3), ConvSpec("Down_Conv_3_2", c3, c3)],
        "Down_ConvBlock_4": [ConvSpec("Down_Conv_4_1", c3, c3), ConvSpec("Down_Conv_4_2", c3, c3)],
    }


def decoder_specs(channels: tuple[int, int, int, int]) -> dict[str, list[ConvSpec]]:
    c0, c1, c2, c3 = channels
    return {
        "Up_ConvBlock_4": [ConvSpec("Up_Conv_4_1", 2 * c3, c2), ConvSpec("Up_Conv_4_2", c2, c2)],
        "Up_ConvBlock_3": [ConvSpec("Up_Conv_3_1", 2 * c2, c1), ConvSpec("Up_Conv_3_2", c1, c1)],
        "Up_ConvBlock_2": [ConvSpec("Up_Conv_2_1", 2 * c1, c0), ConvSpec("Up_Conv_2_2", c0, c0)],
        "Up_ConvBlock_1": [ConvSpec("Up_Conv_1_1", 2 * c0, c0), ConvSpec("Up_Conv_1_2", c0, c0)],
        "Out_ConvBlock": [ConvSpec("Out_Conv", c0, 2, (1, 1), (0, 0), activation=None)],
    }


def backbone_specs(channels: tuple[int, int, int, int]) -> list[ConvSpec]:
    specs = [s for block in encoder_specs(channels).values() for s in block]
    return specs + [s for block in decoder_specs(channels).values() for s in block]


def init_conv(store: ParamStore, spec: ConvSpec, rng: np.random.Generator, dtype=np.float32,
              gain: float | None = None) -> None:
    fan_in = spec.in_channels * spec.kernel[0] * spec.kernel[1]
    if gain is None:
        gain = 2.0 if spec.activation == "relu" else 1.0
    store.add(Parameter(f"{spec.name}.weight", fan_in_normal(rng, spec.weight_shape, fan_in, gain, dtype)))
    if spec.has_bias:
        store.add(Parameter(f"{spec.name}.bias", np.zeros(spec.out_channels, dtype)))


def init_backbone(store: ParamStore, channels, rng: np.random.Generator, dtype=np.float32) -> None:
    for spec in backbone_specs(channels):
        init_conv(store, spec, rng, dtype)


def apply_conv(x, spec: ConvSpec, params: ParamStore):
    bias = params.value(f"{spec.name}.bias") if spec.has_bias else None
    return conv2d(x, spec, params.value(f"{spec.name}.weight"), bias)


def apply_conv_backward(dout, cache, params: ParamStore):
    spec = cache[0]
    dx, dw, db = conv2d_backward(dout, cache)
    params[f"{spec.name}.weight"].grad += dw
    if db is not None:
        params[f"{spec.name}.bias"].grad += db
    return dx


@dataclass
class EncoderOutput:
    bottleneck: np.ndarray
    skips: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]
    activations: dict[str, np.ndarray]


def _infer_channels(params: ParamStore) -> tuple[int, int, int, int]:
    return (params.value("In_Conv_1.weight").shape[0], params.value("Down_Conv_1_1.weight").shape[0],
            params.value("Down_Conv_2_1.weight").shape[0], params.value("Down_Conv_3_1.weight").shape[0])


def encode(frames: np.ndarray, params: ParamStore):
    """Encode ``(B, 3, H, W)`` frames. Returns ``(EncoderOutput, cache)``."""
    h, w = frames.shape[-2:]
    if h % 16 or w % 16:
        raise ShapeError(f"frame size {h}x{w} is not divisible by 16")
    specs = encoder_specs(_infer_channels(params))
    x = frames
    caches = []
    skips = []
    acts = {}
    for block, convs in specs.items():
        pool_cache = None
        if block != "In_ConvBlock":
            x, pool_cache = maxpool2x2(x)
        conv_caches = []
        for spec in convs:
            x, cc = apply_conv(x, spec, params)
            conv_caches.append(cc)
        caches.append((pool_cache, conv_caches))
        acts[block] = x
        if block != "Down_ConvBlock_4":
            skips.append(x)
    return EncoderOutput(x, tuple(skips), acts), caches  # type: ignore[arg-type]


def encode_frame(frame: np.ndarray, params: ParamStore) -> EncoderOutput:
    """Single-frame convenience wrapper around :func:`encode` for ``(3, H, W)`` input."""
    out, _ = encode(frame[None], params)
    return EncoderOutput(out.bottleneck[0], tuple(s[0] for s in out.skips),  # type: ignore[arg-type]
                         {k: v[0] for k, v in out.activations.items()})


def encode_backward(dbottleneck: np.ndarray, dskips, caches, params: ParamStore) -> np.ndarray:
    """``dskips`` entries may be None (no gradient reaching that skip)."""
    dx = dbottleneck
    for k in reversed(range(len(caches))):
        pool_cache, conv_caches = caches[k]
        if k < 4 and dskips[k] is not None:
            dx = dx + dskips[k]
        for cc in reversed(conv_caches):
            dx = apply_conv_backward(dx, cc, params)
        if pool_cache is not None:
            dx = maxpool2x2_backward(dx, pool_cache)
    return dx


def decode(features: np.ndarray, skips, params: ParamStore):
    """Decode ``(B, C3, h, w)`` features with last-frame skips into ``(B, 2, H, W)`` logits."""
    specs = decoder_specs(_infer_channels(params))
    x = features
    caches = []
    acts = {}
    for stage, (block, convs) in enumerate(specs.items()):
        up_cache = None
        split = None
        if block != "Out_ConvBlock":
            skip = skips[3 - stage]
            x, up_cache = upsample_bilinear_2x(x)
            if x.shape[-2:] != skip.shape[-2:] or x.shape[0] != skip.shape[0]:
                raise ShapeError(f"{block}: upsampled {x.shape} does not match skip {skip.shape}")
            split = x.shape[1]
            x = np.concatenate([x, skip], axis=1)
            if x.shape[1] != convs[0].in_channels:
                raise ShapeError(f"{block}: concatenated {x.shape[1]} channels, expected {convs[0].in_channels}")
        conv_caches = []
        for spec in convs:
            x, cc = apply_conv(x, spec, params)
            conv_caches.append(cc)
        caches.append((up_cache, split, conv_caches))
        acts[block] = x
    return x, acts, caches


def decode_backward(dlogits: np.ndarray, caches, params: ParamStore):
    """Returns ``(dfeatures, dskips)`` with ``dskips`` ordered like the encoder skips."""
    dx = dlogits
    dskips = [None] * 4
    for stage in reversed(range(len(caches))):
        up_cache, split, conv_caches = caches[stage]
        for cc in reversed(conv_caches):
            dx = apply_conv_backward(dx, cc, params)
        if up_cache is not None:
            dskips[3 - stage] = dx[:, split:]
            dx = upsample_bilinear_2x_backward(np.ascontiguousarray(dx[:, :split]), up_cache)
    return dx, dskips
