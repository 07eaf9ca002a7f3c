"""Feature-map and attention heatmaps as 8-bit grayscale PNGs, plus red lane overlays."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from . import model as net
from .backbone import DECODER_BLOCKS, ENCODER_BLOCKS
from .data import ImageSequence, to_uint8, write_png
from .nn import ParamStore

STAGES = ENCODER_BLOCKS + ("Attention",) + DECODER_BLOCKS


def to_gray8(a: np.ndarray) -> np.ndarray:
    """Map a 2-D array to uint8 so that 0 stays black and the maximum is 255.

    Negative values (possible for the logits stage) shift the floor to the minimum.
    A constant map comes out all black.
    """
    a = np.asarray(a, dtype=np.float64)
    lo = min(0.0, float(a.min()))
    hi = float(a.max())
    if hi <= lo:
        return np.zeros(a.shape, dtype=np.uint8)
    return np.rint(255.0 * (a - lo) / (hi - lo)).astype(np.uint8)


def _save(img: np.ndarray, path: Path, size: tuple[int, int] | None) -> Path:
    if size is not None and img.shape != size:
        img = np.asarray(Image.fromarray(img).resize((size[1], size[0]), Image.NEAREST))
    write_png(path, img)
    return path


def channel_mean_maps(result: net.ForwardResult, stage: str) -> np.ndarray:
    """Channel-mean activation maps of the first batch item.

    Encoder stages give one map per frame ``(N, h, w)``; the attention output
    (on the bottleneck grid) and decoder stages give a single map ``(1, h, w)``.
    """
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}; choose from {', '.join(STAGES)}")
    act = result.activations[stage][0]
    if stage in ENCODER_BLOCKS:
        return act.mean(axis=1)
    return act.mean(axis=0, keepdims=True)


def visualize_activation(seq: ImageSequence, params: ParamStore, config: net.ModelConfig, stage: str,
                         out_dir, upscale: bool = True) -> list[Path]:
    """Write channel-mean heatmaps for ``stage`` and return the file paths."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}; choose from {', '.join(STAGES)}")
    out_dir = Path(out_dir)
    result = net.forward(seq.frames, params, config)
    maps = channel_mean_maps(result, stage)
    size = (config.height, config.width) if upscale else None
    if stage in ENCODER_BLOCKS:
        return [_save(to_gray8(m), out_dir / f"{stage}_frame{k + 1}.png", size) for k, m in enumerate(maps)]
    return [_save(to_gray8(maps[0]), out_dir / f"{stage}.png", size)]


def attention_heatmaps(trace, grid: tuple[int, int], out_dir, size: tuple[int, int] | None = None) -> list[Path]:
    """One heatmap per frame of the attention weights over the bottleneck grid."""
    out_dir = Path(out_dir)
    maps = trace.weight_maps(grid)[0]
    return [_save(to_gray8(m), out_dir / f"attention_frame{k + 1}.png", size) for k, m in enumerate(maps)]


def overlay(frame_chw: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """RGB uint8 image with predicted lane pixels painted red."""
    rgb = to_uint8(frame_chw).copy()
    rgb[np.asarray(mask) != 0] = (255, 0, 0)
    return rgb
