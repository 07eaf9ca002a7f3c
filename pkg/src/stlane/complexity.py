"""Analytic trainable-parameter and multiply-accumulate counts.

MAC convention:

* convolution: H_out * W_out * C_out * C_in * kh * kw
* dense map:   D_in * D_out
* Hadamard weighting (tem/st attention): D per product
* LSTM step:   4 * (D*D + D*D); GRU step: 3 * (D*D + D*D)
* bias, activations, pooling, upsampling, softmax: 0

The encoder and the per-frame attention work are counted once per frame, the
attention output projection and decoder once per sequence. With this
convention a single-frame UNet pass at 128x256 is ~15.5 G and the five-frame
models are ~44.7 G.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import backbone
from .attention import AttentionVariant, Extractor, k_in_spec, k_out_spec
from .model import ModelConfig
from .nn import ConvSpec

HEADER = ("MACs: conv=Ho*Wo*Cout*Cin*kh*kw, dense=Din*Dout, hadamard=D; "
          "encoder and attention x N frames, decoder x 1; bias/activation/pool/upsample = 0")


@dataclass(frozen=True)
class LayerCount:
    name: str
    params: int
    macs: int
    repeat: int = 1


@dataclass
class ComplexityReport:
    model: str
    rows: list[LayerCount] = field(default_factory=list)

    @property
    def params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def macs(self) -> int:
        return sum(r.macs * r.repeat for r in self.rows)

    @property
    def params_m(self) -> float:
        return self.params / 1e6

    @property
    def macs_g(self) -> float:
        return self.macs / 1e9

    def subset(self, names) -> "ComplexityReport":
        keep = set(names)
        return ComplexityReport(self.model, [r for r in self.rows if r.name in keep])

    def table(self) -> str:
        width = max(len(r.name) for r in self.rows) + 2
        lines = [f"# {self.model}", f"# {HEADER}",
                 f"{'layer':<{width}}{'params':>12}{'macs':>16}{'x':>4}"]
        for r in self.rows:
            lines.append(f"{r.name:<{width}}{r.params:>12,}{r.macs:>16,}{r.repeat:>4}")
        lines.append(f"{'TOTAL':<{width}}{self.params:>12,}{self.macs:>16,}")
        lines.append(f"params_M={self.params_m:.4f} macs_G={self.macs_g:.4f}")
        return "\n".join(lines)

    def key_values(self) -> list[str]:
        return [f"model={self.model}", f"params={self.params}", f"params_M={self.params_m:.6f}",
                f"macs={self.macs}", f"macs_G={self.macs_g:.6f}"]


def conv_params(spec: ConvSpec) -> int:
    kh, kw = spec.kernel
    return (spec.in_channels * kh * kw + (1 if spec.has_bias else 0)) * spec.out_channels


def conv_macs(spec: ConvSpec, h_out: int, w_out: int) -> int:
    kh, kw = spec.kernel
    return h_out * w_out * spec.out_channels * spec.in_channels * kh * kw


def _backbone_rows(config: ModelConfig, frames: int) -> list[LayerCount]:
    rows = []
    h, w = config.height, config.width
    for block, specs in backbone.encoder_specs(config.channels).items():
        if block != "In_ConvBlock":
            h, w = h // 2, w // 2
        rows += [LayerCount(s.name, conv_params(s), conv_macs(s, h, w), frames) for s in specs]
    for block, specs in backbone.decoder_specs(config.channels).items():
        if block != "Out_ConvBlock":
            h, w = h * 2, w * 2
        rows += [LayerCount(s.name, conv_params(s), conv_macs(s, h, w), 1) for s in specs]
    return rows


def _attention_rows(config: ModelConfig) -> list[LayerCount]:
    d = config.hidden
    gh, gw = config.grid
    n = config.frames
    c3 = config.channels[3]
    k_in, k_out = k_in_spec(c3), k_out_spec(c3)
    rows = [LayerCount(k_in.name, conv_params(k_in), conv_macs(k_in, gh, gw), n)]
    for name in ("AttentionLayer_1", "AttentionLayer_2", "AttentionLayer_3"):
        if config.variant is AttentionVariant.TEM:
            rows.append(LayerCount(name, 1, d, n))
        elif config.variant is AttentionVariant.ST:
            rows.append(LayerCount(name, d, d, n))
        else:
            rows.append(LayerCount(name, (d + 1) * d, d * d, n))
    rows.append(LayerCount("AttentionWeighting", 0, d, n))
    if config.extractor is Extractor.LSTM:
        rows.append(LayerCount("LSTM", 4 * (2 * d * d + d), 4 * 2 * d * d, n))
    else:
        rows.append(LayerCount("GRU", 3 * (2 * d * d + d), 3 * 2 * d * d, n))
    rows.append(LayerCount(k_out.name, conv_params(k_out), conv_macs(k_out, gh, gw), 1))
    return rows


def _report(config: ModelConfig, backbone_only: bool) -> ComplexityReport:
    if backbone_only:
        return ComplexityReport("UNet (single frame)", _backbone_rows(config, 1))
    rows = _backbone_rows(config, config.frames)
    # encoder rows first, then attention, then decoder
    n_enc = sum(len(v) for v in backbone.encoder_specs(config.channels).values())
    rows = rows[:n_enc] + _attention_rows(config) + rows[n_enc:]
    return ComplexityReport(f"{config.name} N={config.frames} {config.height}x{config.width}", rows)


def count_params(config: ModelConfig, backbone_only: bool = False) -> ComplexityReport:
    return _report(config, backbone_only)


def count_macs(config: ModelConfig, backbone_only: bool = False) -> ComplexityReport:
    return _report(config, backbone_only)


def encoder_macs_per_frame(config: ModelConfig) -> int:
    names = {s.name for block in backbone.encoder_specs(config.channels).values() for s in block}
    return sum(r.macs for r in _backbone_rows(config, 1) if r.name in names)


def attention_macs_per_frame(config: ModelConfig) -> int:
    return sum(r.macs for r in _attention_rows(config) if r.name != "Out_Attention_Conv_5_2")
