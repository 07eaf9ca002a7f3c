import pytest

from stlane import backbone
from stlane.complexity import (HEADER, attention_macs_per_frame, conv_macs, conv_params, count_macs, count_params,
                               encoder_macs_per_frame)
from stlane.model import ModelConfig, init_parameters
from stlane.nn import ConvSpec

DECODER = {s.name for block in backbone.decoder_specs(backbone.FULL_CHANNELS).values() for s in block}


def test_single_conv():
    spec = ConvSpec("c", 3, 64, (3, 3), (1, 1))
    assert conv_params(spec) == (3 * 9 + 1) * 64 == 1792
    assert conv_macs(spec, 128, 256) == 128 * 256 * 64 * 3 * 9 == 56_623_104
    row = next(r for r in count_macs(ModelConfig()).rows if r.name == "In_Conv_1")
    assert row.macs == 56_623_104 and row.repeat == 5


def test_full_size_budget():
    report = count_params(ModelConfig())
    assert report.params_m == pytest.approx(13.5, abs=0.1)
    for variant in ("tem", "st", "stfc"):
        macs = count_macs(ModelConfig(variant=variant)).macs_g
        assert 44.7 * 0.95 <= macs <= 44.9 * 1.05
    assert count_macs(ModelConfig(), backbone_only=True).macs_g == pytest.approx(15.5, rel=0.05)


def test_exact_totals():
    assert count_params(ModelConfig(variant="tem")).params == 13_520_582
    assert count_params(ModelConfig(variant="st")).params == 13_520_963
    assert count_params(ModelConfig(variant="stfc")).params == 13_570_115
    assert count_params(ModelConfig(), backbone_only=True).params == 13_387_458


def test_variant_difference():
    tem = count_params(ModelConfig(variant="tem")).params
    stfc = count_params(ModelConfig(variant="stfc")).params
    st = count_params(ModelConfig(variant="st")).params
    assert stfc - tem == 3 * (128 * 129) - 3
    assert st - tem == 3 * 128 - 3


@pytest.mark.parametrize("kw", [dict(variant="tem"), dict(variant="st"), dict(variant="stfc", extractor="gru"),
                                dict(frames=2, height=64, width=64, channel_divisor=4)])
def test_params_match_live_census(kw):
    cfg = ModelConfig(**kw)
    assert count_params(cfg).params == init_parameters(cfg, 0).total_size()


def test_totals_are_row_sums():
    r = count_macs(ModelConfig())
    assert r.params == sum(row.params for row in r.rows)
    assert r.macs == sum(row.macs * row.repeat for row in r.rows)
    text = r.table()
    assert HEADER in text and "TOTAL" in text
    assert f"params={r.params}" in r.key_values()


@pytest.mark.parametrize("variant", ["tem", "st", "stfc"])
def test_macs_linear_in_frames(variant):
    five = ModelConfig(variant=variant, frames=5)
    ten = ModelConfig(variant=variant, frames=10)
    delta = count_macs(ten).macs - count_macs(five).macs
    assert delta == 5 * encoder_macs_per_frame(five) + 5 * attention_macs_per_frame(five)


def test_decoder_macs_independent_of_frames():
    def decoder(cfg):
        return sum(r.macs * r.repeat for r in count_macs(cfg).rows if r.name in DECODER)

    assert decoder(ModelConfig(frames=1)) == decoder(ModelConfig(frames=5)) == decoder(ModelConfig(frames=9))
