import numpy as np
import pytest
from PIL import Image

from stlane.attention import AttentionTrace
from stlane.data import generate_sequence, random_scene
from stlane.model import ModelConfig, forward, init_parameters
from stlane.viz import STAGES, attention_heatmaps, channel_mean_maps, overlay, to_gray8, visualize_activation

from conftest import small_config


def read(path):
    with Image.open(path) as im:
        return im.mode, np.asarray(im)


def test_gray_mapping():
    assert not to_gray8(np.zeros((3, 4))).any()
    g = to_gray8(np.array([[0.0, 1.0], [2.0, 4.0]]))
    assert g.tolist() == [[0, 64], [128, 255]]
    assert to_gray8(np.array([[-1.0, 1.0]])).tolist() == [[0, 255]]


@pytest.fixture(scope="module")
def setup():
    cfg = small_config()
    seq = generate_sequence(random_scene(3, 64, 64, 2))
    return cfg, seq, init_parameters(cfg, 0)


def test_decoder_stage_gives_one_image(setup, tmp_path):
    cfg, seq, params = setup
    paths = visualize_activation(seq, params, cfg, "Up_ConvBlock_4", tmp_path)
    assert [p.name for p in paths] == ["Up_ConvBlock_4.png"]
    mode, img = read(paths[0])
    assert mode == "L" and img.shape == (64, 64)
    small = visualize_activation(seq, params, cfg, "Up_ConvBlock_4", tmp_path / "raw", upscale=False)
    assert read(small[0])[1].shape == (8, 8)


def test_encoder_stage_gives_one_image_per_frame(setup, tmp_path):
    cfg, seq, params = setup
    paths = visualize_activation(seq, params, cfg, "In_ConvBlock", tmp_path)
    assert [p.name for p in paths] == ["In_ConvBlock_frame1.png", "In_ConvBlock_frame2.png"]


def test_zero_activations_are_black(setup, tmp_path):
    cfg, seq, params = setup
    zeroed = params.copy()
    for p in zeroed:
        p.value[:] = 0
    for stage in ("Down_ConvBlock_3", "Up_ConvBlock_4"):
        for path in visualize_activation(seq, zeroed, cfg, stage, tmp_path):
            assert not read(path)[1].any()


def test_channel_means(setup):
    cfg, seq, params = setup
    result = forward(seq.frames, params, cfg)
    maps = channel_mean_maps(result, "Up_ConvBlock_4")
    np.testing.assert_allclose(maps[0], result.activations["Up_ConvBlock_4"][0].mean(axis=0))
    assert channel_mean_maps(result, "Attention").shape == (1, 4, 4)
    assert set(STAGES) >= {"In_ConvBlock", "Attention", "Out_ConvBlock"}


def test_attention_heatmap_per_frame(tmp_path):
    cfg = ModelConfig()
    w = np.random.default_rng(0).dirichlet(np.ones(128), size=(1, 5))
    z = np.zeros((1, 5, 128))
    trace = AttentionTrace(x=z, z=z, w=w, xbar=z, h=z, h_final=z[:, 0], c_final=None, x_out=np.zeros((1, 512, 8, 16)))
    paths = attention_heatmaps(trace, cfg.grid, tmp_path)
    assert len(paths) == 5
    assert read(paths[0])[1].shape == (8, 16)
    upscaled = attention_heatmaps(trace, cfg.grid, tmp_path / "big", (128, 256))
    assert read(upscaled[4])[1].shape == (128, 256)


def test_unknown_stage_rejected(setup, tmp_path):
    cfg, seq, params = setup
    with pytest.raises(ValueError, match="unknown stage"):
        visualize_activation(seq, params, cfg, "Middle_Block", tmp_path)


def test_overlay_paints_lanes_red():
    frame = np.full((3, 4, 4), 0.5, np.float32)
    mask = np.zeros((4, 4), np.uint8)
    mask[1, 2] = 1
    rgb = overlay(frame, mask)
    assert rgb[1, 2].tolist() == [255, 0, 0]
    assert rgb[0, 0].tolist() == [128, 128, 128]
