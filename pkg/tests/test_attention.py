import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stlane.attention import (ATTENTION_LAYERS, AttentionTrace, AttentionVariant, Extractor, attention_backward,
                              attention_forward, attention_param_count, attention_step, init_attention, k_in_spec,
                              k_out_spec, reduce_bottleneck, reduce_bottleneck_backward)
from stlane.backbone import init_conv
from stlane.gradcheck import numeric_grad_array
from stlane.nn import NonFiniteError, ParamStore, ShapeError, make_rng
from stlane.recurrent import init_gru, init_lstm

from conftest import assert_grad_close

VARIANTS = list(AttentionVariant)


def build(variant, extractor="lstm", d=16, channels=4, seed=0, jitter=0.5):
    """Attention + extractor + k_out parameters in float64, perturbed away from the neutral init."""
    store = ParamStore()
    r = make_rng(seed)
    init_attention(store, variant, d, r, np.float64)
    (init_lstm if Extractor(extractor) is Extractor.LSTM else init_gru)(store, d, r, np.float64)
    init_conv(store, k_out_spec(channels), r, np.float64)
    for p in store:
        p.value += jitter * r.standard_normal(p.value.shape)
    return store


def sig(v):
    return 1 / (1 + np.exp(-v))


def oracle_step(x, h, variant, store):
    """Direct transcription of z = U.x + H.h, w = softmax(W.z), xbar = w * x for one vector."""
    u, hh, w = (store.value(f"{n}.weight") for n in ATTENTION_LAYERS)
    if variant == "stfc":
        ub, hb, wb = (store.value(f"{n}.bias") for n in ATTENTION_LAYERS)
        z = (u @ x + ub) + (hh @ h + hb)
        a = w @ z + wb
    else:
        z = u * x + hh * h
        a = w * z
    e = np.exp(a - a.max())
    weights = e / e.sum()
    return weights, weights * x, z


def oracle_lstm(x, h, c, store):
    g = {k: store.value(f"LSTM.P_{k}") @ x + store.value(f"LSTM.Q_{k}") @ h + store.value(f"LSTM.b_{k}")
         for k in "fico"}
    c_new = sig(g["f"]) * c + sig(g["i"]) * np.tanh(g["c"])
    return sig(g["o"]) * np.tanh(c_new), c_new


def oracle_gru(x, h, store):
    p = {k: store.value(f"GRU.P_{k}") for k in "zrn"}
    q = {k: store.value(f"GRU.Q_{k}") for k in "zrn"}
    b = {k: store.value(f"GRU.b_{k}") for k in "zrn"}
    z = sig(p["z"] @ x + q["z"] @ h + b["z"])
    r = sig(p["r"] @ x + q["r"] @ h + b["r"])
    n = np.tanh(p["n"] @ x + q["n"] @ (r * h) + b["n"])
    return (1 - z) * n + z * h


# -- bottleneck reduction -----------------------------------------------------

def test_reduce_bottleneck_shapes():
    store = ParamStore()
    init_conv(store, k_in_spec(512), make_rng(0))
    out, _ = reduce_bottleneck(np.ones((1, 512, 8, 16), np.float32), store)
    assert out.shape == (1, 128)
    out, _ = reduce_bottleneck(np.zeros((1, 512, 4, 4), np.float32), store)
    assert out.shape == (1, 16)
    assert not out.any()


def test_reduce_bottleneck_is_row_major(rng):
    store = ParamStore()
    init_conv(store, k_in_spec(3), rng, np.float64)
    x = rng.standard_normal((2, 3, 2, 4))
    out, _ = reduce_bottleneck(x, store)
    w = store.value("In_Attention_Conv_5_1.weight")[0, :, 0, 0]
    ref = np.einsum("c,bchw->bhw", w, x) + store.value("In_Attention_Conv_5_1.bias")[0]
    np.testing.assert_allclose(out, ref.reshape(2, 8), atol=1e-12)


def test_reduce_bottleneck_gradient(rng):
    store = ParamStore()
    init_conv(store, k_in_spec(3), rng, np.float64)
    x = rng.standard_normal((2, 3, 2, 2))
    g = rng.standard_normal((2, 4))
    _, cache = reduce_bottleneck(x, store)
    dx = reduce_bottleneck_backward(g, cache, store)
    assert_grad_close(dx, numeric_grad_array(lambda: np.sum(reduce_bottleneck(x, store)[0] * g), x))


# -- single step ----------------------------------------------------------------

def test_param_counts():
    assert attention_param_count("tem", 128) == 3
    assert attention_param_count("st", 128) == 3 * 128
    assert attention_param_count("stfc", 128) == 3 * (128 * 128 + 128)
    for v in VARIANTS:
        store = ParamStore()
        init_attention(store, v, 128, make_rng(0))
        assert store.total_size() == attention_param_count(v, 128)


def test_tem_uniform_input_gives_uniform_weights():
    store = ParamStore()
    init_attention(store, "tem", 128, make_rng(0), np.float64)
    store["AttentionLayer_2.weight"].value[:] = 0.0
    x = np.full((1, 128), 0.37)
    w, xbar, _, _ = attention_step(x, np.ones((1, 128)), "tem", store)
    np.testing.assert_allclose(w, 1 / 128, atol=1e-15)
    np.testing.assert_allclose(xbar, x / 128, atol=1e-15)


@pytest.mark.parametrize("variant", ["st", "stfc", "tem"])
def test_step_matches_direct_formula(variant):
    store = build(variant, d=16, seed=3)
    r = make_rng(4)
    x = r.standard_normal((3, 16))
    h = np.tanh(r.standard_normal((3, 16)))
    w, xbar, z, _ = attention_step(x, h, variant, store)
    for b in range(3):
        ow, oxbar, oz = oracle_step(x[b], h[b], variant, store)
        np.testing.assert_allclose(w[b], ow, atol=1e-10)
        np.testing.assert_allclose(xbar[b], oxbar, atol=1e-10)
        np.testing.assert_allclose(z[b], oz, atol=1e-10)


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(VARIANTS), st.integers(0, 2**32 - 1), st.floats(0.01, 30))
def test_step_weights_are_a_distribution(variant, seed, scale):
    store = build(variant, d=16, seed=seed % 997)
    r = make_rng(seed)
    x = scale * r.standard_normal((2, 16))
    w, _, _, _ = attention_step(x, np.tanh(r.standard_normal((2, 16))), variant, store)
    assert np.all(w >= 0)
    np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-6)
    # renormalizing a rescaled weight vector gives it back
    np.testing.assert_allclose((2 * w) / (2 * w).sum(-1, keepdims=True), w, atol=1e-15)


def test_step_rejects_non_finite_with_frame_index():
    store = build("st", d=4)
    x = np.full((1, 4), np.inf)
    with pytest.raises(NonFiniteError, match="frame 3"):
        attention_step(x, np.zeros((1, 4)), "st", store, frame=3)


# -- full loop ----------------------------------------------------------------

def test_forward_full_geometry():
    store = ParamStore()
    r = make_rng(0)
    init_attention(store, "st", 128, r)
    init_lstm(store, 128, r)
    init_conv(store, k_out_spec(512), r)
    xs = r.standard_normal((1, 5, 128)).astype(np.float32)
    x_out, trace, _ = attention_forward(xs, (8, 16), "st", "lstm", store)
    assert x_out.shape == (1, 512, 8, 16)
    assert trace.frames == 5
    assert trace.weight_maps((8, 16)).shape == (1, 5, 8, 16)


def test_forward_rejects_empty_sequence():
    with pytest.raises(ShapeError):
        attention_forward(np.zeros((1, 0, 4)), (2, 2), "st", "lstm", build("st", d=4))


@pytest.mark.parametrize("variant", VARIANTS)
def test_single_frame_is_one_step(variant):
    store = build(variant, d=4, seed=5)
    x = make_rng(6).standard_normal((1, 1, 4))
    _, trace, _ = attention_forward(x, (2, 2), variant, "lstm", store)
    _, xbar, _ = oracle_step(x[0, 0], np.zeros(4), variant.value, store)
    h, c = oracle_lstm(xbar, np.zeros(4), np.zeros(4), store)
    np.testing.assert_allclose(trace.h_final[0], h, atol=1e-12)
    np.testing.assert_allclose(trace.c_final[0], c, atol=1e-12)


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("extractor", ["lstm", "gru"])
def test_three_frames_match_unrolled_oracle(variant, extractor):
    d, c3 = 6, 4
    store = build(variant, extractor, d=d, channels=c3, seed=9)
    xs = make_rng(10).standard_normal((2, 3, d))
    x_out, trace, _ = attention_forward(xs, (2, 3), variant, extractor, store)
    kw = store.value("Out_Attention_Conv_5_2.weight")[:, 0, 0, 0]
    kb = store.value("Out_Attention_Conv_5_2.bias")
    for b in range(2):
        h = np.zeros(d)
        c = np.zeros(d)
        # frame 1
        w1, xb1, _ = oracle_step(xs[b, 0], h, variant.value, store)
        h, c = oracle_lstm(xb1, h, c, store) if extractor == "lstm" else (oracle_gru(xb1, h, store), c)
        # frame 2
        w2, xb2, _ = oracle_step(xs[b, 1], h, variant.value, store)
        h, c = oracle_lstm(xb2, h, c, store) if extractor == "lstm" else (oracle_gru(xb2, h, store), c)
        # frame 3
        w3, xb3, _ = oracle_step(xs[b, 2], h, variant.value, store)
        h, c = oracle_lstm(xb3, h, c, store) if extractor == "lstm" else (oracle_gru(xb3, h, store), c)
        np.testing.assert_allclose(trace.w[b], np.stack([w1, w2, w3]), atol=1e-8)
        np.testing.assert_allclose(trace.h_final[b], h, atol=1e-8)
        expected = kw[:, None, None] * h.reshape(2, 3)[None] + kb[:, None, None]
        np.testing.assert_allclose(x_out[b], expected, atol=1e-8)


def test_neutral_tem_identical_frames_give_identical_steps():
    store = ParamStore()
    r = make_rng(1)
    init_attention(store, "tem", 4, r, np.float64)
    init_lstm(store, 4, r, np.float64)
    init_conv(store, k_out_spec(2), r, np.float64)
    frame = r.standard_normal(4)
    xs = np.stack([frame, frame, frame])[None]
    _, trace_a, _ = attention_forward(xs, (2, 2), "tem", "lstm", store)
    _, trace_b, _ = attention_forward(xs[:, ::-1].copy(), (2, 2), "tem", "lstm", store)
    np.testing.assert_array_equal(trace_a.w, trace_b.w)
    np.testing.assert_array_equal(trace_a.h, trace_b.h)


def test_hidden_state_can_be_carried():
    store = build("st", d=4, seed=2)
    xs = make_rng(3).standard_normal((1, 4, 4))
    _, whole, _ = attention_forward(xs, (2, 2), "st", "lstm", store)
    _, first, _ = attention_forward(xs[:, :2], (2, 2), "st", "lstm", store)
    _, second, _ = attention_forward(xs[:, 2:], (2, 2), "st", "lstm", store, first.h_final, first.c_final)
    np.testing.assert_allclose(second.h_final, whole.h_final, atol=1e-14)


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("extractor", ["lstm", "gru"])
def test_unrolled_gradients(variant, extractor):
    d = 4
    store = build(variant, extractor, d=d, channels=3, seed=21)
    xs = make_rng(22).standard_normal((2, 3, d))
    g = make_rng(23).standard_normal((2, 3, 2, 2))
    x_out, _, cache = attention_forward(xs, (2, 2), variant, extractor, store)
    store.zero_grad()
    dxs = attention_backward(g, cache, store)

    def f():
        return np.sum(attention_forward(xs, (2, 2), variant, extractor, store)[0] * g)

    assert_grad_close(dxs, numeric_grad_array(f, xs))
    analytic = {p.name: p.grad.copy() for p in store}
    for p in store:
        assert_grad_close(analytic[p.name], numeric_grad_array(f, p.value))


def test_trace_round_trip(tmp_path):
    store = build("st", "gru", d=4)
    _, trace, _ = attention_forward(make_rng(0).standard_normal((1, 2, 4)), (2, 2), "st", "gru", store)
    trace.save(tmp_path / "trace.npz")
    back = AttentionTrace.load(tmp_path / "trace.npz")
    assert back.c_final is None
    np.testing.assert_array_equal(back.w, trace.w)
    np.testing.assert_array_equal(back.x_out, trace.x_out)
