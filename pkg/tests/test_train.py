import numpy as np
import pytest

from stlane.checkpoint import load_checkpoint
from stlane.data import ImageSequence, generate_sequence, random_scene, subseed
from stlane.metrics import LossConfig, weighted_bce_logits
from stlane.model import backward, forward, init_parameters
from stlane.nn import NonFiniteError, ParamStore, Parameter, make_rng
from stlane.train import TrainConfig, format_log_line, sgd_momentum_step, train

from conftest import tiny_config


def scalar(value, grad=0.0):
    p = Parameter("p", np.array([value]))
    p.grad[:] = grad
    return ParamStore([p])


def test_quadratic_step():
    store = scalar(1.0, grad=2.0)  # d(p^2)/dp at p=1
    sgd_momentum_step(store, {}, lr=0.1, momentum=0.0)
    assert store.value("p")[0] == pytest.approx(0.8)
    assert store["p"].grad[0] == 0


def test_momentum_two_steps():
    store = scalar(0.0)
    v = {}
    for _ in range(2):
        store["p"].grad[:] = 1.0
        sgd_momentum_step(store, v, lr=0.1, momentum=0.9)
    assert store.value("p")[0] == pytest.approx(-0.29, abs=1e-12)


def test_zero_gradient_decays_velocity():
    store = scalar(0.5)
    v = {"p": np.array([0.0])}
    sgd_momentum_step(store, v, lr=0.1, momentum=0.9)
    assert store.value("p")[0] == 0.5 and v["p"][0] == 0.0
    v = {"p": np.array([2.0])}
    sgd_momentum_step(store, v, lr=0.1, momentum=0.9)
    assert v["p"][0] == pytest.approx(1.8)
    assert store.value("p")[0] == pytest.approx(0.5 - 0.18)


def test_non_finite_gradient_aborts_step():
    a = Parameter("good", np.ones(2))
    b = Parameter("bad", np.ones(2))
    a.grad[:] = 1.0
    b.grad[:] = [0.0, np.nan]
    store = ParamStore([a, b])
    with pytest.raises(NonFiniteError, match="bad"):
        sgd_momentum_step(store, {}, 0.1, 0.9)
    assert np.all(a.value == 1.0)


def test_config_validation_and_schedule():
    cfg = TrainConfig()
    assert (cfg.lr0, cfg.decay, cfg.momentum) == (0.01, 0.95, 0.9)
    lrs = [cfg.lr(e) for e in range(20)]
    assert all(a > b for a, b in zip(lrs, lrs[1:]))
    assert TrainConfig(decay=1.0).lr(10) == 0.01
    for bad in (dict(lr0=0), dict(decay=0), dict(decay=1.5), dict(momentum=1.0), dict(batch_size=0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


@pytest.fixture(scope="module")
def tiny_data():
    return [generate_sequence(random_scene(subseed(11, i), 32, 32, 2)) for i in range(4)]


def test_zero_epochs_keeps_initialization(tiny_data, tmp_path):
    cfg = tiny_config()
    result = train(tiny_data, cfg, TrainConfig(epochs=0, seed=3), tmp_path)
    params, loaded_cfg = load_checkpoint(result.checkpoint)
    init = init_parameters(cfg, 3)
    assert loaded_cfg == cfg
    assert all(a.value.tobytes() == b.value.tobytes() for a, b in zip(init, params))
    assert result.history == []


def test_training_is_deterministic(tiny_data, tmp_path):
    cfg = tiny_config()
    tcfg = TrainConfig(epochs=2, batch_size=2, seed=1)
    a = train(tiny_data, cfg, tcfg, tmp_path / "a")
    b = train(tiny_data, cfg, tcfg, tmp_path / "b")
    assert a.history == b.history
    assert (tmp_path / "a" / "best.ckpt").read_bytes() == (tmp_path / "b" / "best.ckpt").read_bytes()
    lines = (tmp_path / "a" / "train.log").read_text().splitlines()
    assert len(lines) == 2
    epoch, lr, loss, acc, f1 = lines[1].split()
    assert int(epoch) == 1 and float(lr) == pytest.approx(0.01 * 0.95)
    assert 0 <= float(acc) <= 1 and 0 <= float(f1) <= 1 and float(loss) > 0


def test_nan_input_halts_and_keeps_checkpoint(tiny_data, tmp_path):
    cfg = tiny_config()
    bad = ImageSequence(np.full((2, 3, 32, 32), np.nan, np.float32), tiny_data[0].mask, "bad")
    result = train([bad], cfg, TrainConfig(epochs=3, seed=0), tmp_path, loss_cfg=LossConfig())
    assert result.halted
    params, _ = load_checkpoint(result.checkpoint)
    assert all(a.value.tobytes() == b.value.tobytes() for a, b in zip(init_parameters(cfg, 0), params))


def test_empty_training_set_rejected():
    with pytest.raises(ValueError):
        train([], tiny_config(), TrainConfig())


def test_single_batch_sanity(tiny_data):
    cfg = tiny_config()
    frames = np.stack([s.frames for s in tiny_data])
    masks = np.stack([s.mask for s in tiny_data])
    loss_cfg = LossConfig(4.0, 0.6)
    failures = 0
    trials = 20
    for seed in range(trials):
        params = init_parameters(cfg, seed, np.float64)
        fwd = forward(frames, params, cfg)
        before, dlogits = weighted_bce_logits(fwd.logits, masks, loss_cfg)
        backward(dlogits, fwd, params)
        sgd_momentum_step(params, {}, lr=1e-3, momentum=0.0)
        after, _ = weighted_bce_logits(forward(frames, params, cfg).logits, masks, loss_cfg)
        failures += after > before
    assert failures < 0.1 * trials, f"{failures}/{trials} steps increased the loss"


def test_log_line_format():
    assert format_log_line(3, 0.0085737, 0.5, 0.9, 0.25) == "3 0.0085737 0.50000000 0.900000 0.250000"


def test_make_rng_is_reproducible():
    assert make_rng(3).integers(0, 1000, 5).tolist() == make_rng(3).integers(0, 1000, 5).tolist()
