import numpy as np
import pytest

from stlane.model import ModelConfig
from stlane.nn import make_rng


@pytest.fixture
def rng():
    return make_rng(1234)


def tiny_config(**overrides) -> ModelConfig:
    """Smallest geometry that still has every layer: 32x32 input, 2x2 grid."""
    kw = dict(frames=2, height=32, width=32, channel_divisor=8)
    kw.update(overrides)
    return ModelConfig(**kw)


def small_config(**overrides) -> ModelConfig:
    kw = dict(frames=2, height=64, width=64, channel_divisor=4)
    kw.update(overrides)
    return ModelConfig(**kw)


def assert_grad_close(analytic, numeric, tol=1e-4, floor=1e-12):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    err = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    assert err.max() <= tol, f"max relative error {err.max():.3e}"


_CRITERIA: list[str] = []


@pytest.fixture
def criterion():
    """``report(number, ok, detail)`` records one PASS/FAIL line for the summary."""

    def report(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _CRITERIA.append(line)
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA):
            terminalreporter.write_line(line)
