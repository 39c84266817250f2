import numpy as np
import pytest

from fast_stg.model import FaST, ModelConfig

TINY = dict(N=8, T=12, P=6, d=8, e=2, a=4, L=2, steps_per_day=12)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(**TINY)


@pytest.fixture
def tiny_model(tiny_cfg):
    return FaST(tiny_cfg, seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_batch(cfg, rng, B=2):
    X = rng.standard_normal((B, cfg.N, cfg.T))
    Y = rng.standard_normal((B, cfg.N, cfg.P))
    tod = rng.integers(0, cfg.steps_per_day, size=B)
    dow = rng.integers(0, cfg.days_per_week, size=B)
    return X, Y, tod, dow


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(test_acceptance.RESULTS):
            terminalreporter.write_line(test_acceptance.RESULTS[k])
