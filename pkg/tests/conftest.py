import time

import numpy as np
import pytest

from hyperpose import tensor as T
from hyperpose.config import get_preset
from hyperpose.data import make_overfit_set

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _default_dtype():
    # Tests that switch precision must not leak it.
    before = T.get_default_dtype()
    yield
    T.set_default_dtype(before)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def desk_cfg():
    return get_preset("desk")


@pytest.fixture(scope="session")
def overfit_samples(desk_cfg):
    train, _ = make_overfit_set(desk_cfg.data.synthetic_seed, desk_cfg.data.synthetic_n,
                                size=desk_cfg.model.input_size)
    return train


@pytest.fixture(scope="session")
def small_samples(desk_cfg):
    train, _ = make_overfit_set(7, 12, size=desk_cfg.model.input_size)
    return train


def _timed_run(cfg, out):
    from hyperpose.runs import run_training

    t0 = time.perf_counter()
    run = run_training(cfg, out, (1, 2, 3))
    return run, time.perf_counter() - t0


@pytest.fixture(scope="session")
def desk_run(desk_cfg, tmp_path_factory):
    """The full three-phase desk protocol on the synthetic overfit scene."""
    out = tmp_path_factory.mktemp("desk_run")
    run, seconds = _timed_run(desk_cfg, out)
    return out, run, seconds


@pytest.fixture(scope="session")
def desk_run_repeat(desk_cfg, tmp_path_factory):
    out = tmp_path_factory.mktemp("desk_run_repeat")
    run, seconds = _timed_run(desk_cfg, out)
    return out, run, seconds
