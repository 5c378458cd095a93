import numpy as np
import pytest

from unicornn.core import LayerParams, LayerState


def make_layer(rng, m, d, lam=False, scale=1.0):
    return LayerParams(
        rng.uniform(0.0, 1.0, m),
        rng.uniform(-scale, scale, (m, d)),
        rng.uniform(-0.5, 0.5, m),
        rng.uniform(-1.0, 1.0, m),
        rng.uniform(-0.5, 0.5, (m, m)) if lam else None,
    )


def random_state(rng, m, batch=None):
    shape = (m,) if batch is None else (batch, m)
    return LayerState(rng.uniform(-1.0, 1.0, shape), rng.uniform(-1.0, 1.0, shape))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, filled in by test_acceptance
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[num])
