import numpy as np
import pytest

from fedscape import numcore as nc
from fedscape.model import ModelConfig, RootTopModel

SMALL = ModelConfig(image_size=8, channels=(2, 3, 4), hidden=5)


@pytest.fixture(autouse=True)
def checked_mode():
    # NaN/Inf guards on for every test
    nc.set_checked(True)
    yield
    nc.set_checked(False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_model():
    return RootTopModel(SMALL, seed=3)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])


def small_batch(rng, B=6, H=8):
    x = rng.standard_normal((B, 3, H, H)).astype(np.float32)
    y = rng.uniform(1, 5, (B, 8)).astype(np.float32)
    return x, y
