import numpy as np
import pytest

from attnforge.harness.data import DatasetSpec, generate
from attnforge.transformer import ModelConfig, ViT

# tiny model for gradient checks: large init so gradients are not vanishingly small
TINY = ModelConfig(layers=1, d_model=8, heads=2, mlp_ratio=2.0, patch_size=2, image_side=4,
                   classes=2, seed=3, init_std=0.4)
# reference toy task model
TOY = ModelConfig(layers=2, d_model=32, heads=4, patch_size=4, image_side=16, classes=2, init_std=0.1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    return ViT(TINY)


@pytest.fixture
def toy_model():
    return ViT(TOY)


@pytest.fixture(scope="session")
def stripes():
    return generate(DatasetSpec("stripes", 16, 2, 500, 100, 200, seed=0))


@pytest.fixture(scope="session")
def stripes_small():
    return generate(DatasetSpec("stripes", 16, 2, 64, 32, 32, seed=1))


# ---------------------------------------------------------------- acceptance reporting

ACCEPTANCE = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call":
        return
    number, title = marker.args
    prev_ok = ACCEPTANCE.get(number, (title, True))[1]
    ACCEPTANCE[number] = (title, prev_ok and rep.passed)


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, ok = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {title}")
