import numpy as np
import pytest

from spongelab import analysis, model as M
from spongelab.engine import BnParams


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_arch(seed=0, shape=(3, 8, 8)):
    return M.ArchSpec(shape, (M.CNR(4, 3, 1, 1), M.ResidualBlock(4), M.Pool("global"), M.Classifier(3)), seed)


@pytest.fixture
def tiny_model():
    data = analysis.synth_dataset(20, shape=(3, 8, 8), seed=3)
    return M.calibrate(M.build(tiny_arch()), data, passes=2)


@pytest.fixture(scope="session")
def synth_train():
    return analysis.synth_dataset(1000, seed=100)


@pytest.fixture(scope="session")
def desknet_calibrated(synth_train):
    """Untrained DeskNet with calibrated BN statistics."""
    return M.calibrate(M.build(M.desknet(0)), synth_train[:200], passes=2)


@pytest.fixture(scope="session")
def reference_pair(synth_train):
    """Two reference DeskNets (seeds 0 and 1): calibrated, then briefly trained."""
    return (
        M.reference_desknet(0, train=synth_train),
        M.reference_desknet(1, train=synth_train),
    )


@pytest.fixture(scope="session")
def reference(reference_pair):
    return reference_pair[0]


def with_bn(m, key, **changes):
    params = dict(m.params)
    params[key] = params[key].replace(**changes)
    return m.replace(params=params)


def random_bn(rng, channels, eps=1e-5):
    return BnParams(
        rng.normal(size=channels),
        rng.uniform(0.0, 2.0, size=channels),
        rng.normal(size=channels),
        rng.normal(size=channels),
        eps,
    )


# -- acceptance reporting -----------------------------------------------------------

ACCEPTANCE_RESULTS = {}


@pytest.fixture
def criterion():
    """Record one acceptance verdict, print it, then assert it."""

    def report(number, title, ok, detail):
        line = f"criterion {number:>2} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
        ACCEPTANCE_RESULTS[number] = line
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(ACCEPTANCE_RESULTS[number])
