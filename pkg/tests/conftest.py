import numpy as np
import pytest

from drdselect.diffusion import linear_schedule
from drdselect.gmm import AnalyticDenoiser, make_world


@pytest.fixture(scope="session")
def sched():
    return linear_schedule()


@pytest.fixture(scope="session")
def tiny_sched():
    return linear_schedule(2, 0.1, 0.2, 2)


@pytest.fixture(scope="session")
def w2():
    return make_world("W2")


@pytest.fixture(scope="session")
def w2_den(w2, sched):
    return AnalyticDenoiser(w2, sched)


class TrueNoise:
    """Denoiser stub returning a fixed noise array, i.e. a perfect predictor."""

    kind = "oracle"

    def __init__(self, eps, num_classes=2):
        self.eps = np.asarray(eps, dtype=np.float64)
        self.dim = self.eps.shape[-1]
        self.num_classes = num_classes

    def predict(self, x_t, t, c):
        return np.broadcast_to(self.eps, np.shape(x_t)).copy()


@pytest.fixture(scope="session")
def true_noise():
    return TrueNoise


_ACCEPTANCE: list[str] = []


@pytest.fixture
def verdict():
    """Record one acceptance line, print it, and fail the test if the criterion fails."""

    def record(number, name, passed, detail=""):
        line = f"{'PASS' if passed else 'FAIL'}  criterion {number:>2}: {name}  {detail}".rstrip()
        _ACCEPTANCE.append(line)
        print(line)
        assert passed, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
