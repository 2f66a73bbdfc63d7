import warnings

import numpy as np
import pytest

from empgram.model import linear_system


def random_symmetric(n, rng, low=0.5, high=2.0):
    """Symmetric Hurwitz matrix with spectrum in [-high, -low]."""
    Q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return Q @ np.diag(-rng.uniform(low, high, n)) @ Q.T


def symmetric_lti(n, m, rng):
    A = random_symmetric(n, rng)
    B = rng.standard_normal((n, m))
    return A, B, B.T.copy()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def lti(rng):
    A, B, C = symmetric_lti(4, 2, rng)
    return linear_system(A, B, C), (A, B, C)


@pytest.fixture(autouse=True)
def _quiet_pairing_warning():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="non-benchmark pairing")
        yield


ACCEPTANCE_LINES = []


def report(criterion, passed, detail):
    """Record one acceptance verdict for the end-of-session summary."""
    line = f"{'PASS' if passed else 'FAIL'} criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
