import numpy as np
import pytest
from scipy.linalg import toeplitz


def toeplitz_design(n, p, rho=0.5, seed=0):
    rng = np.random.default_rng(seed)
    L = np.linalg.cholesky(toeplitz(rho ** np.arange(p)))
    return rng.standard_normal((n, p)) @ L.T


def unit_ms(F):
    F = np.asarray(F, dtype=float)
    return F / np.sqrt(np.mean(F**2, axis=0))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = {}


@pytest.fixture
def accept():
    """Record one acceptance criterion's verdict, then assert it."""

    def record(code, ok, detail):
        ACCEPTANCE[code] = (bool(ok), detail)
        assert ok, f"{code}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for code in sorted(ACCEPTANCE, key=lambda c: int(c[1:])):
        ok, detail = ACCEPTANCE[code]
        terminalreporter.write_line(f"{code} {'PASS' if ok else 'FAIL'}: {detail}")
