import numpy as np
import pytest

from headsplat import kernels


@pytest.fixture(autouse=True)
def single_thread():
    kernels.set_threads(1)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_diff(f, x, h=1e-5):
    """Central finite differences of scalar or vector ``f`` w.r.t. every entry of ``x`` (in place)."""
    x = np.asarray(x)
    f0 = np.asarray(f())
    out = np.zeros(x.shape + f0.shape)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = np.asarray(f())
        x[idx] = old - h
        fm = np.asarray(f())
        x[idx] = old
        out[idx] = (fp - fm) / (2 * h)
    return out


def rel_err(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
