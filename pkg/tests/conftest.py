import numpy as np
import pytest

from sgmps.mcore import LocalTensor


def random_tensor(rng, d, D, scale=None):
    s = scale if scale is not None else 1 / np.sqrt(2 * D)
    return LocalTensor(s * (rng.standard_normal((d, D, D)) + 1j * rng.standard_normal((d, D, D))))


def random_state(rng, D, rank=None):
    r = rank or D
    G = rng.standard_normal((D, r)) + 1j * rng.standard_normal((D, r))
    rho = G @ G.conj().T
    return rho / np.trace(rho).real


def random_hermitian(rng, D):
    G = rng.standard_normal((D, D)) + 1j * rng.standard_normal((D, D))
    return 0.5 * (G + G.conj().T)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


# Acceptance criteria record their verdicts here; the summary hook prints them in order.
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
