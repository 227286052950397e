import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_pd(rng, n, cond=10.0, complex_=False):
    """Hermitian positive definite matrix with eigenvalues spread over [1, cond]."""
    if complex_:
        z = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
    else:
        z = rng.standard_normal((n, n))
    q, _ = np.linalg.qr(z)
    return (q * np.linspace(1.0, cond, n)) @ q.conj().T


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
