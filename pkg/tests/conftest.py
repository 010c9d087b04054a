import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_orthogonal(rng, n):
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def with_spectrum(rng, sigma, m, n):
    """m x n matrix with prescribed singular values (len(sigma) == min(m, n))."""
    r = min(m, n)
    u = random_orthogonal(rng, m)[:, :r]
    v = random_orthogonal(rng, n)[:, :r]
    return (u * np.asarray(sigma, dtype=float)) @ v.T


def pytest_terminal_summary(terminalreporter):
    from _report import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
