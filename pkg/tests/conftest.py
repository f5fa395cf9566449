import numpy as np
import pytest

from randpoincare import metastable as ms
from randpoincare import poincare as pc
from randpoincare import sde

K3 = np.array([[0.8, 0.1, 0.1], [0.1, 0.8, 0.1], [0.1, 0.1, 0.8]])


def kernel(matrix, kill=None):
    """DiscretizedKernel on a dummy 1-d grid around a bare matrix."""
    matrix = np.asarray(matrix, dtype=float)
    n = matrix.shape[0]
    if kill is None:
        kill = 1.0 - matrix.sum(axis=1)
        kill[kill <= 1e-12] = 0.0
    return pc.DiscretizedKernel(pc.Grid(0.0, 1.0, n), matrix, kill, None, 0.0)


def random_stochastic(rng, n, density=1.0):
    M = rng.uniform(0.01, 1.0, (n, n)) * (rng.uniform(size=(n, n)) < density)
    M[np.arange(n), np.arange(n)] += 0.05
    return M / M.sum(axis=1, keepdims=True)


@pytest.fixture
def k3():
    return kernel(K3)


@pytest.fixture(scope="session")
def small_reference():
    """Coarse reference kernel at sigma^2 = 0.01 with its ordered structure."""
    m = sde.reference_model(sigma=0.1)
    K = pc.build_kernel(m, pc.Grid(0.5, 3.0, 100), 400, dt=0.01, seed=7)
    st = ms.detect_balls(K, m, 0.2, [1.0, 2.2])
    st = ms.order_structure(st, ms.reference_exponents(sde.REFERENCE_ROOTS, [1.0, 2.2]),
                            "analytic")
    return m, K, st


_ACCEPTANCE = pytest.StashKey()


@pytest.fixture
def criterion(request):
    """Record one PASS/FAIL line for an acceptance criterion and print it."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(number, title, checks):
        ok = all(v for _, v in checks)
        failed = [name for name, v in checks if not v]
        line = f"criterion {number} ({title}): {'PASS' if ok else 'FAIL'}"
        if failed:
            line += " [failed: " + ", ".join(failed) + "]"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
