import numpy as np
import pytest

from ptcure.data import ClusteredDataset
from ptcure.simulate import SimConfig, simulate


def random_dataset(rng, K=5, n_max=4, p_x=2, censor=0.3, equal=False):
    """Small irregular dataset with mixed cluster sizes and censoring."""
    sizes = np.full(K, n_max) if equal else rng.integers(1, n_max + 1, size=K)
    N = int(sizes.sum())
    X = rng.normal(size=(N, p_x))
    t = rng.exponential(1.0, size=N) + 0.01
    d = (rng.random(N) > censor).astype(int)
    d[0] = 1
    return ClusteredDataset(time=t, event=d, covariates=X, cluster_sizes=sizes)


def central_jacobian(fun, beta, h=1e-6):
    beta = np.asarray(beta, dtype=float)
    cols = []
    for k in range(beta.size):
        e = np.zeros_like(beta)
        e[k] = h
        cols.append((np.asarray(fun(beta + e)) - np.asarray(fun(beta - e))) / (2 * h))
    return np.stack(cols, axis=-1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def sim_small():
    """Strong exchangeable scaled data set (K=100, n=5) at a fixed seed."""
    return simulate(SimConfig.preset("strong", 0.10, seed=2024))


ACCEPTANCE_LINES: list[str] = []


def report(criterion: str, ok: bool, detail: str) -> None:
    """Record one PASS/FAIL line; the lines are echoed at the end of the run."""
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
