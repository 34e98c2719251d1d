import os

import numpy as np
import pytest

os.environ.setdefault("STOCHBED_CACHE_DIR", os.path.join(os.path.dirname(__file__), ".oracle_cache"))

from stochbed.gp import Dataset, KernelParams  # noqa: E402
from stochbed.vhgpr import VhgprHyper  # noqa: E402


def central_diff(fun, x, h=1e-6):
    """Central finite-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (fun(x + e) - fun(x - e)) / (2 * h)
    return g


def random_dataset(rng, n=12, d=1, noise=0.3):
    X = rng.uniform(-2, 2, (n, d))
    f = np.sin(X).sum(1) + 0.3 * X[:, 0] ** 2
    y = f + noise * (1 + np.abs(X[:, 0])) * rng.standard_normal(n)
    return Dataset(X, y)


def random_hyper(rng, d=1):
    return VhgprHyper(
        float(rng.uniform(-3, 0)),
        KernelParams(float(rng.uniform(0.5, 2)), tuple(rng.uniform(0.5, 2, d))),
        KernelParams(float(rng.uniform(0.3, 1.5)), tuple(rng.uniform(0.5, 2, d))),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# -- acceptance summary ------------------------------------------------------

ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, title: str, passed: bool, detail: str = ""):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:2d}: {title}"
    if detail:
        line += f" -- {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
