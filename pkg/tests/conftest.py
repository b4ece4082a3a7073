import numpy as np
import pytest

from mmbm_coupler.model import LevelSchedule, validate_params

TWO_PHASE = {
    "phases": [1, 2],
    "p": [0.5, 0.5],
    "Q": [[-1.0, 1.0], [1.0, -1.0]],
    "mu": [5.0, -2.0],
    "sigma2": [4.0, 1.0],
}


def random_raw_model(rng: np.random.Generator, m: int | None = None, rate_scale: float = 3.0) -> dict:
    """A random valid model description with m <= 5 phases."""
    m = int(rng.integers(1, 6)) if m is None else m
    Q = rng.uniform(0.0, rate_scale, size=(m, m)) * (rng.random((m, m)) < 0.8)
    np.fill_diagonal(Q, 0.0)
    np.fill_diagonal(Q, -Q.sum(axis=1))
    p = rng.dirichlet(np.ones(m))
    return {
        "Q": Q.tolist(),
        "p": p.tolist(),
        "mu": rng.uniform(-3.0, 3.0, m).tolist(),
        "sigma": rng.uniform(0.2, 3.0, m).tolist(),
    }


def random_model(rng, m=None, rate_scale=3.0):
    params = validate_params(random_raw_model(rng, m, rate_scale))
    return params, LevelSchedule.for_params(params)


@pytest.fixture
def two_phase():
    params = validate_params(TWO_PHASE)
    return params, LevelSchedule.for_params(params)


@pytest.fixture
def std_bm():
    params = validate_params({"Q": [[0.0]], "mu": [0.0], "sigma": [1.0]})
    return params, LevelSchedule.for_params(params)


# One line per acceptance criterion, echoed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def record_criterion(label: str, passed: bool, detail: str) -> bool:
    line = f"[{'PASS' if passed else 'FAIL'}] {label}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
