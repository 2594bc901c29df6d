import numpy as np
import pytest

from triangulate.cohort import Cohort

ACCEPTANCE_LINES: list[str] = []


def make_cohort(n=200, seed=0, kind="binary", with_z=True, with_y0=True, k=1):
    """Small random cohort for unit tests; not a causal model."""
    rng = np.random.default_rng(seed)
    w0 = rng.normal(size=(n, k))
    w1 = w0 + rng.normal(scale=0.5, size=(n, k))
    z = (rng.random(n) < 0.5).astype(float)
    x = (rng.random(n) < 0.3 + 0.4 * z).astype(float)
    if kind == "binary":
        y0 = (rng.random(n) < 0.2 + 0.05 * (w0[:, 0] > 0)).astype(float)
        y1 = (rng.random(n) < 0.2 + 0.1 * x + 0.05 * (w1[:, 0] > 0)).astype(float)
    else:
        y0 = w0[:, 0] + rng.normal(size=n)
        y1 = 0.1 * x + w1[:, 0] + rng.normal(size=n)
    return Cohort(
        patient_id=np.arange(1, n + 1),
        cluster_id=np.arange(n) % 10,
        x=x,
        y1=y1,
        y0=y0 if with_y0 else None,
        w0=w0,
        w1=w1,
        z=z if with_z else None,
        outcome_kind=kind,
    )


@pytest.fixture
def cohort_factory():
    return make_cohort


@pytest.fixture
def acceptance_report():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
