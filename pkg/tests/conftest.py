import numpy as np
import pytest

from lmmboot import _backend
from lmmboot.model import ClusteredDataset, MixedEffectTarget
from lmmboot.estimation import reml_fit

# lines reported by tests/test_acceptance.py, echoed at the end of the session
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(params=_backend.available())
def backend(request):
    with _backend.using(request.param):
        yield request.param


def make_intercept_data(rng, m=20, nj=6, su2=0.5, se2=1.0, beta=(1.0, 1.0)):
    ids = np.repeat(np.arange(m), nj)
    x = rng.uniform(size=m * nj)
    y = beta[0] + beta[1] * x + np.sqrt(su2) * rng.normal(size=m)[ids] + np.sqrt(se2) * rng.normal(size=m * nj)
    return ClusteredDataset.from_arrays(ids, y, np.column_stack([np.ones(m * nj), x]))


@pytest.fixture
def small_problem():
    """A fitted random-intercept problem shared by bootstrap and inference tests."""
    data = make_intercept_data(np.random.default_rng(11))
    fit = reml_fit(data)
    return data, fit, MixedEffectTarget.cluster_means(data)
