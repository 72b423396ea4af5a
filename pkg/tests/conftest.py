import numpy as np
import pytest

from bsscal.basis import CATEGORICAL, INPUT, PARAMETER, CatalogPolicy, ModelCatalog, VariableSpec
from bsscal.model import Dataset, PriorSpec, UniformPrior, DiscretePrior, WishartPrior


ACCEPTANCE_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running statistical checks")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(ACCEPTANCE_RESULTS[key])


@pytest.fixture(scope="session")
def small_catalog():
    """One input, one continuous and one 3-level categorical parameter."""
    vs = [
        VariableSpec("x1", role=INPUT),
        VariableSpec("t1", lo=2.0, hi=4.0, role=PARAMETER),
        VariableSpec("t2", CATEGORICAL, levels=("a", "b", "c"), role=PARAMETER),
    ]
    return ModelCatalog.build(vs, CatalogPolicy(n_terms=4, n_terms_2way=6))


def truth_fn(x, t, c):
    return np.c_[np.sin(3 * x) + 0.5 * t * x + 0.3 * c, np.cos(2 * x) * t]


@pytest.fixture(scope="session")
def small_data(small_catalog):
    rng = np.random.default_rng(42)
    m = 40
    xs = rng.uniform(size=m)
    ts = rng.uniform(2, 4, size=m)
    cs = rng.integers(1, 4, m).astype(float)
    xe = rng.uniform(size=8)
    ye = truth_fn(xe, 3.0, 2) + 0.05 * rng.standard_normal((8, 2))
    ye[1, 1] = np.nan
    ye[4, 0] = np.nan
    return Dataset(xe[:, None], ye, xs[:, None], np.c_[ts, cs], truth_fn(xs, ts, cs))


@pytest.fixture(scope="session")
def small_priors(small_catalog):
    return PriorSpec(
        (UniformPrior(2.0, 4.0), DiscretePrior.uniform(3)),
        WishartPrior.from_mean(np.eye(2), 4),
        WishartPrior.from_mean(0.1 * np.eye(2), 4),
        WishartPrior.from_mean(0.01 * np.eye(2), 20),
        WishartPrior.from_mean(0.01 * np.eye(2), 20),
    )
