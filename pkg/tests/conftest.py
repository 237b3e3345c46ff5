import numpy as np
import pytest

from uoep.env import RecEnv, TableResponse, UserPopulation, ItemCatalog, EnvConfig, gen_population


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_env():
    users, catalog = gen_population(0, 30, 60, 4, 1.0)
    return RecEnv(users, catalog)


def table_env(probs, categories=None, list_size=None, dim=None, seed=0):
    """Environment whose click probabilities come straight from a table."""
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    n_users, n_items = probs.shape
    dim = dim or 2
    r = np.random.default_rng(seed)
    users = UserPopulation(r.normal(size=(n_users, dim)), np.zeros(n_users),
                           r.normal(size=(n_users, dim)))
    emb = np.eye(n_items, dim) if n_items <= dim else r.normal(size=(n_items, dim))
    cats = np.arange(n_items) if categories is None else np.asarray(categories)
    cfg = EnvConfig(list_size=list_size or n_items)
    return RecEnv(users, ItemCatalog(emb, cats), TableResponse(probs), cfg)


def pytest_terminal_summary(terminalreporter):
    import sys
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
