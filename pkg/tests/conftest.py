import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from twice.panel import ColumnSchema, Panel

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


TINY_SCHEMA = ColumnSchema.from_triples([
    ("age", "numeric", "worker"),
    ("tenure", "numeric", "worker"),
    ("education", "categorical", "worker"),
    ("log_size", "numeric", "firm"),
])


def make_panel(worker_id, firm_id, year, log_wage, covariates=None, schema=TINY_SCHEMA, levels=None):
    n = len(log_wage)
    if covariates is None:
        covariates = np.zeros((n, len(schema.columns)))
    if levels is None:
        levels = {c.name: ("a", "b", "c") for c in schema.columns if c.categorical}
    return Panel(worker_id, firm_id, year, log_wage, covariates, schema, levels)


def random_panel(rng, n_workers, n_firms, n_years, move=0.4):
    """Balanced random panel on the tiny schema."""
    rows = []
    for i in range(n_workers):
        f = int(rng.integers(n_firms))
        for t in range(n_years):
            if t and rng.random() < move:
                f = int(rng.integers(n_firms))
            rows.append((f"w{i:04d}", f"f{f:03d}", 2000 + t))
    n = len(rows)
    cov = np.column_stack([rng.integers(20, 60, n), rng.integers(0, 30, n), rng.integers(0, 3, n),
                           rng.normal(3, 1, n)]).astype(float)
    w, f, y = zip(*rows)
    return make_panel(w, f, y, rng.normal(2, 0.5, n), cov)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
