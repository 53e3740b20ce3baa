"""Shared fixtures, hypothesis profile and independent oracles."""

import itertools

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from broadcast_lab import markov

settings.register_profile(
    "default", max_examples=40, deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("default")

# filled by tests/test_acceptance.py, printed at the end of the session
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def joint_table_oracle(tree, M, nu=None):
    """Yield (assignment tuple in tree.nodes order, probability) by plain iteration."""
    A = np.asarray(M, dtype=float)
    q = A.shape[0]
    law = markov.stationary_distribution(A) if nu is None else np.asarray(nu, dtype=float)
    idx = tree.index
    parents = [idx[u[:-1]] if u else None for u in tree.nodes]
    for x in itertools.product(range(q), repeat=len(tree)):
        p = law[x[0]]
        for i in range(1, len(x)):
            p *= A[x[parents[i]], x[i]]
            if p == 0:
                break
        yield x, p


def oracle_moments(tree, M, f, nu=None):
    """(E f, Var f, Var E[f | X_root]) by summing the joint table assignment by assignment."""
    A = np.asarray(M, dtype=float)
    q = A.shape[0]
    m1 = m2 = 0.0
    root_mass = np.zeros(q)
    root_sum = np.zeros(q)
    for x, p in joint_table_oracle(tree, A, nu):
        if p == 0:
            continue
        v = float(f.evaluate(tree, np.array(x)))
        m1 += p * v
        m2 += p * v * v
        root_mass[x[0]] += p
        root_sum[x[0]] += p * v
    cond = np.divide(root_sum, root_mass, out=np.zeros(q), where=root_mass > 0)
    mc = float(root_mass @ cond)
    return m1, m2 - m1 * m1, float(root_mass @ cond ** 2) - mc * mc
