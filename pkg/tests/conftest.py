import numpy as np
import pytest
from hypothesis import settings

from multigroup.core import BoundedLoss, Dataset, GroupFamily, HypothesisClass

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def random_instance(rng, n_max=50, g_max=8, h_max=8, binary=False):
    """Random interval groups and constant hypotheses on [0, 1]."""
    n = int(rng.integers(2, n_max + 1))
    x = rng.random(n)
    y = rng.integers(0, 2, n).astype(float) if binary else np.round(rng.random(n), 2)
    G = int(rng.integers(1, g_max + 1))
    intervals = [(0.0, 1.0)]
    for _ in range(G - 1):
        a, b = np.sort(rng.random(2))
        intervals.append((float(a), float(b)))
    H = int(rng.integers(1, h_max + 1))
    hclass = HypothesisClass.constants(np.round(rng.random(H), 2))
    return Dataset(x, y), GroupFamily.from_intervals(intervals), hclass


@pytest.fixture
def squared():
    return BoundedLoss("squared")


@pytest.fixture
def two_group_instance():
    """Ten points, two disjoint groups with targets 0.2 and 0.8."""
    x = np.r_[np.linspace(0.0, 0.4, 5), np.linspace(0.6, 1.0, 5)]
    y = np.r_[np.full(5, 0.2), np.full(5, 0.8)]
    family = GroupFamily.from_intervals([(0.0, 0.5), (0.5, 1.0)])
    return Dataset(x, y), family, HypothesisClass.constants([0.2, 0.8])


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
