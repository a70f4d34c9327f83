import numpy as np
import pytest

from growseg.geometry import PointCloud

# one-line verdicts recorded by the acceptance tests, echoed after the run
_acceptance_lines = []


@pytest.fixture
def acceptance_line():
    def record(line):
        _acceptance_lines.append(line)
        print(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if _acceptance_lines:
        terminalreporter.section("acceptance summary")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def random_cloud(rng, n=60, colors=True, labels=False, scale=1.0):
    pos = rng.uniform(0, scale, size=(n, 3))
    col = rng.uniform(0, 1, size=(n, 3)) if colors else None
    lab = rng.integers(0, 3, size=n) if labels else None
    return PointCloud(positions=pos, colors=col, gt_labels=lab, id="rand")


def brute_knn(pos, query, k):
    """Reference k-nearest ids for one query point, (d2, id) ordered."""
    d2 = ((pos - pos[query]) ** 2).sum(axis=1)
    d2[query] = np.inf
    order = np.lexsort((np.arange(len(pos)), d2))
    return order[:k]


def brute_radius(pos, query, radius):
    """Reference in-radius ids for one query point, ascending id."""
    d2 = ((pos - pos[query]) ** 2).sum(axis=1)
    ids = np.flatnonzero(d2 <= radius * radius)
    return ids[ids != query]
