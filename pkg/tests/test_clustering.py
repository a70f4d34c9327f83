import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from growseg.clustering import (
    confusion_matrix,
    hungarian,
    kmeans,
    metrics,
    metrics_from_confusion,
)


def exhaustive_inertia(x, k):
    """Best possible k-means objective by brute force over all partitions."""
    n = len(x)
    best = np.inf
    for assign in itertools.product(range(k), repeat=n):
        a = np.asarray(assign)
        if len(set(assign)) < k:
            continue
        total = 0.0
        for c in range(k):
            pts = x[a == c]
            total += ((pts - pts.mean(axis=0)) ** 2).sum()
        best = min(best, total)
    return best


def brute_hungarian_value(score):
    n = score.shape[0]
    return max(sum(score[i, p[i]] for i in range(n))
               for p in itertools.permutations(range(n)))


def test_kmeans_two_far_pairs():
    x = np.array([[0.0], [0.1], [10.0], [10.1]])
    res = kmeans(x, 2, seed=0)
    assert res.assignments[0] == res.assignments[1]
    assert res.assignments[2] == res.assignments[3]
    assert res.assignments[0] != res.assignments[2]
    np.testing.assert_allclose(sorted(res.centroids[:, 0]), [0.05, 10.05])
    np.testing.assert_allclose(res.inertia, 0.005 + 0.005)


def test_kmeans_k_clamped_to_rows():
    x = np.array([[0.0], [1.0]])
    res = kmeans(x, 5, seed=0)
    assert res.centroids.shape == (2, 1)
    assert res.inertia == 0.0


def test_kmeans_all_clusters_populated(rng):
    x = rng.normal(size=(40, 3))
    res = kmeans(x, 6, seed=1)
    assert len(np.unique(res.assignments)) == 6


def test_kmeans_assignment_is_nearest_centroid(rng):
    x = rng.normal(size=(50, 2))
    res = kmeans(x, 4, seed=2)
    d2 = ((x[:, None, :] - res.centroids[None]) ** 2).sum(axis=2)
    # repair can only seize a point for an empty cluster; none here
    np.testing.assert_array_equal(res.assignments, d2.argmin(axis=1))


def test_kmeans_deterministic(rng):
    x = rng.normal(size=(30, 4))
    a = kmeans(x, 3, seed=5, restarts=3)
    b = kmeans(x, 3, seed=5, restarts=3)
    np.testing.assert_array_equal(a.assignments, b.assignments)
    np.testing.assert_array_equal(a.centroids, b.centroids)
    assert a.inertia == b.inertia


def test_kmeans_restarts_never_worse(rng):
    for trial in range(10):
        x = rng.normal(size=(12, 2))
        one = kmeans(x, 3, seed=trial, restarts=1)
        ten = kmeans(x, 3, seed=trial, restarts=10)
        assert ten.inertia <= one.inertia + 1e-12


def test_kmeans_matches_exhaustive_small(rng):
    for trial in range(25):
        x = rng.normal(size=(int(rng.integers(3, 8)), 2))
        k = int(rng.integers(2, 4))
        if k > len(x):
            k = len(x)
        res = kmeans(x, k, seed=trial, restarts=10)
        assert res.inertia <= exhaustive_inertia(x, k) + 1e-9


def test_kmeans_rejects_bad_input():
    with pytest.raises(ValueError):
        kmeans(np.zeros((0, 2)), 1)
    with pytest.raises(ValueError):
        kmeans(np.array([[np.nan, 0.0]]), 1)
    with pytest.raises(ValueError):
        kmeans(np.zeros((3, 2)), 0)
    with pytest.raises(ValueError):
        kmeans(np.zeros(3), 1)


def test_hungarian_identity_and_swap():
    np.testing.assert_array_equal(hungarian(np.eye(3)), [0, 1, 2])
    score = np.array([[0.0, 5.0], [5.0, 0.0]])
    np.testing.assert_array_equal(hungarian(score), [1, 0])


def test_hungarian_lexicographic_ties():
    # all-equal scores: every permutation optimal, identity is smallest
    np.testing.assert_array_equal(hungarian(np.ones((4, 4))), [0, 1, 2, 3])


def test_hungarian_rectangular_padding():
    # 2 rows, 3 cols: unmatched column absorbed by the padded row
    score = np.array([[1.0, 0.0, 3.0], [0.0, 2.0, 0.0]])
    perm = hungarian(score)
    assert len(perm) == 3
    assert perm[0] == 2 and perm[1] == 1
    assert sorted(perm) == [0, 1, 2]


def test_hungarian_matches_brute_force(rng):
    for trial in range(60):
        n = int(rng.integers(2, 7))
        score = rng.integers(0, 50, size=(n, n)).astype(np.float64)
        perm = hungarian(score)
        got = sum(score[i, perm[i]] for i in range(n))
        assert got == brute_hungarian_value(score)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 5), st.integers(0, 10**6))
def test_hungarian_optimal_property(n, seed):
    score = np.random.default_rng(seed).integers(0, 9, size=(n, n)).astype(float)
    perm = hungarian(score)
    assert sorted(perm) == list(range(n))
    assert sum(score[i, perm[i]] for i in range(n)) == brute_hungarian_value(score)


def test_confusion_matrix_oracle():
    pred = np.array([0, 0, 1, 1, 2])
    gt = np.array([0, 1, 1, 1, -1])
    cm = confusion_matrix(pred, gt, 3)
    expect = np.array([[1, 1, 0], [0, 2, 0], [0, 0, 0]])
    np.testing.assert_array_equal(cm, expect)


def test_confusion_matrix_validation():
    with pytest.raises(ValueError):
        confusion_matrix(np.array([0]), np.array([0, 1]), 2)
    with pytest.raises(ValueError):
        confusion_matrix(np.array([2]), np.array([0]), 2)
    with pytest.raises(ValueError):
        confusion_matrix(np.array([0, 1]), np.array([-1, -1]), 2)


def test_metrics_reference_fixture():
    pred = np.array([0, 0, 1, 1])
    gt = np.array([0, 1, 1, 1])
    m = metrics(pred, gt, 2)
    assert abs(m.oa - 0.75) <= 1e-12
    assert abs(m.miou - 7.0 / 12.0) <= 1e-12


def test_metrics_label_permutation_invariant(rng):
    # relabeling predictions never changes Hungarian-matched scores
    for _ in range(20):
        n = int(rng.integers(10, 60))
        c = int(rng.integers(2, 6))
        pred = rng.integers(0, c, size=n)
        gt = rng.integers(0, c, size=n)
        base = metrics(pred, gt, c)
        perm = rng.permutation(c)
        m = metrics(perm[pred], gt, c)
        assert abs(m.oa - base.oa) <= 1e-12
        assert abs(m.macc - base.macc) <= 1e-12
        assert abs(m.miou - base.miou) <= 1e-12
        np.testing.assert_array_equal(m.iou, base.iou)


def test_metrics_perfect_prediction_under_relabel():
    gt = np.array([0, 0, 1, 1, 2, 2])
    pred = np.array([2, 2, 0, 0, 1, 1])
    m = metrics(pred, gt, 3)
    assert m.oa == 1.0 and m.miou == 1.0 and m.macc == 1.0


def test_metrics_absent_class_nan():
    pred = np.array([0, 1])
    gt = np.array([0, 1])
    m = metrics(pred, gt, 3)
    assert m.oa == 1.0
    assert np.isnan(m.iou[2])
    assert m.miou == 1.0  # averaged over present classes only


def test_metrics_ignore_label_excluded():
    pred = np.array([0, 1, 1])
    gt = np.array([0, -1, 1])
    m = metrics(pred, gt, 2)
    assert m.oa == 1.0


def test_metrics_from_confusion_matches_metrics(rng):
    pred = rng.integers(0, 4, size=100)
    gt = rng.integers(0, 4, size=100)
    a = metrics(pred, gt, 4)
    b = metrics_from_confusion(confusion_matrix(pred, gt, 4))
    assert a.oa == b.oa and a.miou == b.miou and a.macc == b.macc
