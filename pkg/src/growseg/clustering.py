"""Deterministic clustering and evaluation: seeded K-means, Hungarian
assignment, and segmentation metrics.

Everything here is exact and reproducible: K-means is seeded kmeans++ with
Lloyd iterations run to an assignment fixed point, the Hungarian solver
returns the lexicographically smallest optimal permutation, and metrics are
computed from an integer confusion matrix after Hungarian relabeling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "KMeansResult", "MetricsResult", "kmeans", "hungarian",
    "confusion_matrix", "metrics_from_confusion", "metrics",
]


@dataclass(frozen=True)
class KMeansResult:
    assignments: np.ndarray  # (n,) int64 cluster ids
    centroids: np.ndarray    # (k, D)
    inertia: float


@dataclass(frozen=True)
class MetricsResult:
    oa: float
    macc: float
    miou: float
    iou: np.ndarray  # per-class IoU, NaN where the class is absent from gt


# Exact elementwise distances below this op-count bound; the GEMM identity
# (|x|^2 - 2x.c + |c|^2) above it.  Both paths are deterministic; the exact
# path keeps tiny-instance inertia bit-comparable to brute force.
_EXACT_OPS = 2_000_000


def _d2_matrix(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    if x.shape[0] * c.shape[0] * x.shape[1] <= _EXACT_OPS:
        diff = x[:, None, :] - c[None, :, :]
        return np.einsum("nkd,nkd->nk", diff, diff)
    d2 = x @ c.T
    d2 *= -2.0
    d2 += np.einsum("nd,nd->n", x, x)[:, None]
    d2 += np.einsum("kd,kd->k", c, c)[None, :]
    np.maximum(d2, 0.0, out=d2)
    return d2


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    # greedy variant: sample a few candidates per step, keep the one that
    # shrinks the total potential most
    n = x.shape[0]
    trials = 2 + int(math.log(k)) if k > 1 else 1
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(0, n)]
    d2 = _d2_matrix(x, centers[:1])[:, 0]
    for c in range(1, k):
        s = d2.sum()
        if s > 0:
            cand = rng.choice(n, size=trials, p=d2 / s)
        else:
            cand = rng.integers(0, n, size=trials)
        pots = [np.minimum(d2, _d2_matrix(x, x[i:i + 1])[:, 0]).sum() for i in cand]
        centers[c] = x[cand[int(np.argmin(pots))]]
        np.minimum(d2, _d2_matrix(x, centers[c:c + 1])[:, 0], out=d2)
    return centers


def _repair_empty(assign: np.ndarray, d2: np.ndarray, k: int) -> None:
    # give every empty cluster the point currently farthest from its centroid
    n = len(assign)
    while True:
        sizes = np.bincount(assign, minlength=k)
        empties = np.flatnonzero(sizes == 0)
        if len(empties) == 0:
            return
        dcur = d2[np.arange(n), assign].copy()
        for e in empties:
            p = int(np.argmax(dcur))
            assign[p] = e
            dcur[p] = -1.0


def _lloyd(x: np.ndarray, centers: np.ndarray, k: int,
           max_iter: int, tol: float) -> tuple[np.ndarray, np.ndarray, float]:
    n, d = x.shape
    assign = None
    for _ in range(max_iter):
        d2 = _d2_matrix(x, centers)
        new_assign = np.argmin(d2, axis=1)
        _repair_empty(new_assign, d2, k)
        if assign is not None and np.array_equal(new_assign, assign):
            assign = new_assign
            break
        assign = new_assign
        sums = np.zeros((k, d))
        np.add.at(sums, assign, x)
        new_centers = sums / np.bincount(assign, minlength=k)[:, None]
        shift = np.linalg.norm(new_centers - centers)
        centers = new_centers
        if shift < tol * (np.linalg.norm(centers) + 1e-30):
            d2 = _d2_matrix(x, centers)
            assign = np.argmin(d2, axis=1)
            _repair_empty(assign, d2, k)
            break
    d2 = _d2_matrix(x, centers)
    inertia = float(d2[np.arange(n), assign].sum())
    return assign, centers, inertia


# Hartigan polish only below this n*k bound; the point loop is Python-level
_POLISH_OPS = 4096


def _hartigan_moves(x: np.ndarray, assign: np.ndarray, k: int) -> bool:
    """One sweep of single-point moves that strictly lower total inertia."""
    n, d = x.shape
    sizes = np.bincount(assign, minlength=k).astype(np.float64)
    sums = np.zeros((k, d))
    np.add.at(sums, assign, x)
    means = sums / sizes[:, None]
    moved = False
    for p in range(n):
        a = assign[p]
        if sizes[a] <= 1:
            continue
        da = ((x[p] - means[a]) ** 2).sum() * sizes[a] / (sizes[a] - 1.0)
        db = np.einsum("kd,kd->k", x[p] - means, x[p] - means)
        db *= sizes / (sizes + 1.0)
        db[a] = np.inf
        b = int(np.argmin(db))
        if da - db[b] > 1e-12:
            means[a] = (means[a] * sizes[a] - x[p]) / (sizes[a] - 1.0)
            means[b] = (means[b] * sizes[b] + x[p]) / (sizes[b] + 1.0)
            sizes[a] -= 1.0
            sizes[b] += 1.0
            assign[p] = b
            moved = True
    return moved


def kmeans(x: np.ndarray, k: int, seed: int = 0, max_iter: int = 100,
           tol: float = 1e-4, restarts: int = 1) -> KMeansResult:
    """Seeded kmeans++ followed by Lloyd iterations.

    k is clamped to the number of rows.  Empty clusters are repaired by
    seizing the point farthest from its assigned centroid, so all k clusters
    stay populated.  Small instances additionally get a single-point-move
    polish after Lloyd converges; it escapes the shallow local optima Lloyd
    is prone to on tiny inputs, and a Lloyd re-run after any move restores
    the nearest-centroid assignment property.  With restarts > 1, the
    lowest-inertia run wins (ties go to the earlier restart).
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError("kmeans input must be a non-empty 2-D matrix")
    if not np.all(np.isfinite(x)):
        raise ValueError("kmeans input contains NaN or Inf")
    if k < 1:
        raise ValueError("k must be >= 1")
    k = min(k, x.shape[0])
    best: KMeansResult | None = None
    for r in range(restarts):
        rng = np.random.default_rng(np.random.SeedSequence((seed, r)))
        centers = _kmeanspp(x, k, rng)
        assign, centers, inertia = _lloyd(x, centers, k, max_iter, tol)
        if k > 1 and x.shape[0] * k <= _POLISH_OPS:
            for _ in range(20):
                work = assign.copy()
                if not _hartigan_moves(x, work, k):
                    break
                sums = np.zeros((k, x.shape[1]))
                np.add.at(sums, work, x)
                centers2 = sums / np.bincount(work, minlength=k)[:, None]
                assign2, centers2, inertia2 = _lloyd(x, centers2, k, max_iter, tol)
                if inertia2 >= inertia:
                    break
                assign, centers, inertia = assign2, centers2, inertia2
        if best is None or inertia < best.inertia:
            best = KMeansResult(assignments=assign.astype(np.int64),
                                centroids=centers, inertia=inertia)
    return best


def _assignment_value(score: np.ndarray) -> float:
    """Maximum-total assignment value via shortest augmenting paths."""
    n = score.shape[0]
    if n == 0:
        return 0.0
    cost = -score
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used
            free[0] = False
            cols = np.flatnonzero(free)
            cur = cost[i0 - 1, cols - 1] - u[i0] - v[cols]
            better = cur < minv[cols]
            minv[cols[better]] = cur[better]
            way[cols[better]] = j0
            j1 = cols[np.argmin(minv[cols])]
            delta = minv[j1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    total = 0.0
    for j in range(1, n + 1):
        total += score[p[j] - 1, j - 1]
    return total


def hungarian(score: np.ndarray) -> np.ndarray:
    """Permutation perm with perm[row] = column maximizing total score.

    Rectangular inputs are zero-padded to square.  Among all maximizing
    permutations the lexicographically smallest one is returned, fixed row
    by row.
    """
    score = np.asarray(score, dtype=np.float64)
    if score.ndim != 2:
        raise ValueError("score must be 2-D")
    r, c = score.shape
    n = max(r, c)
    padded = np.zeros((n, n))
    padded[:r, :c] = score
    best = _assignment_value(padded)
    tol = 1e-9 * (1.0 + abs(best))
    perm = np.empty(n, dtype=np.int64)
    avail = list(range(n))
    fixed = 0.0
    for i in range(n):
        for jpos, j in enumerate(avail):
            rest = padded[np.ix_(range(i + 1, n), avail[:jpos] + avail[jpos + 1:])]
            if fixed + padded[i, j] + _assignment_value(rest) >= best - tol:
                perm[i] = j
                fixed += padded[i, j]
                avail.pop(jpos)
                break
    return perm


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int,
                     ignore: int = -1) -> np.ndarray:
    """Counts[pred, gt] over non-ignored points."""
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    if pred.shape != gt.shape:
        raise ValueError("pred and gt must have equal length")
    mask = gt != ignore
    if not mask.any():
        raise ValueError("all points ignored")
    pred, gt = pred[mask], gt[mask]
    if pred.min() < 0 or pred.max() >= num_classes:
        raise ValueError("prediction label out of range")
    if gt.min() < 0 or gt.max() >= num_classes:
        raise ValueError("ground-truth label out of range")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (pred, gt), 1)
    return counts


def metrics_from_confusion(counts: np.ndarray) -> MetricsResult:
    counts = np.asarray(counts, dtype=np.int64)
    num_classes = counts.shape[0]
    # sort rows by content before matching: prediction ids are arbitrary, and
    # matching the canonicalized matrix makes tied optima resolve identically
    # under any relabeling of predictions
    order = np.lexsort(counts.T[::-1])
    canon = counts[order]
    perm = hungarian(canon)
    inv = np.empty(num_classes, dtype=np.int64)
    inv[perm] = np.arange(num_classes)
    matched = canon[inv]  # row c now holds predictions mapped to class c
    total = counts.sum()
    tp = np.diag(matched).astype(np.float64)
    gt_counts = matched.sum(axis=0).astype(np.float64)
    pred_counts = matched.sum(axis=1).astype(np.float64)
    present = gt_counts > 0
    iou = np.full(num_classes, np.nan)
    denom = gt_counts + pred_counts - tp
    iou[present] = tp[present] / denom[present]
    acc = tp[present] / gt_counts[present]
    return MetricsResult(oa=float(tp.sum() / total),
                         macc=float(acc.mean()),
                         miou=float(np.nanmean(iou[present])),
                         iou=iou)


def metrics(pred: np.ndarray, gt: np.ndarray, num_classes: int,
            ignore: int = -1) -> MetricsResult:
    """Hungarian-matched OA, mAcc, mIoU over non-ignored points.

    mAcc and mIoU average over classes present in the ground truth only.
    """
    return metrics_from_confusion(confusion_matrix(pred, gt, num_classes, ignore))
