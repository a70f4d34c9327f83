"""Initial superpoint construction.

Indoor route: supervoxels grown from evenly spaced seeds under a combined
color/spatial/normal distance, merged into region-growing segments whenever
at least half of a supervoxel's points fall inside one segment. Outdoor
route: a RANSAC ground plane becomes one large superpoint and the remaining
points are split by Euclidean clustering. Both routes finish by dissolving
superpoints smaller than ``min_size`` into their nearest large neighbor.

Ignored points (gt label -1) are excluded up front and come back as -1 in
the returned assignment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse
import scipy.sparse.csgraph

from .geometry import (PointCloud, SpatialIndex, cell27_all, estimate_normals,
                       knn_all, radius_all)

VCCS_WEIGHTS = (0.2, 0.4, 1.0)


@dataclass
class Partition:
    """Per-point superpoint assignment for one cloud.

    ``assignment`` holds one id per point, -1 meaning unassigned/ignored.
    Ids are contiguous 0..count-1 and every id owns at least one point.
    """

    assignment: np.ndarray
    count: int

    def __post_init__(self):
        self.assignment = np.ascontiguousarray(self.assignment, dtype=np.int64)
        if self.assignment.ndim != 1:
            raise ValueError("assignment must be 1-D")
        if self.count < 0 or self.count > self.assignment.shape[0]:
            raise ValueError("count out of range")
        pos_ids = self.assignment[self.assignment >= 0]
        if self.count == 0:
            if pos_ids.size:
                raise ValueError("count 0 but ids present")
            return
        sizes = np.bincount(pos_ids, minlength=self.count)
        if pos_ids.size and pos_ids.max() >= self.count:
            raise ValueError("assignment ids exceed count")
        if np.any(sizes == 0):
            raise ValueError("every superpoint id needs at least one member")

    def sizes(self) -> np.ndarray:
        return np.bincount(self.assignment[self.assignment >= 0],
                           minlength=self.count)


@dataclass
class Plane:
    """n . x + d = 0 with a unit normal."""

    normal: np.ndarray
    d: float

    def __post_init__(self):
        self.normal = np.ascontiguousarray(self.normal, dtype=np.float64)
        if abs(float(np.linalg.norm(self.normal)) - 1.0) > 1e-9:
            raise ValueError("plane normal must be unit length")


def _expand_rows(indptr, indices, rows):
    """Gather CSR rows: concatenated indices plus per-row lengths."""
    lens = indptr[rows + 1] - indptr[rows]
    total = int(lens.sum())
    if total == 0:
        return np.empty(0, dtype=np.int64), lens
    flat = np.repeat(indptr[rows], lens) + (
        np.arange(total, dtype=np.int64) - np.repeat(np.cumsum(lens) - lens, lens))
    return indices[flat], lens


def _first_nonzero_sign(vec):
    for c in (vec[2], vec[1], vec[0]):
        if c != 0.0:
            return 1.0 if c > 0.0 else -1.0
    return 1.0


def vccs_supervoxels(cloud: PointCloud, normals: np.ndarray, voxel_res: float,
                     seed_res: float, weights=VCCS_WEIGHTS) -> Partition:
    """Flow-constrained supervoxels on a voxelized cloud.

    Seeds sit on a grid of pitch ``seed_res`` snapped to the nearest point
    of each occupied seed cell. Growth is level-synchronous over 27-cell
    voxel adjacency: at each step every frontier point offers its
    unassigned neighbors the distance

        D = sqrt(w_c*Dc^2 + w_s*Ds/(3*seed_res^2) + w_n*Dn)

    with Dc the RGB distance, Ds the squared spatial distance to the
    frontier point, and Dn = 1 - |cos| between normals. A candidate joins
    the supervoxel offering the smallest D (ties to the lower supervoxel,
    then lower frontier id) but never beyond ``seed_res`` of its seed.
    Points left over, e.g. outside every seed sphere, go to the nearest
    supervoxel centroid.
    """
    if seed_res <= voxel_res:
        raise ValueError("seed_res must exceed voxel_res")
    pos = cloud.positions
    n = pos.shape[0]
    w_c, w_s, w_n = weights
    colors = cloud.colors
    if colors is None:
        w_c = 0.0

    index = SpatialIndex.build(pos, voxel_res)
    indptr, indices = cell27_all(index)

    # one seed per occupied seed cell: the member nearest the cell center
    seed_cells = np.floor(pos / seed_res).astype(np.int64)
    smin = seed_cells.min(axis=0)
    sdims = seed_cells.max(axis=0) - smin + 1
    shifted = seed_cells - smin
    cell_key = (shifted[:, 0] * sdims[1] + shifted[:, 1]) * sdims[2] + shifted[:, 2]
    centers = (seed_cells + 0.5) * seed_res
    delta = pos - centers
    d2c = delta[:, 0] ** 2 + delta[:, 1] ** 2 + delta[:, 2] ** 2
    pick = np.lexsort((np.arange(n), d2c, cell_key))
    first_of_cell = np.unique(cell_key[pick], return_index=True)[1]
    seeds = pick[first_of_cell]  # supervoxel ids follow ascending cell key
    n_sv = seeds.shape[0]

    assign = np.full(n, -1, dtype=np.int64)
    assign[seeds] = np.arange(n_sv)
    seed_pos = pos[seeds]
    r2 = seed_res * seed_res
    denom = 3.0 * seed_res * seed_res

    frontier_pts = seeds.copy()
    frontier_sv = np.arange(n_sv)
    while frontier_pts.size:
        dst, lens = _expand_rows(indptr, indices, frontier_pts)
        if dst.size == 0:
            break
        src = np.repeat(frontier_pts, lens)
        svs = np.repeat(frontier_sv, lens)
        open_mask = assign[dst] == -1
        dst, src, svs = dst[open_mask], src[open_mask], svs[open_mask]
        if dst.size == 0:
            break
        ds_seed = pos[dst] - seed_pos[svs]
        inside = (ds_seed[:, 0] ** 2 + ds_seed[:, 1] ** 2 + ds_seed[:, 2] ** 2) <= r2
        dst, src, svs = dst[inside], src[inside], svs[inside]
        if dst.size == 0:
            break
        dp = pos[dst] - pos[src]
        d_s = dp[:, 0] ** 2 + dp[:, 1] ** 2 + dp[:, 2] ** 2
        if w_c > 0.0:
            dc = colors[dst] - colors[src]
            d_c2 = dc[:, 0] ** 2 + dc[:, 1] ** 2 + dc[:, 2] ** 2
        else:
            d_c2 = 0.0
        d_n = 1.0 - np.abs(np.sum(normals[dst] * normals[src], axis=1))
        dist = np.sqrt(w_c * d_c2 + w_s * d_s / denom + w_n * d_n)
        # smallest (D, sv, frontier id) claim wins each candidate point
        claim_order = np.lexsort((src, svs, dist, dst))
        winners_dst, first = np.unique(dst[claim_order], return_index=True)
        winners_sv = svs[claim_order][first]
        assign[winners_dst] = winners_sv
        frontier_pts = winners_dst
        frontier_sv = winners_sv

    orphans = np.flatnonzero(assign == -1)
    if orphans.size:
        grown = assign >= 0
        ssum = np.zeros((n_sv, 3))
        np.add.at(ssum, assign[grown], pos[grown])
        centroids = ssum / np.bincount(assign[grown], minlength=n_sv)[:, None]
        d = pos[orphans][:, None, :] - centroids[None, :, :]
        d2 = d[:, :, 0] ** 2 + d[:, :, 1] ** 2 + d[:, :, 2] ** 2
        assign[orphans] = np.argmin(d2, axis=1)  # ties -> lower supervoxel id
    return Partition(assignment=assign, count=n_sv)


def region_grow(cloud: PointCloud, normals: np.ndarray, curvatures: np.ndarray,
                angle_thresh: float, curv_thresh: float, k: int = 16) -> Partition:
    """Smoothness-constrained region growing.

    Each region starts at the unconsumed point of minimum curvature (ties
    to the lowest id) and floods over k-nearest neighbors. A neighbor joins
    when its normal deviates from the expanding point's normal by at most
    ``angle_thresh`` (measured through |cos|, so canonicalization flips do
    not create false edges); it expands further only when its own curvature
    stays within ``curv_thresh``.
    """
    if angle_thresh <= 0 or curv_thresh <= 0:
        raise ValueError("thresholds must be positive")
    pos = cloud.positions
    n = pos.shape[0]
    extent = pos.max(axis=0) - pos.min(axis=0)
    span = float(extent.max())
    cell = span / max(np.cbrt(n), 1.0) if span > 0 else 1.0
    index = SpatialIndex.build(pos, cell)
    nbr, counts = knn_all(index, pos, min(k, n - 1)) if n > 1 else (
        np.empty((n, 0), np.int64), np.zeros(n, np.int64))
    cos_thresh = math.cos(angle_thresh)

    assign = np.full(n, -1, dtype=np.int64)
    seed_order = np.lexsort((np.arange(n), curvatures))
    region = 0
    kk = nbr.shape[1]
    for seed in seed_order:
        if assign[seed] != -1:
            continue
        assign[seed] = region
        # BFS one adjacency level at a time; a neighbor joins when any
        # frontier point's normal is within the angle threshold
        frontier = np.array([seed], dtype=np.int64)
        while frontier.size and kk:
            dst = nbr[frontier].ravel()
            src = np.repeat(frontier, kk)
            ok = (dst >= 0) & (assign[np.maximum(dst, 0)] == -1)
            dst, src = dst[ok], src[ok]
            if dst.size == 0:
                break
            dots = np.abs(np.sum(normals[src] * normals[dst], axis=1))
            joined = np.unique(dst[dots >= cos_thresh])
            if joined.size == 0:
                break
            assign[joined] = region
            frontier = joined[curvatures[joined] <= curv_thresh]
        region += 1
    return Partition(assignment=assign, count=region)


def merge_vccs_into_rg(vccs: Partition, rg: Partition) -> Partition:
    """Merge supervoxels into region-growing segments by half-overlap.

    A supervoxel whose largest-overlap segment holds >= 50% of its points
    is absorbed by that segment (ties to the lower segment id); otherwise
    it survives as its own superpoint. Output ids list absorbed segments
    first (by segment id) followed by survivors (by supervoxel id).
    """
    if vccs.assignment.shape[0] != rg.assignment.shape[0]:
        raise ValueError("partitions must cover the same points")
    valid = vccs.assignment >= 0
    sv = vccs.assignment[valid]
    seg = rg.assignment[valid]
    overlap = np.bincount(sv * rg.count + seg,
                          minlength=vccs.count * rg.count).reshape(vccs.count, rg.count)
    sv_sizes = overlap.sum(axis=1)
    best_seg = np.argmax(overlap, axis=1)
    best_cnt = overlap[np.arange(vccs.count), best_seg]
    merged = best_cnt * 2 >= sv_sizes

    group = np.empty(vccs.count, dtype=np.int64)
    used_segs = np.unique(best_seg[merged]) if np.any(merged) else np.empty(0, np.int64)
    seg_rank = np.full(rg.count, -1, dtype=np.int64)
    seg_rank[used_segs] = np.arange(used_segs.shape[0])
    group[merged] = seg_rank[best_seg[merged]]
    survivors = np.flatnonzero(~merged)
    group[survivors] = used_segs.shape[0] + np.arange(survivors.shape[0])

    out = np.full(vccs.assignment.shape[0], -1, dtype=np.int64)
    out[valid] = group[sv]
    return Partition(assignment=out, count=used_segs.shape[0] + survivors.shape[0])


def ransac_ground(cloud: PointCloud, dist_thresh: float = 0.2,
                  iterations: int = 500, rng_seed: int = 0):
    """Dominant plane by RANSAC, least-squares refit over its inliers.

    Returns (Plane, inlier ids). The inlier list is recomputed against the
    refit plane, so it is exactly {x : |n.x + d| <= dist_thresh}. Ties on
    the hypothesis inlier count keep the earlier iteration.
    """
    pos = cloud.positions
    n = pos.shape[0]
    if n < 3:
        raise ValueError("plane fitting needs at least 3 points")
    rng = np.random.default_rng(rng_seed)
    best_count = -1
    best_nd = None
    for _ in range(iterations):
        ids = rng.choice(n, size=3, replace=False)
        p0, p1, p2 = pos[ids]
        cross = np.cross(p1 - p0, p2 - p0)
        norm = float(np.linalg.norm(cross))
        if norm < 1e-12:
            continue
        nrm = cross / norm
        d = -float(nrm @ p0)
        cnt = int(np.count_nonzero(np.abs(pos @ nrm + d) <= dist_thresh))
        if cnt > best_count:
            best_count = cnt
            best_nd = (nrm, d)
    if best_nd is None:
        raise ValueError("no valid plane hypothesis (degenerate input)")

    hyp_in = np.abs(pos @ best_nd[0] + best_nd[1]) <= dist_thresh
    sub = pos[hyp_in]
    centroid = sub.mean(axis=0)
    centered = sub - centroid
    cov = centered.T @ centered
    eigvals, eigvecs = np.linalg.eigh(cov)
    nrm = eigvecs[:, 0]
    nrm = nrm / np.linalg.norm(nrm)
    nrm = nrm * _first_nonzero_sign(nrm)
    d = -float(nrm @ centroid)
    inliers = np.flatnonzero(np.abs(pos @ nrm + d) <= dist_thresh)
    return Plane(normal=nrm, d=d), inliers.astype(np.int64)


def euclidean_cluster(cloud: PointCloud, dist: float, subset=None) -> Partition:
    """Connected components of the distance <= dist graph.

    Points outside ``subset`` get -1. Component ids are ranked by their
    smallest member point id, so the labeling does not depend on traversal
    order.
    """
    if dist <= 0:
        raise ValueError("dist must be positive")
    n = len(cloud)
    if subset is None:
        subset = np.arange(n, dtype=np.int64)
    else:
        subset = np.ascontiguousarray(subset, dtype=np.int64)
    assign = np.full(n, -1, dtype=np.int64)
    m = subset.shape[0]
    if m == 0:
        return Partition(assignment=assign, count=0)
    sub_pos = np.ascontiguousarray(cloud.positions[subset])
    index = SpatialIndex.build(sub_pos, max(dist, 1e-9))
    indptr, indices = radius_all(index, sub_pos, dist)
    graph = scipy.sparse.csr_matrix(
        (np.ones(indices.shape[0], dtype=np.int8), indices, indptr), shape=(m, m))
    ncomp, labels = scipy.sparse.csgraph.connected_components(graph, directed=False)
    # normalize component ids by smallest original member id
    first_member = np.full(ncomp, np.iinfo(np.int64).max, dtype=np.int64)
    np.minimum.at(first_member, labels, subset)
    rank = np.argsort(np.argsort(first_member, kind="stable"), kind="stable")
    assign[subset] = rank[labels]
    return Partition(assignment=assign, count=ncomp)


def _dissolve_small(pos: np.ndarray, part: Partition, min_size: int) -> Partition:
    """Fold superpoints below ``min_size`` into their nearest large one.

    Each small superpoint picks the large-superpoint point closest to any
    of its members (ties: lower large point id, then lower member id) and
    joins that point's superpoint as a unit. No large superpoint exists ->
    partition returned unchanged.
    """
    sizes = part.sizes()
    small_ids = np.flatnonzero(sizes < min_size)
    if small_ids.size == 0 or small_ids.size == part.count:
        return part
    assign = part.assignment.copy()
    small_mask = np.isin(assign, small_ids) & (assign >= 0)
    large_pts = np.flatnonzero((assign >= 0) & ~small_mask)
    small_pts = np.flatnonzero(small_mask)

    d = pos[small_pts][:, None, :] - pos[large_pts][None, :, :]
    d2 = d[:, :, 0] ** 2 + d[:, :, 1] ** 2 + d[:, :, 2] ** 2
    nearest = np.argmin(d2, axis=1)          # ties -> lower large id (first hit)
    nearest_d2 = d2[np.arange(small_pts.shape[0]), nearest]
    nearest_large = large_pts[nearest]

    sp_of_small = assign[small_pts]
    pick = np.lexsort((small_pts, nearest_large, nearest_d2, sp_of_small))
    uniq_sp, first = np.unique(sp_of_small[pick], return_index=True)
    target_pt = nearest_large[pick][first]
    target_sp = assign[target_pt]
    remap = np.arange(part.count, dtype=np.int64)
    remap[uniq_sp] = target_sp

    new_assign = np.where(assign >= 0, remap[np.maximum(assign, 0)], -1)
    surviving = np.unique(new_assign[new_assign >= 0])
    compact = np.full(part.count, -1, dtype=np.int64)
    compact[surviving] = np.arange(surviving.shape[0])
    new_assign = np.where(new_assign >= 0, compact[np.maximum(new_assign, 0)], -1)
    return Partition(assignment=new_assign, count=surviving.shape[0])


def initial_superpoints(cloud: PointCloud, mode: str = "indoor", *,
                        voxel_res: float = 0.05, seed_res: float = 0.5,
                        weights=VCCS_WEIGHTS,
                        angle_thresh: float = math.radians(10.0),
                        curv_thresh: float = 0.1, k: int = 16,
                        min_size: int = 10, dist_thresh: float = 0.2,
                        iterations: int = 500, cluster_dist: float = 0.2,
                        rng_seed: int = 0) -> Partition:
    """Construct the frozen epoch-0 superpoints for one voxelized cloud.

    Indoor mode merges supervoxels into region-growing segments; outdoor
    mode takes the RANSAC ground plane as one superpoint and Euclidean
    clusters the rest. Ignored points (gt label -1) are left out and return
    as -1.
    """
    n = len(cloud)
    if cloud.gt_labels is not None:
        keep = np.flatnonzero(cloud.gt_labels >= 0)
    else:
        keep = np.arange(n, dtype=np.int64)
    if keep.size == 0:
        return Partition(assignment=np.full(n, -1, dtype=np.int64), count=0)
    sub = PointCloud(positions=cloud.positions[keep],
                     colors=None if cloud.colors is None else cloud.colors[keep],
                     id=cloud.id)

    if mode == "indoor":
        nf = estimate_normals(sub, k=k)
        vccs = vccs_supervoxels(sub, nf.normals, voxel_res, seed_res, weights)
        rg = region_grow(sub, nf.normals, nf.curvatures, angle_thresh,
                         curv_thresh, k=k)
        part = merge_vccs_into_rg(vccs, rg)
    elif mode == "outdoor":
        _, inliers = ransac_ground(sub, dist_thresh, iterations, rng_seed)
        rest = np.setdiff1d(np.arange(len(sub), dtype=np.int64), inliers)
        clusters = euclidean_cluster(sub, cluster_dist, subset=rest)
        assign = np.empty(len(sub), dtype=np.int64)
        assign[inliers] = 0
        assign[rest] = clusters.assignment[rest] + 1
        part = Partition(assignment=assign, count=clusters.count + 1)
    else:
        raise ValueError(f"unknown mode {mode!r}")

    part = _dissolve_small(sub.positions, part, min_size)
    full = np.full(n, -1, dtype=np.int64)
    full[keep] = part.assignment
    return Partition(assignment=full, count=part.count)
