"""Point-cloud containers, voxel-grid downsampling, and normal estimation.

This module holds the foundational pieces every other stage builds on:

- ``PointCloud``: positions in meters with optional [0,1] RGB colors and
  optional ground-truth labels (-1 marks ignored points).
- ``SpatialIndex``: a voxel hash (cell -> point ids) backing all neighbor
  queries; the heavy lifting is delegated to ``growseg._core.backend``.
- ``voxel_downsample``: centroid pooling onto a regular grid.
- ``estimate_normals``: per-point PCA normals with curvature, canonicalized
  so the first nonzero component of (n_z, n_y, n_x) is positive.

Everything is float64 and deterministic; ties in nearest-neighbor queries go
to the lower point id.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ._core import backend

_DEGENERATE_VARIANCE = 1e-18


@dataclass
class PointCloud:
    """A point cloud with optional per-point colors and labels.

    Attributes:
        positions: (N, 3) float64 coordinates in meters.
        colors: optional (N, 3) float64 RGB in [0, 1].
        gt_labels: optional (N,) int64 class ids, -1 meaning ignored.
        id: opaque scene identifier.
    """

    positions: np.ndarray
    colors: Optional[np.ndarray] = None
    gt_labels: Optional[np.ndarray] = None
    id: str = ""

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise ValueError("positions must have shape (N, 3)")
        n = self.positions.shape[0]
        if n < 1:
            raise ValueError("a point cloud needs at least one point")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("positions must be finite")
        if self.colors is not None:
            self.colors = np.ascontiguousarray(self.colors, dtype=np.float64)
            if self.colors.shape != (n, 3):
                raise ValueError("colors must have shape (N, 3)")
            if not np.all(np.isfinite(self.colors)):
                raise ValueError("colors must be finite")
            if self.colors.min() < 0.0 or self.colors.max() > 1.0:
                raise ValueError("colors must lie in [0, 1]")
        if self.gt_labels is not None:
            self.gt_labels = np.ascontiguousarray(self.gt_labels, dtype=np.int64)
            if self.gt_labels.shape != (n,):
                raise ValueError("gt_labels must have shape (N,)")

    def __len__(self):
        return self.positions.shape[0]


@dataclass
class NormalField:
    """Unit normals with curvature lambda0 / (lambda0+lambda1+lambda2).

    ``degenerate`` flags points whose neighborhood had no measurable spread
    (normal forced to (0, 0, 1), curvature 0).
    """

    normals: np.ndarray
    curvatures: np.ndarray
    degenerate: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.normals = np.ascontiguousarray(self.normals, dtype=np.float64)
        self.curvatures = np.ascontiguousarray(self.curvatures, dtype=np.float64)
        if self.degenerate is None:
            self.degenerate = np.zeros(self.normals.shape[0], dtype=bool)


@dataclass
class SpatialIndex:
    """Voxel hash: cell c = floor(p / cell_size) componentwise.

    Stores point ids grouped by packed cell key (keys sorted ascending) so
    both kernel backends can binary-search cells without a Python dict.
    """

    cell_size: float
    cells: np.ndarray      # (N, 3) int64 cell coordinate per point
    keys: np.ndarray       # (M,) int64 packed keys of occupied cells, sorted
    starts: np.ndarray     # (M+1,) int64 CSR offsets into ``order``
    order: np.ndarray      # (N,) int64 point ids grouped by cell
    origin: np.ndarray     # (3,) int64 minimum cell coordinate
    dims: np.ndarray       # (3,) int64 grid extent in cells

    @classmethod
    def build(cls, positions: np.ndarray, cell_size: float) -> "SpatialIndex":
        if cell_size <= 0:
            raise ValueError("cell_size must be positive")
        positions = np.ascontiguousarray(positions, dtype=np.float64)
        cells = np.floor(positions / cell_size).astype(np.int64)
        origin = cells.min(axis=0)
        dims = cells.max(axis=0) - origin + 1
        if int(dims[0]) * int(dims[1]) * int(dims[2]) >= 2**62:
            raise ValueError("grid too large to index")
        shifted = cells - origin
        packed = (shifted[:, 0] * dims[1] + shifted[:, 1]) * dims[2] + shifted[:, 2]
        order = np.argsort(packed, kind="stable").astype(np.int64)
        sorted_keys = packed[order]
        keys, first = np.unique(sorted_keys, return_index=True)
        starts = np.empty(keys.shape[0] + 1, dtype=np.int64)
        starts[:-1] = first
        starts[-1] = positions.shape[0]
        return cls(cell_size=float(cell_size), cells=cells, keys=keys,
                   starts=starts, order=order,
                   origin=origin.astype(np.int64), dims=dims.astype(np.int64))

    def cell_of(self, point_id: int) -> tuple:
        return tuple(int(c) for c in self.cells[point_id])

    def points_in_cell(self, cell: tuple) -> np.ndarray:
        """Point ids stored in an integer cell coordinate (ascending)."""
        c = np.asarray(cell, dtype=np.int64) - self.origin
        if np.any(c < 0) or np.any(c >= self.dims):
            return np.empty(0, dtype=np.int64)
        key = (c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2]
        b = np.searchsorted(self.keys, key)
        if b == self.keys.shape[0] or self.keys[b] != key:
            return np.empty(0, dtype=np.int64)
        return np.sort(self.order[self.starts[b]:self.starts[b + 1]])


def _grid_args(index: SpatialIndex):
    return (index.cells, index.keys, index.starts, index.order,
            index.origin, index.dims)


def knn_all(index: SpatialIndex, positions: np.ndarray, k: int):
    """Batch k-nearest-neighbors for every point, (ids (N,k), counts (N,))."""
    positions = np.ascontiguousarray(positions, dtype=np.float64)
    return backend.knn_query(positions, *_grid_args(index), index.cell_size, k)

def radius_all(index: SpatialIndex, positions: np.ndarray, radius: float):
    """Batch radius query for every point in CSR form (indptr, indices)."""
    positions = np.ascontiguousarray(positions, dtype=np.float64)
    return backend.radius_query(positions, *_grid_args(index), index.cell_size, radius)

def cell27_all(index: SpatialIndex):
    """27-cell voxel adjacency for every point in CSR form."""
    return backend.cell27_query(*_grid_args(index))


def voxel_downsample(cloud: PointCloud, grid: float):
    """Pool a cloud onto a regular voxel grid.

    One output point per occupied voxel at the centroid of its members.
    Colors are averaged; the label of a voxel is the majority non-ignored
    member label (ties to the lower label id), or -1 when every member is
    ignored.

    Args:
        cloud: input cloud.
        grid: voxel edge length in meters, > 0.

    Returns:
        (downsampled PointCloud, (N,) int64 mapping original id -> voxel id)
    """
    if grid <= 0:
        raise ValueError("grid must be positive")
    cells = np.floor(cloud.positions / grid).astype(np.int64)
    # pack through the index machinery for a deterministic voxel order
    origin = cells.min(axis=0)
    dims = cells.max(axis=0) - origin + 1
    shifted = cells - origin
    packed = (shifted[:, 0] * dims[1] + shifted[:, 1]) * dims[2] + shifted[:, 2]
    uniq, inv = np.unique(packed, return_inverse=True)
    v = uniq.shape[0]
    counts = np.bincount(inv, minlength=v).astype(np.float64)
    pos = np.empty((v, 3), dtype=np.float64)
    for axis in range(3):
        pos[:, axis] = np.bincount(inv, weights=cloud.positions[:, axis], minlength=v)
    pos /= counts[:, np.newaxis]
    colors = None
    if cloud.colors is not None:
        colors = np.empty((v, 3), dtype=np.float64)
        for axis in range(3):
            colors[:, axis] = np.bincount(inv, weights=cloud.colors[:, axis], minlength=v)
        colors /= counts[:, np.newaxis]
        colors = np.clip(colors, 0.0, 1.0)
    labels = None
    if cloud.gt_labels is not None:
        labels = np.full(v, -1, dtype=np.int64)
        valid = cloud.gt_labels >= 0
        if np.any(valid):
            nlab = int(cloud.gt_labels[valid].max()) + 1
            tallies = np.bincount(inv[valid] * nlab + cloud.gt_labels[valid],
                                  minlength=v * nlab).reshape(v, nlab)
            has_valid = tallies.sum(axis=1) > 0
            labels[has_valid] = np.argmax(tallies[has_valid], axis=1)
    out = PointCloud(positions=pos, colors=colors, gt_labels=labels, id=cloud.id)
    return out, inv.astype(np.int64)


def neighbors(index: SpatialIndex, cloud: PointCloud, query: int, mode: str = "knn",
              k: int = None, r: float = None, include_self: bool = False) -> np.ndarray:
    """Neighbor ids of one query point.

    Args:
        index: spatial index built over ``cloud.positions``.
        cloud: the cloud being queried.
        query: point id.
        mode: "knn" (k nearest, ties to lower id) or "radius" (distance <= r).
        k: neighbor count for knn mode; clamped to N-1 (N with include_self).
        r: radius in meters for radius mode.
        include_self: count the query point itself as a candidate.

    Returns:
        int64 array of point ids; knn results ordered by (distance, id),
        radius results ordered by id.
    """
    n = len(cloud)
    if query < 0 or query >= n:
        raise ValueError("query point id out of range")
    pos = cloud.positions
    d = pos - pos[query]
    d2 = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]
    if mode == "knn":
        if k is None or k < 1:
            raise ValueError("knn mode needs k >= 1")
        cand = np.arange(n) if include_self else np.delete(np.arange(n), query)
        kk = min(k, cand.shape[0])
        sel = np.lexsort((cand, d2[cand]))[:kk]
        return cand[sel].astype(np.int64)
    if mode == "radius":
        if r is None or r <= 0:
            raise ValueError("radius mode needs r > 0")
        ids = np.flatnonzero(d2 <= r * r)
        if not include_self:
            ids = ids[ids != query]
        return ids.astype(np.int64)
    raise ValueError(f"unknown mode {mode!r}")


def estimate_normals(cloud: PointCloud, k: int = 16) -> NormalField:
    """PCA normals over each point and its k nearest neighbors.

    The normal is the eigenvector of the smallest covariance eigenvalue,
    flipped so the first nonzero component of (n_z, n_y, n_x) is positive.
    Curvature is lambda0 / (lambda0 + lambda1 + lambda2), in [0, 1/3].
    Degenerate neighborhoods (zero spread) yield normal (0, 0, 1) and
    curvature 0, flagged in the result.

    Args:
        cloud: at least 3 points.
        k: neighbor count, >= 3 (clamped to N-1).

    Returns:
        NormalField with per-point normals, curvatures, degenerate flags.
    """
    n = len(cloud)
    if n < 3:
        raise ValueError("normal estimation needs at least 3 points")
    if k < 3:
        raise ValueError("k must be >= 3")
    pos = cloud.positions
    extent = pos.max(axis=0) - pos.min(axis=0)
    span = float(extent.max())
    cell = span / max(np.cbrt(n), 1.0) if span > 0 else 1.0
    index = SpatialIndex.build(pos, cell)
    kk = min(k, n - 1)
    nbr, counts = knn_all(index, pos, kk)

    # member sets = self + neighbors; padded slots masked out of the stats
    gathered = pos[np.where(nbr >= 0, nbr, 0)]              # (n, kk, 3)
    mask = (nbr >= 0).astype(np.float64)[:, :, np.newaxis]  # (n, kk, 1)
    gathered = gathered * mask
    m = counts.astype(np.float64) + 1.0
    mean = (pos + gathered.sum(axis=1)) / m[:, np.newaxis]
    centered_self = pos - mean
    centered = (pos[np.where(nbr >= 0, nbr, 0)] - mean[:, np.newaxis, :]) * mask
    cov = np.einsum("nki,nkj->nij", centered, centered)
    cov += centered_self[:, :, np.newaxis] * centered_self[:, np.newaxis, :]
    cov /= m[:, np.newaxis, np.newaxis]

    eigvals, eigvecs = np.linalg.eigh(cov)
    eigvals = np.maximum(eigvals, 0.0)
    total = eigvals.sum(axis=1)
    degenerate = total < _DEGENERATE_VARIANCE
    normals = eigvecs[:, :, 0].copy()
    norms = np.sqrt(np.sum(normals * normals, axis=1))
    safe = np.where(norms > 0, norms, 1.0)
    normals /= safe[:, np.newaxis]

    # canonical orientation: first nonzero of (n_z, n_y, n_x) positive
    nz, ny, nx = normals[:, 2], normals[:, 1], normals[:, 0]
    sign = np.where(nz != 0.0, np.sign(nz),
                    np.where(ny != 0.0, np.sign(ny),
                             np.where(nx != 0.0, np.sign(nx), 1.0)))
    normals *= sign[:, np.newaxis]

    curvatures = np.zeros(n, dtype=np.float64)
    ok = ~degenerate
    curvatures[ok] = eigvals[ok, 0] / total[ok]
    normals[degenerate] = (0.0, 0.0, 1.0)
    return NormalField(normals=normals, curvatures=curvatures, degenerate=degenerate)
