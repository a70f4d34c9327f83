# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled neighbor-search kernels over a sorted voxel-grid index.

All kernels take the flattened grid arrays produced by
``growseg.geometry.SpatialIndex`` (packed cell keys sorted ascending, CSR
bucket starts, point ids grouped by cell) and return results with exact
deterministic tie-breaks: candidates are ordered by (squared distance,
point id) and neighbor lists are sorted by point id. The pure-NumPy twin in
``_kernels_py`` implements the same contracts bit-for-bit.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

ctypedef cnp.int64_t i64
ctypedef cnp.float64_t f64


cdef inline long long _find_key(const i64[::1] keys, long long key) nogil:
    # binary search; -1 when the cell is unoccupied
    cdef long long lo = 0, hi = keys.shape[0] - 1, mid
    while lo <= hi:
        mid = (lo + hi) >> 1
        if keys[mid] == key:
            return mid
        if keys[mid] < key:
            lo = mid + 1
        else:
            hi = mid - 1
    return -1


cdef inline long long _pack(long long cx, long long cy, long long cz,
                            const i64[::1] origin, const i64[::1] dims) nogil:
    # cells outside the occupied bounding grid cannot hold points
    cdef long long ax = cx - origin[0], ay = cy - origin[1], az = cz - origin[2]
    if ax < 0 or ay < 0 or az < 0 or ax >= dims[0] or ay >= dims[1] or az >= dims[2]:
        return -1
    return (ax * dims[1] + ay) * dims[2] + az


def knn_query(const f64[:, ::1] pos, const i64[:, ::1] cells,
              const i64[::1] keys, const i64[::1] starts, const i64[::1] order,
              const i64[::1] origin, const i64[::1] dims,
              double cell_size, int k):
    """k nearest neighbors (excluding self) per point.

    Returns (ids (n,k) int64 padded with -1, counts (n,) int64). Ties on the
    squared distance go to the lower point id.
    """
    cdef long long n = pos.shape[0]
    out = np.full((n, k), -1, dtype=np.int64)
    counts = np.zeros(n, dtype=np.int64)
    cdef i64[:, ::1] out_v = out
    cdef i64[::1] counts_v = counts
    cdef f64[::1] best_d2 = np.empty(k, dtype=np.float64)
    cdef i64[::1] best_id = np.empty(k, dtype=np.int64)
    cdef long long i, j, pid, key, b, b0, b1, m, pos_ins, t
    cdef long long cx, cy, cz, dx, dy, dz, s, max_shell
    cdef double px, py, pz, ddx, ddy, ddz, d2, bound
    cdef bint better

    max_shell = dims[0]
    if dims[1] > max_shell:
        max_shell = dims[1]
    if dims[2] > max_shell:
        max_shell = dims[2]

    for i in range(n):
        px = pos[i, 0]; py = pos[i, 1]; pz = pos[i, 2]
        cx = cells[i, 0]; cy = cells[i, 1]; cz = cells[i, 2]
        m = 0
        s = 0
        while s <= max_shell:
            for dx in range(-s, s + 1):
                for dy in range(-s, s + 1):
                    for dz in range(-s, s + 1):
                        # only the outermost shell is new at this step
                        if max(abs(dx), max(abs(dy), abs(dz))) != s:
                            continue
                        key = _pack(cx + dx, cy + dy, cz + dz, origin, dims)
                        if key < 0:
                            continue
                        b = _find_key(keys, key)
                        if b < 0:
                            continue
                        b0 = starts[b]; b1 = starts[b + 1]
                        for j in range(b0, b1):
                            pid = order[j]
                            if pid == i:
                                continue
                            ddx = pos[pid, 0] - px
                            ddy = pos[pid, 1] - py
                            ddz = pos[pid, 2] - pz
                            d2 = ddx * ddx + ddy * ddy + ddz * ddz
                            if m == k:
                                better = d2 < best_d2[k - 1] or \
                                    (d2 == best_d2[k - 1] and pid < best_id[k - 1])
                                if not better:
                                    continue
                                m = k - 1
                            # insertion keeping (d2, id) ascending
                            pos_ins = m
                            while pos_ins > 0 and (
                                    best_d2[pos_ins - 1] > d2 or
                                    (best_d2[pos_ins - 1] == d2 and best_id[pos_ins - 1] > pid)):
                                best_d2[pos_ins] = best_d2[pos_ins - 1]
                                best_id[pos_ins] = best_id[pos_ins - 1]
                                pos_ins -= 1
                            best_d2[pos_ins] = d2
                            best_id[pos_ins] = pid
                            m += 1
            if m == k:
                # shell s+1 points lie at distance >= s*cell_size; an equal
                # distance could still win its id tie, so stop only on strict
                bound = s * cell_size
                if best_d2[k - 1] < bound * bound:
                    break
            s += 1
        counts_v[i] = m
        for t in range(m):
            out_v[i, t] = best_id[t]
    return out, counts


def radius_query(const f64[:, ::1] pos, const i64[:, ::1] cells,
                 const i64[::1] keys, const i64[::1] starts, const i64[::1] order,
                 const i64[::1] origin, const i64[::1] dims,
                 double cell_size, double radius):
    """All neighbors within ``radius`` (inclusive, excluding self), CSR form.

    Returns (indptr (n+1,), indices) with each row sorted by point id.
    """
    cdef long long n = pos.shape[0]
    cdef long long reach = <long long> (radius / cell_size) + 1
    cdef double r2 = radius * radius
    indptr = np.zeros(n + 1, dtype=np.int64)
    cdef i64[::1] indptr_v = indptr
    cdef long long i, j, pid, key, b, b0, b1, c, total, w, pos_ins
    cdef long long cx, cy, cz, dx, dy, dz
    cdef double px, py, pz, ddx, ddy, ddz, d2

    # pass 1: row sizes
    for i in range(n):
        px = pos[i, 0]; py = pos[i, 1]; pz = pos[i, 2]
        cx = cells[i, 0]; cy = cells[i, 1]; cz = cells[i, 2]
        c = 0
        for dx in range(-reach, reach + 1):
            for dy in range(-reach, reach + 1):
                for dz in range(-reach, reach + 1):
                    key = _pack(cx + dx, cy + dy, cz + dz, origin, dims)
                    if key < 0:
                        continue
                    b = _find_key(keys, key)
                    if b < 0:
                        continue
                    b0 = starts[b]; b1 = starts[b + 1]
                    for j in range(b0, b1):
                        pid = order[j]
                        if pid == i:
                            continue
                        ddx = pos[pid, 0] - px
                        ddy = pos[pid, 1] - py
                        ddz = pos[pid, 2] - pz
                        d2 = ddx * ddx + ddy * ddy + ddz * ddz
                        if d2 <= r2:
                            c += 1
        indptr_v[i + 1] = c
    total = 0
    for i in range(n):
        total += indptr_v[i + 1]
        indptr_v[i + 1] = total
    indices = np.empty(total, dtype=np.int64)
    cdef i64[::1] indices_v = indices

    # pass 2: fill, insertion-sorting each row by id
    for i in range(n):
        px = pos[i, 0]; py = pos[i, 1]; pz = pos[i, 2]
        cx = cells[i, 0]; cy = cells[i, 1]; cz = cells[i, 2]
        w = indptr_v[i]
        for dx in range(-reach, reach + 1):
            for dy in range(-reach, reach + 1):
                for dz in range(-reach, reach + 1):
                    key = _pack(cx + dx, cy + dy, cz + dz, origin, dims)
                    if key < 0:
                        continue
                    b = _find_key(keys, key)
                    if b < 0:
                        continue
                    b0 = starts[b]; b1 = starts[b + 1]
                    for j in range(b0, b1):
                        pid = order[j]
                        if pid == i:
                            continue
                        ddx = pos[pid, 0] - px
                        ddy = pos[pid, 1] - py
                        ddz = pos[pid, 2] - pz
                        d2 = ddx * ddx + ddy * ddy + ddz * ddz
                        if d2 <= r2:
                            pos_ins = w
                            while pos_ins > indptr_v[i] and indices_v[pos_ins - 1] > pid:
                                indices_v[pos_ins] = indices_v[pos_ins - 1]
                                pos_ins -= 1
                            indices_v[pos_ins] = pid
                            w += 1
    return indptr, indices


def cell27_query(const i64[:, ::1] cells,
                 const i64[::1] keys, const i64[::1] starts, const i64[::1] order,
                 const i64[::1] origin, const i64[::1] dims):
    """Points in the 27-cell neighborhood of each point's cell, CSR form.

    Self is excluded; rows are sorted by point id.
    """
    cdef long long n = cells.shape[0]
    indptr = np.zeros(n + 1, dtype=np.int64)
    cdef i64[::1] indptr_v = indptr
    cdef long long i, j, pid, key, b, c, total, w, pos_ins
    cdef long long cx, cy, cz, dx, dy, dz

    for i in range(n):
        cx = cells[i, 0]; cy = cells[i, 1]; cz = cells[i, 2]
        c = 0
        for dx in range(-1, 2):
            for dy in range(-1, 2):
                for dz in range(-1, 2):
                    key = _pack(cx + dx, cy + dy, cz + dz, origin, dims)
                    if key < 0:
                        continue
                    b = _find_key(keys, key)
                    if b < 0:
                        continue
                    c += starts[b + 1] - starts[b]
        indptr_v[i + 1] = c - 1  # own bucket always contains self
    total = 0
    for i in range(n):
        total += indptr_v[i + 1]
        indptr_v[i + 1] = total
    indices = np.empty(total, dtype=np.int64)
    cdef i64[::1] indices_v = indices

    for i in range(n):
        cx = cells[i, 0]; cy = cells[i, 1]; cz = cells[i, 2]
        w = indptr_v[i]
        for dx in range(-1, 2):
            for dy in range(-1, 2):
                for dz in range(-1, 2):
                    key = _pack(cx + dx, cy + dy, cz + dz, origin, dims)
                    if key < 0:
                        continue
                    b = _find_key(keys, key)
                    if b < 0:
                        continue
                    for j in range(starts[b], starts[b + 1]):
                        pid = order[j]
                        if pid == i:
                            continue
                        pos_ins = w
                        while pos_ins > indptr_v[i] and indices_v[pos_ins - 1] > pid:
                            indices_v[pos_ins] = indices_v[pos_ins - 1]
                            pos_ins -= 1
                        indices_v[pos_ins] = pid
                        w += 1
    return indptr, indices
