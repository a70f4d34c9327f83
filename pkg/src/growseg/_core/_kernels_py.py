"""Pure-NumPy fallback for the compiled neighbor-search kernels.

Same signatures and the same deterministic contracts as ``_kernels``:
candidate ordering by (squared distance, point id), neighbor rows sorted by
point id, squared distances accumulated as dx*dx + dy*dy + dz*dz in that
order so results agree bit-for-bit with the compiled code.

knn and radius queries fall back to chunked brute force (the grid arrays are
accepted but unused); the 27-cell query uses the sorted grid keys directly.
"""

import numpy as np

_CHUNK = 256


def _chunk_d2(pos, lo, hi):
    """Squared distances from points [lo, hi) to every point, (hi-lo, n)."""
    d = pos[np.newaxis, :, :] - pos[lo:hi, np.newaxis, :]
    # explicit per-component sum to mirror the compiled accumulation order
    return d[:, :, 0] * d[:, :, 0] + d[:, :, 1] * d[:, :, 1] + d[:, :, 2] * d[:, :, 2]


def knn_query(pos, cells, keys, starts, order, origin, dims, cell_size, k):
    n = pos.shape[0]
    out = np.full((n, k), -1, dtype=np.int64)
    counts = np.zeros(n, dtype=np.int64)
    if n == 1:
        return out, counts
    kk = min(k, n - 1)
    for lo in range(0, n, _CHUNK):
        hi = min(lo + _CHUNK, n)
        d2 = _chunk_d2(pos, lo, hi)
        for r in range(hi - lo):
            i = lo + r
            row = d2[r]
            # pivot value of the (kk+1)-th smallest (self included at d2=0);
            # taking every candidate <= pivot keeps boundary ties intact
            part = np.partition(row, kk)
            pivot = part[kk]
            cand = np.flatnonzero(row <= pivot)
            cand = cand[cand != i]
            sel = np.lexsort((cand, row[cand]))[:kk]
            ids = cand[sel]
            out[i, : ids.shape[0]] = ids
            counts[i] = ids.shape[0]
    return out, counts


def radius_query(pos, cells, keys, starts, order, origin, dims, cell_size, radius):
    n = pos.shape[0]
    r2 = radius * radius
    indptr = np.zeros(n + 1, dtype=np.int64)
    parts = []
    for lo in range(0, n, _CHUNK):
        hi = min(lo + _CHUNK, n)
        d2 = _chunk_d2(pos, lo, hi)
        for r in range(hi - lo):
            i = lo + r
            ids = np.flatnonzero(d2[r] <= r2)
            ids = ids[ids != i]
            parts.append(ids.astype(np.int64))
            indptr[i + 1] = indptr[i] + ids.shape[0]
    indices = np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)
    return indptr, indices


def cell27_query(cells, keys, starts, order, origin, dims):
    n = cells.shape[0]
    shifted = cells - np.asarray(origin)[np.newaxis, :]
    rows = []
    cols = []
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dz in (-1, 0, 1):
                probe = shifted + np.array([dx, dy, dz], dtype=np.int64)
                valid = np.all((probe >= 0) & (probe < np.asarray(dims)), axis=1)
                key = (probe[:, 0] * dims[1] + probe[:, 1]) * dims[2] + probe[:, 2]
                pos_in_keys = np.searchsorted(keys, key)
                pos_in_keys[~valid] = 0
                hit = valid & (pos_in_keys < keys.shape[0]) & (keys[np.minimum(pos_in_keys, keys.shape[0] - 1)] == key)
                hit_ids = np.flatnonzero(hit)
                b = pos_in_keys[hit_ids]
                cnt = (starts[b + 1] - starts[b]).astype(np.int64)
                rows.append(np.repeat(hit_ids, cnt))
                # expand each bucket range [starts[b], starts[b+1])
                if cnt.sum():
                    offs = np.concatenate([np.arange(c) for c in cnt])
                    cols.append(order[np.repeat(starts[b], cnt) + offs])
                else:
                    cols.append(np.empty(0, dtype=np.int64))
    row = np.concatenate(rows)
    col = np.concatenate(cols)
    keep = row != col
    row = row[keep]
    col = col[keep]
    sel = np.lexsort((col, row))
    row = row[sel]
    col = col[sel]
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(indptr, row + 1, 1)
    np.cumsum(indptr, out=indptr)
    return indptr, col
