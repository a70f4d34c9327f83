"""Per-superpoint features: mean embeddings, normal-pair histograms, and
their weighted concatenation.

The histogram summarizes the distribution of pairwise normal cosines inside
a superpoint (10 bins over [-1, 1]); flat segments concentrate in the last
bin, curved ones spread out.  Concatenated onto the mean neural embedding it
lets feature clustering tell geometry apart even when embeddings are young.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import NormalField
from .superpoints import Partition

PFH_BINS = 10


@dataclass(frozen=True)
class SuperpointFeatures:
    """Per-superpoint feature blocks, rows aligned with partition ids."""

    neural: np.ndarray     # count x K mean embeddings
    pfh: np.ndarray        # count x PFH_BINS histograms, rows sum to 1
    augmented: np.ndarray  # count x (K + PFH_BINS)


def mean_feature(features: np.ndarray, partition: Partition) -> np.ndarray:
    """Mean feature row per superpoint.

    Points with assignment -1 (ignored regions) do not contribute.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] != len(partition.assignment):
        raise ValueError("feature rows must match partition length")
    assign = partition.assignment
    member = assign >= 0
    counts = np.bincount(assign[member], minlength=partition.count)
    out = np.zeros((partition.count, features.shape[1]))
    np.add.at(out, assign[member], features[member])
    out /= counts[:, None]
    return out


def _pair_cosines(normals: np.ndarray, members: np.ndarray,
                  max_pairs: int, rng_seed: int, sp_id: int) -> np.ndarray:
    q = len(members)
    total = q * (q - 1) // 2
    if total <= max_pairs:
        i, j = np.triu_indices(q, k=1)
    else:
        rng = np.random.default_rng(np.random.SeedSequence((rng_seed, sp_id)))
        t = rng.integers(0, total, size=max_pairs)
        # decode flat pair index t = j(j-1)/2 + i with 0 <= i < j
        j = ((1.0 + np.sqrt(1.0 + 8.0 * t.astype(np.float64))) // 2).astype(np.int64)
        j -= j * (j - 1) // 2 > t
        i = t - j * (j - 1) // 2
    a = normals[members[i]]
    b = normals[members[j]]
    return np.einsum("ij,ij->i", a, b)


def pfh_histogram(normals: NormalField | np.ndarray, partition: Partition,
                  max_pairs: int = 1024, rng_seed: int = 0) -> np.ndarray:
    """Histogram of pairwise normal cosines per superpoint.

    Bins cover [-1, 1] with width 0.2; cos = 1 lands in the last bin.  When a
    superpoint has more than max_pairs unordered pairs, a seeded uniform
    sample (with replacement) stands in for the full set.  Singletons get all
    mass in the last bin.
    """
    nrm = normals.normals if isinstance(normals, NormalField) else np.asarray(normals)
    assign = partition.assignment
    order = np.argsort(assign, kind="stable")
    order = order[assign[order] >= 0]
    bounds = np.searchsorted(assign[order], np.arange(partition.count + 1))
    sizes = np.diff(bounds)
    out = np.zeros((partition.count, PFH_BINS))
    out[sizes == 1, PFH_BINS - 1] = 1.0
    for sp in np.flatnonzero(sizes > 1):
        members = order[bounds[sp]:bounds[sp + 1]]
        cos = _pair_cosines(nrm, members, max_pairs, rng_seed, sp)
        bins = np.floor((cos + 1.0) / 0.2).astype(np.int64)
        np.clip(bins, 0, PFH_BINS - 1, out=bins)
        hist = np.bincount(bins, minlength=PFH_BINS).astype(np.float64)
        out[sp] = hist / hist.sum()
    return out


def augment(neural: np.ndarray, pfh: np.ndarray, lam: float = 1.0) -> np.ndarray:
    """Concatenate L2-normalized neural rows with lam-scaled histograms."""
    neural = np.asarray(neural, dtype=np.float64)
    pfh = np.asarray(pfh, dtype=np.float64)
    if neural.shape[0] != pfh.shape[0]:
        raise ValueError("row count mismatch between neural and pfh blocks")
    norms = np.linalg.norm(neural, axis=1, keepdims=True)
    unit = np.divide(neural, norms, out=np.zeros_like(neural), where=norms > 0)
    return np.concatenate([unit, lam * pfh], axis=1)


def superpoint_features(features: np.ndarray, normals: NormalField | np.ndarray,
                        partition: Partition, lam: float = 1.0,
                        max_pairs: int = 1024, rng_seed: int = 0) -> SuperpointFeatures:
    neural = mean_feature(features, partition)
    pfh = pfh_histogram(normals, partition, max_pairs=max_pairs, rng_seed=rng_seed)
    return SuperpointFeatures(neural=neural, pfh=pfh,
                              augmented=augment(neural, pfh, lam))
