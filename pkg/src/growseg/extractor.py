"""Small per-point feature network with hand-written forward/backward.

Architecture: [linear -> ReLU -> radius-mean aggregation] per hidden layer,
then a final linear map to the K-dim embedding.  Aggregation replaces each
point's activation with the mean over itself and its radius neighbors, which
grows the receptive field the way stacked convolutions would.  Everything is
float64 and seeded, so gradients can be checked against finite differences
and runs are bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .geometry import PointCloud, SpatialIndex, radius_all

__all__ = [
    "ExtractorParams", "ForwardCache", "OptimizerState", "Aggregator",
    "init_params", "prepare_inputs", "aggregation_operator", "forward",
    "extract_features", "backward", "ce_loss_and_feature_grad",
    "init_optimizer", "sgd_step",
]

INPUT_DIM = 9  # bbox-normalized xyz, voxel-offset xyz, rgb


@dataclass
class ExtractorParams:
    weights: list  # per-layer (fan_in, fan_out) matrices
    biases: list   # per-layer (fan_out,) vectors
    k: int

    def copy(self) -> "ExtractorParams":
        return ExtractorParams([w.copy() for w in self.weights],
                               [b.copy() for b in self.biases], self.k)


@dataclass
class ForwardCache:
    x: np.ndarray        # network input rows
    pre: list            # pre-activation z per hidden layer
    agg_in: list         # input to each linear layer (x, then aggregated relu)
    agg: "Aggregator"


@dataclass
class OptimizerState:
    velocity: list       # momentum buffers, one per weight/bias in layer order
    iteration: int
    lr0: float
    momentum: float
    power: float
    t_max: int


@dataclass(frozen=True)
class Aggregator:
    """Row-normalized neighborhood-mean operator and its transpose."""

    a: sp.csr_matrix
    at: sp.csr_matrix


def init_params(seed: int, input_dim: int = INPUT_DIM,
                hidden_dims: tuple = (32, 32), k: int = 32) -> ExtractorParams:
    """Xavier-uniform weights, zero biases, deterministic given seed."""
    dims = [input_dim, *hidden_dims, k]
    if any(d < 1 for d in dims):
        raise ValueError("all layer dims must be >= 1")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return ExtractorParams(weights=weights, biases=biases, k=k)


def prepare_inputs(cloud: PointCloud, grid: float) -> np.ndarray:
    """Per-point input rows: bbox-normalized xyz, voxel offsets, rgb."""
    pos = cloud.positions
    lo = pos.min(axis=0)
    span = pos.max(axis=0) - lo
    span = np.where(span > 0, span, 1.0)
    unit = (pos - lo) / span
    cells = np.floor(pos / grid)
    offset = (pos - (cells + 0.5) * grid) / (grid / 2.0)
    rgb = cloud.colors if cloud.colors is not None else np.zeros_like(pos)
    return np.concatenate([unit, offset, rgb], axis=1)


def aggregation_operator(cloud: PointCloud, radius: float) -> Aggregator:
    pos = cloud.positions
    n = len(pos)
    index = SpatialIndex.build(pos, radius)
    indptr, indices = radius_all(index, pos, radius)
    degree = np.diff(indptr) + 1.0  # self included
    data = np.repeat(1.0 / degree, np.diff(indptr))
    a = sp.csr_matrix((data, indices, indptr), shape=(n, n))
    a = (a + sp.diags(1.0 / degree)).tocsr()
    return Aggregator(a=a, at=a.T.tocsr())


def forward(params: ExtractorParams, x: np.ndarray,
            agg: Aggregator) -> tuple[np.ndarray, ForwardCache]:
    pre, agg_in = [], []
    h = x
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        agg_in.append(h)
        z = h @ w + b
        pre.append(z)
        h = agg.a @ np.maximum(z, 0.0)
    agg_in.append(h)
    features = h @ params.weights[-1] + params.biases[-1]
    return features, ForwardCache(x=x, pre=pre, agg_in=agg_in, agg=agg)


def extract_features(params: ExtractorParams, cloud: PointCloud, grid: float,
                     radius: float) -> tuple[np.ndarray, ForwardCache]:
    """Convenience path: build inputs and the operator, then run forward."""
    x = prepare_inputs(cloud, grid)
    return forward(params, x, aggregation_operator(cloud, radius))


def backward(params: ExtractorParams, cache: ForwardCache,
             d_features: np.ndarray) -> list:
    """Exact reverse-mode gradients, returned as [dW0, db0, dW1, db1, ...]."""
    if d_features.shape != (cache.agg_in[-1].shape[0], params.k):
        raise ValueError("gradient shape does not match forward output")
    grads = [None] * (2 * len(params.weights))
    d = d_features
    last = len(params.weights) - 1
    grads[2 * last] = cache.agg_in[last].T @ d
    grads[2 * last + 1] = d.sum(axis=0)
    d = d @ params.weights[last].T
    for i in range(last - 1, -1, -1):
        d = cache.agg.at @ d           # mean-agg backward
        d = d * (cache.pre[i] > 0.0)   # ReLU backward
        grads[2 * i] = cache.agg_in[i].T @ d
        grads[2 * i + 1] = d.sum(axis=0)
        d = d @ params.weights[i].T
    return grads


def ce_loss_and_feature_grad(features: np.ndarray, pseudo: np.ndarray,
                             centroids: np.ndarray,
                             tau: float = 0.1) -> tuple[float, np.ndarray]:
    """Cross-entropy of cosine logits against pseudo-labels.

    Logits are cosine similarities between L2-normalized features and
    centroid rows, divided by tau.  The returned gradient is with respect to
    the raw features (the normalization is differentiated through).  Points
    with pseudo-label -1 contribute nothing.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    mask = np.flatnonzero(pseudo >= 0)
    if len(mask) == 0:
        raise ValueError("all points carry the ignore pseudo-label")
    cn = centroids / np.maximum(
        np.linalg.norm(centroids, axis=1, keepdims=True), 1e-12)
    f = features[mask]
    raw = np.linalg.norm(f, axis=1, keepdims=True)
    clamped = raw[:, 0] < 1e-12
    norms = np.where(clamped[:, None], 1e-12, raw)
    u = f / norms
    logits = u @ cn.T
    logits /= tau
    labels = pseudo[mask]
    rows = np.arange(len(mask))
    picked = logits[rows, labels].copy()
    if tau < 0.002:
        # cosine logits are bounded by 1/tau; only shift when exp could
        # overflow
        shift = logits.max(axis=1)
        logits -= shift[:, None]
        picked -= shift
    p = np.exp(logits, out=logits)
    z = p.sum(axis=1)
    loss = float(np.mean(np.log(z) - picked))
    p /= z[:, None]
    scale = 1.0 / (tau * len(mask))
    du = p @ cn
    du -= cn[labels]
    du *= scale
    # through u = f / |f|: df = (du - (du . u) u) / |f|; rows inside the
    # norm clamp are the linear map f / eps, whose exact derivative has no
    # projection term
    proj = np.einsum("ij,ij->i", du, u)[:, None]
    df = (du - proj * u) / norms
    df[clamped] = du[clamped] / 1e-12
    out = np.zeros_like(features)
    out[mask] = df
    return loss, out


def init_optimizer(params: ExtractorParams, lr0: float = 0.1,
                   momentum: float = 0.9, power: float = 0.9,
                   t_max: int = 1000) -> OptimizerState:
    velocity = []
    for w, b in zip(params.weights, params.biases):
        velocity.append(np.zeros_like(w))
        velocity.append(np.zeros_like(b))
    return OptimizerState(velocity=velocity, iteration=0, lr0=lr0,
                          momentum=momentum, power=power, t_max=t_max)


def sgd_step(params: ExtractorParams, grads: list,
             state: OptimizerState) -> None:
    """One momentum-SGD update under the poly LR schedule, in place."""
    frac = min(state.iteration / state.t_max, 1.0)
    lr = state.lr0 * (1.0 - frac) ** state.power
    tensors = []
    for w, b in zip(params.weights, params.biases):
        tensors.extend((w, b))
    for t, v, g in zip(tensors, state.velocity, grads):
        v *= state.momentum
        v += g
        t -= lr * v
    state.iteration += 1
