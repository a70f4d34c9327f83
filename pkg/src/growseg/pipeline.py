"""Training orchestration: progressive superpoint growing with
semantic-primitive pseudo-labels, plus the test-time classification and
evaluation paths.

The loop alternates rounds of `epochs_per_round` training epochs with one
growth event at each round boundary. Pseudo-labels come from dataset-wide
K-means over superpoint descriptors and are refreshed at the start of every
round (optionally every epoch). Growing always re-clusters the frozen
initial superpoints, never the previous level, so every superpoint at any
level is a union of initial superpoints.
"""

from __future__ import annotations

import dataclasses
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import io as gio
from .clustering import MetricsResult, confusion_matrix, kmeans, metrics_from_confusion
from .descriptors import PFH_BINS, mean_feature, superpoint_features
from .extractor import (
    Aggregator,
    ExtractorParams,
    OptimizerState,
    aggregation_operator,
    backward,
    ce_loss_and_feature_grad,
    forward,
    init_optimizer,
    init_params,
    prepare_inputs,
    sgd_step,
)
from .geometry import PointCloud, estimate_normals, voxel_downsample
from .superpoints import Partition, initial_superpoints


def _int_tuple(text: str) -> tuple:
    return tuple(int(tok.strip()) for tok in text.split(","))


_int_tuple.__name__ = "int tuple"


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for one training run.

    `epochs = 0` derives the default budget: enough rounds to step the
    superpoint target from m1 down to mt plus one final round at mt.
    """

    m1: int = 80                  # first growth target
    mt: int = 10                  # final growth target
    epochs_per_round: int = 10
    epochs: int = 0               # 0 -> derived, see total_epochs
    s: int = 300                  # semantic primitives (clamped to available)
    c: int = 5                    # test-time class count
    lam: float = 1.0              # histogram weight in superpoint descriptors
    tau: float = 0.1              # softmax temperature
    feature_dim: int = 32
    hidden: tuple = (32, 32)
    lr: float = 0.1
    momentum: float = 0.9
    poly_power: float = 0.9
    batch_clouds: int = 4
    voxel: float = 0.05
    radius_scale: float = 3.0     # aggregation radius = radius_scale * voxel
    max_pairs: int = 1024
    grow_decrement: int = 1       # target decrease per round boundary
    seed: int = 0
    mode: str = "indoor"
    refresh_every_epoch: bool = False
    no_superpoints: bool = False  # ablation: every point its own superpoint

    _FIELD_TYPES = {
        "m1": int, "mt": int, "epochs_per_round": int, "epochs": int,
        "s": int, "c": int, "lam": float, "tau": float, "feature_dim": int,
        "hidden": _int_tuple, "lr": float, "momentum": float,
        "poly_power": float, "batch_clouds": int, "voxel": float,
        "radius_scale": float, "max_pairs": int, "grow_decrement": int,
        "seed": int, "mode": str, "refresh_every_epoch": bool,
        "no_superpoints": bool,
    }

    def __post_init__(self):
        if not (self.m1 > self.mt >= self.c >= 2):
            raise ValueError("need m1 > mt >= c >= 2")
        if self.s < self.c:
            raise ValueError("need s >= c")
        if self.epochs_per_round < 1:
            raise ValueError("epochs_per_round must be >= 1")
        if self.epochs and self.epochs < self.epochs_per_round:
            raise ValueError("epochs must be >= epochs_per_round")
        if self.grow_decrement < 1:
            raise ValueError("grow_decrement must be >= 1")
        if self.tau <= 0 or self.lr <= 0 or self.voxel <= 0:
            raise ValueError("tau, lr and voxel must be positive")
        if self.radius_scale <= 0:
            raise ValueError("radius_scale must be positive")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.batch_clouds < 1:
            raise ValueError("batch_clouds must be >= 1")
        if self.max_pairs < 1:
            raise ValueError("max_pairs must be >= 1")
        if self.feature_dim < 1 or not self.hidden or min(self.hidden) < 1:
            raise ValueError("feature_dim and hidden dims must be >= 1")
        if self.mode not in ("indoor", "outdoor"):
            raise ValueError("mode must be 'indoor' or 'outdoor'")

    @property
    def total_epochs(self) -> int:
        if self.epochs:
            return self.epochs
        rounds = -(-(self.m1 - self.mt) // self.grow_decrement) + 2
        return self.epochs_per_round * rounds

    @property
    def radius(self) -> float:
        return self.radius_scale * self.voxel

    @classmethod
    def from_file(cls, path: str) -> "TrainConfig":
        values = gio.coerce_kv(gio.parse_kv(path), cls._FIELD_TYPES)
        return cls(**values)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["hidden"] = list(self.hidden)
        return out


@dataclass(frozen=True)
class PrimitiveModel:
    """L2-normalized primitive centroids, histogram block dropped."""

    centroids: np.ndarray  # (s, feature_dim)
    s: int


@dataclass
class PreparedScene:
    """One voxelized cloud with everything the trainer touches per step."""

    cloud: PointCloud
    initial: Partition
    normals: np.ndarray
    x: np.ndarray          # extractor input rows
    agg: Aggregator
    name: str


@dataclass
class TrainState:
    level: int                    # growth events applied so far
    current: list                 # per-cloud Partition at the present level
    initial: list                 # per-cloud frozen epoch-0 Partition
    primitives: PrimitiveModel | None
    params: ExtractorParams
    optimizer: OptimizerState
    epoch: int


def _singleton_partition(cloud: PointCloud) -> Partition:
    """Each non-ignored point alone; used by the no-superpoint ablation."""
    n = len(cloud)
    keep = np.ones(n, dtype=bool)
    if cloud.gt_labels is not None:
        keep = cloud.gt_labels >= 0
    assign = np.full(n, -1, dtype=np.int64)
    assign[keep] = np.arange(int(keep.sum()))
    return Partition(assignment=assign, count=int(keep.sum()))


def prepare_scene(cloud: PointCloud, partition: Partition | None,
                  config: TrainConfig) -> PreparedScene:
    """Precompute the per-scene tensors the training loop reuses."""
    if config.no_superpoints:
        partition = _singleton_partition(cloud)
    elif partition is None:
        raise ValueError(
            f"scene '{cloud.id}': initial superpoints missing; run the "
            "superpoint constructor first")
    if len(partition.assignment) != len(cloud):
        raise ValueError(f"scene '{cloud.id}': partition length mismatch")
    normals = estimate_normals(cloud, k=16).normals
    x = prepare_inputs(cloud, config.voxel)
    agg = aggregation_operator(cloud, config.radius)
    return PreparedScene(cloud=cloud, initial=partition, normals=normals,
                         x=x, agg=agg, name=cloud.id or "scene")


def preprocess_cloud(cloud: PointCloud, config: TrainConfig) -> PreparedScene:
    """Voxelize a raw cloud and build its initial superpoints."""
    vox, _ = voxel_downsample(cloud, config.voxel)
    part = None
    if not config.no_superpoints:
        part = initial_superpoints(vox, mode=config.mode,
                                   voxel_res=config.voxel,
                                   rng_seed=config.seed)
    return prepare_scene(vox, part, config)


def _unit_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    return np.divide(m, norms, out=np.zeros_like(m), where=norms > 0)


def grow_superpoints(features: np.ndarray, initial: Partition, mt: int,
                     seed: int = 0, normalize: bool = True) -> Partition:
    """Re-cluster the frozen initial superpoints into at most mt groups.

    Mean features over the initial superpoints are L2-normalized and
    K-means-clustered; every cluster of initial superpoints becomes one new
    superpoint. mt clamps to the number of initial superpoints, so growth
    never splits an initial superpoint.
    """
    if mt < 1:
        raise ValueError("mt must be >= 1")
    means = mean_feature(features, initial)
    if normalize:
        means = _unit_rows(means)
    k = min(mt, initial.count)
    result = kmeans(means, k, seed=seed)
    assign = np.where(initial.assignment >= 0,
                      result.assignments[np.maximum(initial.assignment, 0)],
                      -1).astype(np.int64)
    return Partition(assignment=assign, count=k)


def cluster_primitives(features: list, partitions: list, s: int,
                       seed: int = 0,
                       max_fit_rows: int | None = None
                       ) -> tuple[PrimitiveModel, list]:
    """Dataset-wide K-means over superpoint descriptors.

    features holds one augmented descriptor matrix per cloud (unit neural
    block then weighted histogram block); rows follow superpoint ids. The
    centroids keep only the re-normalized neural block. Returns the model
    plus one per-point pseudo-label array per cloud, -1 for ignored points.

    max_fit_rows caps the rows the K-means fit sees (seeded subsample);
    all rows are still assigned to the fitted centroids. Used only when
    descriptor counts are per-point scale.
    """
    if len(features) != len(partitions):
        raise ValueError("features and partitions must pair up")
    stacked = np.concatenate(features, axis=0)
    total = stacked.shape[0]
    if total < 1:
        raise ValueError("no superpoints to cluster")
    k = min(s, total)
    if max_fit_rows is not None and total > max_fit_rows:
        rng = np.random.default_rng(np.random.SeedSequence((seed, total)))
        fit = stacked[np.sort(rng.choice(total, size=max_fit_rows,
                                         replace=False))]
        centroids = kmeans(fit, min(k, max_fit_rows), seed=seed).centroids
        assignments = _nearest_rows(stacked, centroids)
    else:
        result = kmeans(stacked, k, seed=seed)
        centroids, assignments = result.centroids, result.assignments
    neural_dim = stacked.shape[1] - PFH_BINS
    model = PrimitiveModel(centroids=_unit_rows(centroids[:, :neural_dim]),
                           s=centroids.shape[0])
    labels = []
    offset = 0
    for feats, part in zip(features, partitions):
        sp_label = assignments[offset:offset + feats.shape[0]]
        offset += feats.shape[0]
        point_label = np.full(part.assignment.shape[0], -1, dtype=np.int64)
        covered = part.assignment >= 0
        point_label[covered] = sp_label[part.assignment[covered]]
        labels.append(point_label)
    return model, labels


def _nearest_rows(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Argmin squared distance per row, ties to the lower centroid id."""
    x2 = np.einsum("ij,ij->i", x, x)[:, None]
    c2 = np.einsum("ij,ij->i", centroids, centroids)[None, :]
    d2 = x2 + c2 - 2.0 * (x @ centroids.T)
    return np.argmin(d2, axis=1).astype(np.int64)


def _round_targets(config: TrainConfig) -> list:
    """Growth target after each round boundary until mt is reached."""
    targets = []
    value = config.m1
    while True:
        value = max(value, config.mt)
        targets.append(value)
        if value == config.mt:
            return targets
        value -= config.grow_decrement


class StageError(RuntimeError):
    """A training stage failed; carries the epoch and offending cloud."""


def _refresh(scenes, current, params, config, run_map):
    """Features -> superpoint descriptors -> primitives -> pseudo-labels."""

    def describe(i):
        scene = scenes[i]
        try:
            if current[i].count < 1:
                raise ValueError("no superpoints (all points ignored?)")
            feats, _ = forward(params, scene.x, scene.agg)
            sp = superpoint_features(feats, scene.normals, current[i],
                                     lam=config.lam,
                                     max_pairs=config.max_pairs,
                                     rng_seed=config.seed)
            return sp.augmented
        except Exception as exc:
            raise StageError(f"cloud '{scene.name}': {exc}") from exc

    described = run_map(describe, range(len(scenes)))
    cap = 20000 if config.no_superpoints else None
    return cluster_primitives(described, current, config.s,
                              seed=config.seed, max_fit_rows=cap)


def train(scenes: list, config: TrainConfig, out_dir: str | None = None,
          workers: int = 1, round_hook=None
          ) -> tuple[ExtractorParams, PrimitiveModel, list]:
    """Run the full progressive-growing loop over prepared scenes.

    Writes a line-per-epoch log and per-round checkpoints when out_dir is
    given. round_hook(round_no, target, partitions) fires at every round
    boundary after growth. Returns the trained extractor, the final
    primitive model (re-estimated on the final features), and the log
    records.
    """
    if not scenes:
        raise ValueError("no scenes to train on")
    n = len(scenes)
    e_total = config.total_epochs
    e_hat = config.epochs_per_round
    params = init_params(config.seed, scenes[0].x.shape[1], config.hidden,
                         config.feature_dim)
    steps_total = e_total * math.ceil(n / config.batch_clouds)
    opt = init_optimizer(params, lr0=config.lr, momentum=config.momentum,
                         power=config.poly_power, t_max=steps_total)
    state = TrainState(level=0, current=[s.initial for s in scenes],
                       initial=[s.initial for s in scenes], primitives=None,
                       params=params, optimizer=opt, epoch=0)
    targets = [] if config.no_superpoints else _round_targets(config)
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None

    def run_map(fn, items):
        # executor.map yields in submission order, keeping reductions
        # deterministic under any worker count
        if pool is None:
            return [fn(item) for item in items]
        return list(pool.map(fn, items))

    log_path = os.path.join(out_dir, "train.log") if out_dir else None
    if log_path and os.path.exists(log_path):
        os.remove(log_path)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    pseudo = None
    log = []
    try:
        for epoch in range(e_total):
            state.epoch = epoch
            round_no = epoch // e_hat + 1
            if state.primitives is None or epoch % e_hat == 0 \
                    or config.refresh_every_epoch:
                try:
                    state.primitives, pseudo = _refresh(
                        scenes, state.current, params, config, run_map)
                except Exception as exc:
                    raise StageError(
                        f"epoch {epoch}: primitive refresh: {exc}") from exc

            frac = min(opt.iteration / opt.t_max, 1.0)
            lr_now = opt.lr0 * (1.0 - frac) ** opt.power
            shuffle = np.random.default_rng(
                np.random.SeedSequence((config.seed, 1000 + epoch)))
            order = shuffle.permutation(n)
            cloud_loss = np.zeros(n)

            def step_cloud(i):
                scene = scenes[i]
                try:
                    feats, cache = forward(params, scene.x, scene.agg)
                    loss, dfeat = ce_loss_and_feature_grad(
                        feats, pseudo[i], state.primitives.centroids,
                        tau=config.tau)
                    return loss, backward(params, cache, dfeat)
                except Exception as exc:
                    raise StageError(
                        f"epoch {epoch}: cloud '{scene.name}': {exc}"
                    ) from exc

            for start in range(0, n, config.batch_clouds):
                batch = order[start:start + config.batch_clouds]
                results = run_map(step_cloud, batch)
                scale = 1.0 / len(batch)
                grads = [g * scale for g in results[0][1]]
                cloud_loss[batch[0]] = results[0][0]
                for i, (loss, gs) in zip(batch[1:], results[1:]):
                    cloud_loss[i] = loss
                    for acc, g in zip(grads, gs):
                        acc += g * scale
                sgd_step(params, grads, opt)

            mean_loss = float(cloud_loss.mean())
            record = {"epoch": epoch, "round": round_no, "t": state.level,
                      "mt": targets[state.level - 1] if state.level else None,
                      "loss": mean_loss, "lr": lr_now}
            log.append(record)
            if log_path:
                gio.append_log(log_path, record)

            if (epoch + 1) % e_hat == 0 or epoch + 1 == e_total:
                last = epoch + 1 >= e_total
                if not last and state.level < len(targets):
                    target = targets[state.level]
                    state.level += 1

                    def grow_cloud(i):
                        scene = scenes[i]
                        try:
                            feats, _ = forward(params, scene.x, scene.agg)
                            return grow_superpoints(feats, scene.initial,
                                                    target, seed=config.seed)
                        except Exception as exc:
                            raise StageError(
                                f"epoch {epoch}: cloud '{scene.name}': "
                                f"growth to {target} failed: {exc}") from exc

                    state.current = run_map(grow_cloud, range(n))
                if last:
                    # final refresh so the returned primitives match the
                    # final features
                    try:
                        state.primitives, pseudo = _refresh(
                            scenes, state.current, params, config, run_map)
                    except Exception as exc:
                        raise StageError(
                            f"epoch {epoch}: final primitive refresh: {exc}"
                        ) from exc
                if out_dir:
                    save_model(
                        os.path.join(out_dir, f"round_{round_no:04d}.ckpt"),
                        params, state.primitives, config,
                        extra={"epoch": epoch + 1, "round": round_no,
                               "level": state.level})
                if round_hook is not None:
                    hook_target = targets[state.level - 1] \
                        if state.level else None
                    round_hook(round_no, hook_target, list(state.current))
    finally:
        if pool is not None:
            pool.shutdown()
    return params, state.primitives, log


def save_model(path: str, params: ExtractorParams,
               primitives: PrimitiveModel | None, config: TrainConfig,
               extra: dict | None = None) -> None:
    arrays = {}
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        arrays[f"weights.{i}"] = w
        arrays[f"biases.{i}"] = b
    if primitives is not None:
        arrays["primitives"] = primitives.centroids
    meta = {"config": config.to_dict()}
    if extra:
        meta.update(extra)
    gio.write_checkpoint(path, arrays, meta)


def load_model(path: str
               ) -> tuple[ExtractorParams, PrimitiveModel | None, TrainConfig]:
    arrays, meta = gio.read_checkpoint(path)
    layers = sum(1 for name in arrays if name.startswith("weights."))
    weights = [arrays[f"weights.{i}"] for i in range(layers)]
    biases = [arrays[f"biases.{i}"] for i in range(layers)]
    params = ExtractorParams(weights=weights, biases=biases,
                             k=weights[-1].shape[1])
    primitives = None
    if "primitives" in arrays:
        primitives = PrimitiveModel(centroids=arrays["primitives"],
                                    s=arrays["primitives"].shape[0])
    raw = dict(meta["config"])
    raw["hidden"] = tuple(raw["hidden"])
    config = TrainConfig(**raw)
    return params, primitives, config


def fit_test_classifier(model: PrimitiveModel, c: int,
                        seed: int = 0) -> np.ndarray:
    """Group the primitive centroids into c classes; rows L2-normalized."""
    if c > model.s:
        raise ValueError(f"c={c} exceeds the {model.s} primitives")
    result = kmeans(model.centroids, c, seed=seed, restarts=10)
    return _unit_rows(result.centroids)


def segment(params: ExtractorParams, cloud: PointCloud,
            class_centroids: np.ndarray, voxel: float,
            radius: float) -> np.ndarray:
    """Per-point class ids by cosine similarity; no superpoints involved."""
    x = prepare_inputs(cloud, voxel)
    feats, _ = forward(params, x, aggregation_operator(cloud, radius))
    return _classify(feats, class_centroids)


def segment_prepared(params: ExtractorParams, scene: PreparedScene,
                     class_centroids: np.ndarray) -> np.ndarray:
    feats, _ = forward(params, scene.x, scene.agg)
    return _classify(feats, class_centroids)


def _classify(feats: np.ndarray, class_centroids: np.ndarray) -> np.ndarray:
    u = _unit_rows(feats)
    cn = _unit_rows(class_centroids)
    # argmax takes the lower id on ties
    return np.argmax(u @ cn.T, axis=1).astype(np.int64)


def vanilla_kmeans_baseline(cloud: PointCloud, c: int,
                            seed: int = 0) -> np.ndarray:
    """K-means on min-max-normalized xyz plus rgb, the comparison anchor."""
    pos = cloud.positions
    lo = pos.min(axis=0)
    span = pos.max(axis=0) - lo
    span = np.where(span > 0, span, 1.0)
    unit = (pos - lo) / span
    rgb = cloud.colors if cloud.colors is not None else np.zeros_like(pos)
    rows = np.concatenate([unit, rgb], axis=1)
    return kmeans(rows, c, seed=seed, restarts=10).assignments.astype(np.int64)


def evaluate(preds: list, gts: list, num_classes: int) -> MetricsResult:
    """Hungarian-matched metrics over one dataset-wide confusion matrix."""
    if len(preds) != len(gts):
        raise ValueError("prediction and ground-truth lists must pair up")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    for pred, gt in zip(preds, gts):
        counts += confusion_matrix(pred, gt, num_classes)
    return metrics_from_confusion(counts)
