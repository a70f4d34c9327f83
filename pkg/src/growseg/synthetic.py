"""Synthetic room generator for the end-to-end benchmark.

Each scene is an axis-aligned room: floor, ceiling, four walls, 1-3 boxes
standing on the floor, and up to two full-height cylinder columns (crowded
rooms may fit none).  Room proportions and obstacle sizes are chosen so no
single class dwarfs the rest of the point budget.  Every class
has its own base color (floor and ceiling deliberately distinct, since
geometry alone cannot tell two horizontal planes apart); classes still
overlap in geometry (walls and box sides are both vertical planes), so
neither cue is sufficient on its own.

Surfaces stop one scan-shadow gap short of surfaces from other classes
(floor inset from walls, boxes floating a gap above the floor), mimicking
the occlusion shadows real scanners leave at contact edges.  The gap spans
three voxel cells at the default grid, which keeps voxels single-class and
initial superpoints pure.

Everything is driven by one seeded RNG per scene, so a spec generates
bit-identical scenes on every run.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .geometry import PointCloud
from . import io as gio

CLASSES = ("floor", "ceiling", "wall", "box", "cylinder")
FLOOR, CEILING, WALL, BOX, CYLINDER = range(5)

BASE_COLORS = np.array([
    [0.45, 0.42, 0.38],   # floor: dark warm gray
    [0.82, 0.80, 0.75],   # ceiling: off white
    [0.62, 0.58, 0.48],   # wall: beige
    [0.36, 0.26, 0.18],   # box: dark wood
    [0.52, 0.22, 0.16],   # cylinder: brick red
])

GAP = 0.15          # scan-shadow width at inter-class contact edges
WALL_MARGIN = 0.3   # obstacle clearance from walls
SEPARATION = 0.2    # obstacle-to-obstacle clearance
TEST_INDEX_BASE = 10000


@dataclass(frozen=True)
class SynthSpec:
    """Generator parameters; scenes + test_scenes rooms are produced."""

    seed: int = 0
    scenes: int = 20
    test_scenes: int = 5
    points: int = 20000
    color_sigma: float = 0.02
    pos_sigma: float = 0.035
    extents: tuple = ((2.8, 3.4), (2.4, 3.0), (1.6, 1.9))

    def __post_init__(self):
        if self.scenes < 1:
            raise ValueError("scenes must be >= 1")
        if self.test_scenes < 0:
            raise ValueError("test_scenes must be >= 0")
        if self.points < 100:
            raise ValueError("points must be >= 100")
        if self.color_sigma < 0 or self.pos_sigma < 0:
            raise ValueError("noise sigmas must be >= 0")
        for lo, hi in self.extents:
            if not 0 < lo <= hi:
                raise ValueError("extents must be positive ranges")

    _FIELD_TYPES = {"seed": int, "scenes": int, "test_scenes": int,
                    "points": int, "color_sigma": float, "pos_sigma": float,
                    "extents": None}  # filled in below

    @classmethod
    def from_file(cls, path: str) -> "SynthSpec":
        raw = gio.parse_kv(path)
        return cls(**gio.coerce_kv(raw, cls._FIELD_TYPES))


def _extent_ranges(text: str) -> tuple:
    """Six comma-separated meters: x_lo,x_hi,y_lo,y_hi,z_lo,z_hi."""
    parts = [float(tok.strip()) for tok in text.split(",")]
    if len(parts) != 6:
        raise ValueError(text)
    return tuple((parts[i], parts[i + 1]) for i in range(0, 6, 2))


_extent_ranges.__name__ = "extent ranges"
SynthSpec._FIELD_TYPES["extents"] = _extent_ranges


# surfaces are ("rect", label, axis, value, (a0, a1), (b0, b1)) with the two
# free axes in x-before-y-before-z order, or ("cyl", label, cx, cy, r, z0, z1)

def _rect_area(surf) -> float:
    _, _, _, _, (a0, a1), (b0, b1) = surf
    return (a1 - a0) * (b1 - b0)


def _surface_area(surf) -> float:
    if surf[0] == "rect":
        return _rect_area(surf)
    _, _, _, _, r, z0, z1 = surf
    return 2.0 * np.pi * r * (z1 - z0)


def _sample_surface(surf, m: int, rng: np.random.Generator) -> np.ndarray:
    pts = np.empty((m, 3))
    if surf[0] == "rect":
        _, _, axis, value, (a0, a1), (b0, b1) = surf
        free = [a for a in range(3) if a != axis]
        pts[:, free[0]] = rng.uniform(a0, a1, m)
        pts[:, free[1]] = rng.uniform(b0, b1, m)
        pts[:, axis] = value
    else:
        _, _, cx, cy, r, z0, z1 = surf
        theta = rng.uniform(0.0, 2.0 * np.pi, m)
        pts[:, 0] = cx + r * np.cos(theta)
        pts[:, 1] = cy + r * np.sin(theta)
        pts[:, 2] = rng.uniform(z0, z1, m)
    return pts


def _apportion(points: int, areas: np.ndarray) -> np.ndarray:
    """Largest-remainder split of a point budget across surfaces."""
    exact = points * areas / areas.sum()
    counts = np.floor(exact).astype(np.int64)
    frac = exact - counts
    deficit = points - counts.sum()
    order = np.lexsort((np.arange(len(areas)), -frac))
    counts[order[:deficit]] += 1
    return counts


def _place_footprints(rng: np.random.Generator, room_w: float, room_d: float,
                      sizes: list) -> list:
    """Non-overlapping xy footprints, rejection-sampled.

    All obstacles share one exclusion list, so every pair keeps at least
    2 x SEPARATION edge distance.  Footprints shrink after repeated misses;
    an unplaceable entry yields None at its index.
    """
    placed = []
    rects = []
    for w, d in sizes:
        cur_w, cur_d = w, d
        spot = None
        for attempt in range(120):
            if attempt and attempt % 40 == 0:
                cur_w *= 0.85
                cur_d *= 0.85
            lo_x = WALL_MARGIN + cur_w / 2.0
            hi_x = room_w - WALL_MARGIN - cur_w / 2.0
            lo_y = WALL_MARGIN + cur_d / 2.0
            hi_y = room_d - WALL_MARGIN - cur_d / 2.0
            if lo_x >= hi_x or lo_y >= hi_y:
                continue
            cx = rng.uniform(lo_x, hi_x)
            cy = rng.uniform(lo_y, hi_y)
            cand = (cx - cur_w / 2.0 - SEPARATION, cx + cur_w / 2.0 + SEPARATION,
                    cy - cur_d / 2.0 - SEPARATION, cy + cur_d / 2.0 + SEPARATION)
            if all(cand[1] <= r[0] or cand[0] >= r[1] or
                   cand[3] <= r[2] or cand[2] >= r[3] for r in rects):
                spot = (cx, cy, cur_w, cur_d)
                break
        placed.append(spot)
        if spot is not None:
            rects.append((spot[0] - spot[2] / 2.0 - SEPARATION,
                          spot[0] + spot[2] / 2.0 + SEPARATION,
                          spot[1] - spot[3] / 2.0 - SEPARATION,
                          spot[1] + spot[3] / 2.0 + SEPARATION))
    return placed


def _room_surfaces(rng: np.random.Generator, extents) -> tuple[list, tuple]:
    room_w = rng.uniform(*extents[0])
    room_d = rng.uniform(*extents[1])
    room_h = rng.uniform(*extents[2])
    surfaces = [
        ("rect", FLOOR, 2, 0.0, (GAP, room_w - GAP), (GAP, room_d - GAP)),
        ("rect", CEILING, 2, room_h, (GAP, room_w - GAP), (GAP, room_d - GAP)),
        ("rect", WALL, 1, 0.0, (0.0, room_w), (GAP, room_h - GAP)),
        ("rect", WALL, 1, room_d, (0.0, room_w), (GAP, room_h - GAP)),
        ("rect", WALL, 0, 0.0, (0.0, room_d), (GAP, room_h - GAP)),
        ("rect", WALL, 0, room_w, (0.0, room_d), (GAP, room_h - GAP)),
    ]

    n_cyl = int(rng.integers(1, 3))
    cyl_radii = [float(rng.uniform(0.16, 0.24)) for _ in range(n_cyl)]
    n_box = int(rng.integers(1, 4))
    box_dims = [(float(rng.uniform(0.65, 1.0)), float(rng.uniform(0.65, 1.0)),
                 float(rng.uniform(0.6, 1.0))) for _ in range(n_box)]
    # Single placement pass so cylinders and boxes avoid each other too;
    # boxes claim space first since the class must appear in every room.
    sizes = [(w, d) for w, d, _ in box_dims]
    sizes += [(2 * r, 2 * r) for r in cyl_radii]
    spots = _place_footprints(rng, room_w, room_d, sizes)
    box_spots, cyl_spots = spots[:n_box], spots[n_box:]

    for spot in cyl_spots:
        if spot is None:
            continue
        cx, cy, w, _ = spot
        surfaces.append(("cyl", CYLINDER, cx, cy, w / 2.0, GAP, room_h - GAP))
    for spot, (_, _, h) in zip(box_spots, box_dims):
        if spot is None:
            continue
        cx, cy, w, d = spot
        x0, x1 = cx - w / 2.0, cx + w / 2.0
        y0, y1 = cy - d / 2.0, cy + d / 2.0
        surfaces += [
            ("rect", BOX, 2, h, (x0, x1), (y0, y1)),        # top
            ("rect", BOX, 1, y0, (x0, x1), (GAP, h)),
            ("rect", BOX, 1, y1, (x0, x1), (GAP, h)),
            ("rect", BOX, 0, x0, (y0, y1), (GAP, h)),
            ("rect", BOX, 0, x1, (y0, y1), (GAP, h)),
        ]
    return surfaces, (room_w, room_d, room_h)


def gen_scene(spec: SynthSpec, index: int, split: str = "train") -> PointCloud:
    """One deterministic room; test scenes draw from a disjoint seed range."""
    stream = index if split == "train" else TEST_INDEX_BASE + index
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed, stream)))
    surfaces, _ = _room_surfaces(rng, spec.extents)
    areas = np.array([_surface_area(s) for s in surfaces])
    counts = _apportion(spec.points, areas)
    chunks, labels = [], []
    for surf, m in zip(surfaces, counts):
        if m == 0:
            continue
        chunks.append(_sample_surface(surf, int(m), rng))
        labels.append(np.full(int(m), surf[1], dtype=np.int64))
    positions = np.concatenate(chunks)
    gt = np.concatenate(labels)
    positions += rng.normal(0.0, spec.pos_sigma, positions.shape)
    colors = BASE_COLORS[gt] + rng.normal(0.0, spec.color_sigma,
                                          (len(gt), 3))
    np.clip(colors, 0.0, 1.0, out=colors)
    return PointCloud(positions=positions, colors=colors, gt_labels=gt,
                      id=f"{split}_{index:03d}")


def gen_synthetic(spec: SynthSpec, out_dir: str) -> list:
    """Write every scene as binary PLY + label sidecar, plus a manifest."""
    os.makedirs(out_dir, exist_ok=True)
    records = []
    jobs = [("train", i) for i in range(spec.scenes)]
    jobs += [("test", i) for i in range(spec.test_scenes)]
    for split, i in jobs:
        cloud = gen_scene(spec, i, split)
        path = os.path.join(out_dir, f"{cloud.id}.ply")
        gio.write_ply(path, cloud, binary=True, labels=None)
        gio.write_int_lines(os.path.splitext(path)[0] + gio.LABELS_SUFFIX,
                            cloud.gt_labels)
        records.append(gio.scene_record(path, split))
    gio.write_manifest(out_dir, records)
    return records
