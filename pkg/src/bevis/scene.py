"""Point-cloud data model, featurization and the synthetic indoor-scene generator.

Points carry 9 features: xyz position (meters), rgb color in [0, 1], and the
position normalized by the room extents into [0, 1]. Ground-truth labels are
a semantic class per point plus a permutation-invariant instance id.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

N_FEATURES = 9

CLASS_NAMES = ("floor", "wall", "ceiling", "table", "chair", "sofa", "board", "clutter")
FLOOR, WALL, CEILING, TABLE, CHAIR, SOFA, BOARD, CLUTTER = range(8)
N_CLASSES = len(CLASS_NAMES)

# base rgb per class; per-point noise is added on top
CLASS_COLORS = np.array(
    [
        [0.45, 0.45, 0.45],  # floor
        [0.85, 0.83, 0.78],  # wall
        [0.95, 0.95, 0.95],  # ceiling
        [0.55, 0.35, 0.15],  # table
        [0.15, 0.30, 0.60],  # chair
        [0.60, 0.15, 0.15],  # sofa
        [0.25, 0.55, 0.35],  # board
        [0.70, 0.60, 0.20],  # clutter
    ]
)

# object footprint/height ranges in meters: (w_lo, w_hi, d_lo, d_hi, h_lo, h_hi)
OBJECT_SIZES = {
    TABLE: (0.8, 1.4, 0.6, 1.0, 0.65, 0.78),
    CHAIR: (0.40, 0.60, 0.40, 0.60, 0.75, 0.95),
    SOFA: (1.4, 2.0, 0.8, 1.0, 0.70, 0.90),
    BOARD: (1.0, 1.6, 0.06, 0.10, 1.60, 1.90),
    CLUTTER: (0.25, 0.45, 0.25, 0.45, 0.25, 0.50),
}

DEFAULT_OBJECT_CLASSES = (TABLE, CHAIR, SOFA, BOARD, CLUTTER)


class PointCloud:
    """Immutable N x 9 point set with optional ground-truth labels."""

    def __init__(self, points, gt_semantic=None, gt_instance=None):
        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != N_FEATURES:
            raise ValueError(f"points must be Nx{N_FEATURES}, got {points.shape}")
        norm = points[:, 6:9]
        if norm.size and (norm.min() < -1e-9 or norm.max() > 1 + 1e-9):
            raise ValueError("normalized coordinates must lie in [0, 1]")
        self.points = points
        self.gt_semantic = None if gt_semantic is None else np.asarray(gt_semantic, dtype=np.int64)
        self.gt_instance = None if gt_instance is None else np.asarray(gt_instance, dtype=np.int64)
        for name, lab in (("gt_semantic", self.gt_semantic), ("gt_instance", self.gt_instance)):
            if lab is not None and lab.shape != (len(points),):
                raise ValueError(f"{name} must have one entry per point")
        if self.gt_semantic is not None and self.gt_instance is not None:
            for inst in np.unique(self.gt_instance):
                classes = np.unique(self.gt_semantic[self.gt_instance == inst])
                if len(classes) > 1:
                    raise ValueError(f"instance {inst} spans semantic classes {classes}")
        for arr in (self.points, self.gt_semantic, self.gt_instance):
            if arr is not None:
                arr.setflags(write=False)

    def __len__(self):
        return len(self.points)

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, 0:3]

    @property
    def rgb(self) -> np.ndarray:
        return self.points[:, 3:6]

    def has_labels(self) -> bool:
        return self.gt_semantic is not None and self.gt_instance is not None

    def select(self, mask_or_idx) -> "PointCloud":
        """New cloud restricted to the given points; labels follow."""
        return PointCloud(
            self.points[mask_or_idx],
            None if self.gt_semantic is None else self.gt_semantic[mask_or_idx],
            None if self.gt_instance is None else self.gt_instance[mask_or_idx],
        )


@dataclass
class Labeling:
    """Per-point semantic class ids and permutation-invariant instance ids."""

    semantic: np.ndarray
    instance: np.ndarray

    def __post_init__(self):
        self.semantic = np.asarray(self.semantic, dtype=np.int64)
        self.instance = np.asarray(self.instance, dtype=np.int64)
        if self.semantic.shape != self.instance.shape:
            raise ValueError("semantic and instance labelings must align")

    def canonical(self) -> "Labeling":
        """Renumber instance ids to 0..I-1 by first occurrence."""
        _, inv = np.unique(self.instance, return_inverse=True)
        order = {}
        out = np.empty_like(self.instance)
        for i, v in enumerate(self.instance):
            if v not in order:
                order[v] = len(order)
            out[i] = order[v]
        del inv
        return Labeling(self.semantic.copy(), out)


@dataclass
class SceneSpec:
    """Parameters of one synthetic room."""

    width: float = 5.0
    depth: float = 5.0
    height: float = 2.8
    n_objects: int = 4
    object_classes: tuple = DEFAULT_OBJECT_CLASSES
    seed: int = 0
    ceiling: bool = True
    density: float = 120.0  # points per square meter
    position_noise: float = 0.005
    color_noise: float = 0.02

    def __post_init__(self):
        if min(self.width, self.depth, self.height) <= 0:
            raise ValueError("room dimensions must be positive")
        if self.n_objects < 0:
            raise ValueError("object count must be non-negative")


def featurize(raw_points: np.ndarray, room_bounds, gt_semantic=None, gt_instance=None) -> PointCloud:
    """Append room-normalized coordinates to xyzrgb points.

    ``room_bounds`` is ``(lo, hi)`` with 3-vectors enclosing all points; the
    normalized channels are ``(p - lo) / (hi - lo)`` per axis. Accepts Nx6
    input or Nx9 (normalized channels are recomputed, making this idempotent
    for fixed bounds).
    """
    raw = np.asarray(raw_points, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[1] not in (6, N_FEATURES):
        raise ValueError(f"expected Nx6 or Nx9 points, got {raw.shape}")
    lo = np.asarray(room_bounds[0], dtype=np.float64)
    hi = np.asarray(room_bounds[1], dtype=np.float64)
    extent = hi - lo
    if np.any(extent <= 0):
        raise ValueError(f"room extent must be positive on every axis, got {extent}")
    xyz = raw[:, 0:3]
    if xyz.size and (np.any(xyz < lo - 1e-9) or np.any(xyz > hi + 1e-9)):
        raise ValueError("room bounds must enclose all points")
    norm = np.clip((xyz - lo) / extent, 0.0, 1.0)
    return PointCloud(np.hstack([raw[:, 0:6], norm]), gt_semantic, gt_instance)


def _sample_rectangle(rng, origin, u_vec, v_vec, density) -> np.ndarray:
    """Uniform points on a rectangle spanned by two edge vectors."""
    area = np.linalg.norm(np.cross(u_vec, v_vec))
    n = max(1, int(round(area * density)))
    u = rng.random(n)[:, None]
    v = rng.random(n)[:, None]
    return origin + u * u_vec + v * v_vec


def _sample_box(rng, lo, hi, density, include_bottom=False) -> np.ndarray:
    """Uniform points on the faces of an axis-aligned box (bottom optional)."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    w, d, h = hi - lo
    faces = [
        (lo + [0, 0, h], [w, 0, 0], [0, d, 0]),  # top
        (lo, [w, 0, 0], [0, 0, h]),  # y = lo side
        (lo + [0, d, 0], [w, 0, 0], [0, 0, h]),  # y = hi side
        (lo, [0, d, 0], [0, 0, h]),  # x = lo side
        (lo + [w, 0, 0], [0, d, 0], [0, 0, h]),  # x = hi side
    ]
    if include_bottom:
        faces.append((lo, [w, 0, 0], [0, d, 0]))
    parts = [
        _sample_rectangle(rng, np.asarray(o, float), np.asarray(u, float), np.asarray(v, float), density)
        for o, u, v in faces
    ]
    return np.vstack(parts)


def _place_objects(rng, spec: SceneSpec):
    """Pick class, size and a non-overlapping floor position per object."""
    placed = []  # (class, lo, hi)
    for _ in range(spec.n_objects):
        cls = int(rng.choice(spec.object_classes))
        w_lo, w_hi, d_lo, d_hi, h_lo, h_hi = OBJECT_SIZES[cls]
        for attempt in range(4000):
            shrink = max(1.0 - attempt * 0.002, 0.18)  # crowded rooms get smaller furniture
            w = rng.uniform(w_lo, w_hi) * shrink
            d = rng.uniform(d_lo, d_hi) * shrink
            h = rng.uniform(h_lo, h_hi)
            if rng.random() < 0.5:
                w, d = d, w  # random 90-degree footprint orientation
            margin = max(0.25 - attempt * 0.0004, 0.02)
            # shrink furniture that would not fit the room footprint
            w = min(w, spec.width - 2 * margin - 0.05)
            d = min(d, spec.depth - 2 * margin - 0.05)
            if w <= 0.05 or d <= 0.05:
                continue
            if cls == BOARD:
                # boards stand close to a wall but keep their own raster cells
                side = int(rng.integers(4))
                gap = 0.18
                along = max(0.3 - attempt * 0.0005, 0.03)
                if side in (0, 1):  # along y walls
                    if w < d:
                        w, d = d, w
                    x0 = rng.uniform(along, max(along + 0.01, spec.width - along - w))
                    y0 = gap if side == 0 else spec.depth - gap - d
                else:
                    if d < w:
                        w, d = d, w
                    y0 = rng.uniform(along, max(along + 0.01, spec.depth - along - d))
                    x0 = gap if side == 2 else spec.width - gap - w
            else:
                if spec.width - 2 * margin - w <= 0 or spec.depth - 2 * margin - d <= 0:
                    continue
                x0 = rng.uniform(margin, spec.width - margin - w)
                y0 = rng.uniform(margin, spec.depth - margin - d)
            lo = np.array([x0, y0, 0.0])
            hi = np.array([x0 + w, y0 + d, h])
            clearance = max(0.30 - attempt * 0.0004, 0.02)
            ok = all(
                not (
                    lo[0] - clearance < ohi[0]
                    and hi[0] + clearance > olo[0]
                    and lo[1] - clearance < ohi[1]
                    and hi[1] + clearance > olo[1]
                )
                for _, olo, ohi in placed
            )
            if ok:
                placed.append((cls, lo, hi))
                break
        else:
            # pathological crowding: drop the clearance requirement entirely
            # rather than failing; instances stay distinct via their labels
            w = min(rng.uniform(w_lo, w_hi) * 0.18, spec.width - 0.1)
            d = min(rng.uniform(d_lo, d_hi) * 0.18, spec.depth - 0.1)
            h = rng.uniform(h_lo, h_hi)
            x0 = rng.uniform(0.05, spec.width - 0.05 - w)
            y0 = rng.uniform(0.05, spec.depth - 0.05 - d)
            placed.append((cls, np.array([x0, y0, 0.0]), np.array([x0 + w, y0 + d, h])))
    return placed


def generate_scene(spec: SceneSpec) -> PointCloud:
    """Sample a labeled synthetic room: floor, four walls, optional ceiling
    and ``n_objects`` furniture boxes, uniform point density per surface area.

    Deterministic in ``spec.seed``. Instance ids are contiguous from 0 in
    construction order (floor, walls, ceiling, objects).
    """
    rng = np.random.default_rng(spec.seed)
    w, d, h = spec.width, spec.depth, spec.height
    zero3 = np.zeros(3)

    surfaces = [
        (FLOOR, _sample_rectangle(rng, zero3, np.array([w, 0, 0.0]), np.array([0, d, 0.0]), spec.density)),
        (WALL, _sample_rectangle(rng, zero3, np.array([w, 0, 0.0]), np.array([0, 0, h]), spec.density)),
        (WALL, _sample_rectangle(rng, np.array([0.0, d, 0]), np.array([w, 0, 0.0]), np.array([0, 0, h]), spec.density)),
        (WALL, _sample_rectangle(rng, zero3, np.array([0, d, 0.0]), np.array([0.0, 0, h]), spec.density)),
        (WALL, _sample_rectangle(rng, np.array([w, 0.0, 0]), np.array([0, d, 0.0]), np.array([0, 0, h]), spec.density)),
    ]
    if spec.ceiling:
        surfaces.append(
            (CEILING, _sample_rectangle(rng, np.array([0, 0.0, h]), np.array([w, 0, 0.0]), np.array([0, d, 0.0]), spec.density))
        )
    for cls, lo, hi in _place_objects(rng, spec):
        surfaces.append((cls, _sample_box(rng, lo, hi, spec.density)))

    xyz_parts, sem_parts, inst_parts = [], [], []
    for instance_id, (cls, pts) in enumerate(surfaces):
        xyz_parts.append(pts)
        sem_parts.append(np.full(len(pts), cls, dtype=np.int64))
        inst_parts.append(np.full(len(pts), instance_id, dtype=np.int64))
    xyz = np.vstack(xyz_parts)
    sem = np.concatenate(sem_parts)
    inst = np.concatenate(inst_parts)

    xyz = xyz + rng.normal(0.0, spec.position_noise, size=xyz.shape)
    xyz = np.clip(xyz, 0.0, [w, d, h])  # keep bounds enclosing after noise
    rgb = CLASS_COLORS[sem] + rng.normal(0.0, spec.color_noise, size=(len(sem), 3))
    rgb = np.clip(rgb, 0.0, 1.0)

    return featurize(np.hstack([xyz, rgb]), (np.zeros(3), np.array([w, d, h])), sem, inst)
