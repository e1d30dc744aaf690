"""Bird's-eye-view rasterization with occlusion resolution and augmentation.

Each raster cell keeps the highest point that falls into it: rgb plus height
above ground as channels (C = 4), the winning point's index for unprojection,
and ground-truth rasters when labels are present. Ties on height go to the
lowest point index so rasters are reproducible across platforms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .scene import PointCloud

N_CHANNELS = 4


@dataclass
class BirdsEyeView:
    channels: np.ndarray  # (H, W, 4) rgb + height-above-ground
    valid: np.ndarray  # (H, W) bool
    index_map: np.ndarray | None  # (H, W) winning point index, -1 where empty
    cell_size: float
    origin: np.ndarray  # world xy of pixel (0, 0)
    gt_semantic: np.ndarray | None = None  # (H, W), -1 where empty
    gt_instance: np.ndarray | None = None

    @property
    def height(self) -> int:
        return self.channels.shape[0]

    @property
    def width(self) -> int:
        return self.channels.shape[1]


def ground_height(cloud: PointCloud) -> float:
    """Robust ground estimate: the 1st-percentile z of the cloud."""
    return float(np.percentile(cloud.xyz[:, 2], 1.0))


def remove_ceiling(cloud: PointCloud, ceiling_fraction: float = 0.9) -> PointCloud:
    """Drop the highest points: everything above ground + fraction * z-extent."""
    if len(cloud) == 0:
        raise ValueError("cannot remove ceiling from an empty cloud")
    z = cloud.xyz[:, 2]
    ground = ground_height(cloud)
    z_cut = ground + ceiling_fraction * (z.max() - ground)
    return cloud.select(z <= z_cut)


def rasterize(cloud: PointCloud, cell_size: float, max_grid: int = 4096) -> BirdsEyeView:
    """Project onto a ground-plane grid, keeping the highest point per cell."""
    if cell_size <= 0:
        raise ValueError("cell_size must be positive")
    if len(cloud) == 0:
        return BirdsEyeView(
            channels=np.zeros((1, 1, N_CHANNELS)),
            valid=np.zeros((1, 1), dtype=bool),
            index_map=np.full((1, 1), -1, dtype=np.int64),
            cell_size=cell_size,
            origin=np.zeros(2),
            gt_semantic=None if cloud.gt_semantic is None else np.full((1, 1), -1, dtype=np.int64),
            gt_instance=None if cloud.gt_instance is None else np.full((1, 1), -1, dtype=np.int64),
        )
    xy = cloud.xyz[:, 0:2]
    z = cloud.xyz[:, 2]
    origin = xy.min(axis=0)
    cols = np.floor((xy[:, 0] - origin[0]) / cell_size).astype(np.int64)
    rows = np.floor((xy[:, 1] - origin[1]) / cell_size).astype(np.int64)
    h, w = int(rows.max()) + 1, int(cols.max()) + 1
    if max(h, w) > max_grid:
        raise ValueError(f"raster {h}x{w} exceeds the maximum dimension {max_grid}")

    # winner per cell: highest z, ties to the lowest point index
    cell = rows * w + cols
    order = np.lexsort((np.arange(len(cloud)), -z, cell))
    cell_sorted = cell[order]
    first = np.ones(len(cell_sorted), dtype=bool)
    first[1:] = cell_sorted[1:] != cell_sorted[:-1]
    winners = order[first]

    ground = ground_height(cloud)
    channels = np.zeros((h, w, N_CHANNELS))
    valid = np.zeros((h, w), dtype=bool)
    index_map = np.full((h, w), -1, dtype=np.int64)
    r, c = rows[winners], cols[winners]
    channels[r, c, 0:3] = cloud.rgb[winners]
    channels[r, c, 3] = np.maximum(z[winners] - ground, 0.0)
    valid[r, c] = True
    index_map[r, c] = winners

    gt_sem = gt_inst = None
    if cloud.gt_semantic is not None:
        gt_sem = np.full((h, w), -1, dtype=np.int64)
        gt_sem[r, c] = cloud.gt_semantic[winners]
    if cloud.gt_instance is not None:
        gt_inst = np.full((h, w), -1, dtype=np.int64)
        gt_inst[r, c] = cloud.gt_instance[winners]
    return BirdsEyeView(channels, valid, index_map, cell_size, origin, gt_sem, gt_inst)


def unproject(view: BirdsEyeView, pixel_features: np.ndarray, n_points: int):
    """Map per-pixel features back to the points that won their cells.

    Returns ``(features, seen)``: an ``n_points x D`` array that is zero for
    points not visible in the view, plus the visibility mask.
    """
    if view.index_map is None:
        raise ValueError("view carries no index map")
    pf = np.asarray(pixel_features, dtype=np.float64)
    if pf.shape[:2] != view.valid.shape:
        raise ShapeError(
            f"pixel features {pf.shape[:2]} do not match the view {view.valid.shape}"
        )
    idx = view.index_map[view.valid]
    out = np.zeros((n_points, pf.shape[2]))
    out[idx] = pf[view.valid]
    seen = np.zeros(n_points, dtype=bool)
    seen[idx] = True
    return out, seen


def pad_to_multiple(view: BirdsEyeView, multiple: int = 16) -> BirdsEyeView:
    """Zero-pad bottom/right so H and W divide ``multiple``; padding is invalid."""
    h, w = view.valid.shape
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return view

    def pad2(a, fill):
        if a is None:
            return None
        out = np.full((h + ph, w + pw) + a.shape[2:], fill, dtype=a.dtype)
        out[:h, :w] = a
        return out

    return BirdsEyeView(
        channels=pad2(view.channels, 0.0),
        valid=pad2(view.valid, False),
        index_map=pad2(view.index_map, -1),
        cell_size=view.cell_size,
        origin=view.origin,
        gt_semantic=pad2(view.gt_semantic, -1),
        gt_instance=pad2(view.gt_instance, -1),
    )


def _resample_nearest(a: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    h, w = a.shape[:2]
    rows = np.minimum((np.arange(new_h) + 0.5) * h / new_h, h - 1).astype(np.int64)
    cols = np.minimum((np.arange(new_w) + 0.5) * w / new_w, w - 1).astype(np.int64)
    return a[rows][:, cols]


def augment(view: BirdsEyeView, seed: int, scale_range=(0.9, 1.1)) -> BirdsEyeView:
    """Training-time augmentation: 90-degree rotation, flips, spatial scaling.

    All planes (channels, mask, GT rasters) transform identically; the height
    channel is rescaled together with the spatial scale. The index map is
    dropped because nearest resampling would duplicate entries.
    """
    if view.gt_semantic is None or view.gt_instance is None:
        raise ValueError("augmentation requires ground-truth rasters")
    rng = np.random.default_rng(seed)
    k = int(rng.integers(4))
    flip_h = bool(rng.integers(2))
    flip_v = bool(rng.integers(2))
    scale = float(rng.uniform(*scale_range))

    def transform(a):
        if a is None:
            return None
        out = np.rot90(a, k)
        if flip_h:
            out = out[:, ::-1]
        if flip_v:
            out = out[::-1, :]
        if scale != 1.0:
            new_h = max(1, int(round(out.shape[0] * scale)))
            new_w = max(1, int(round(out.shape[1] * scale)))
            out = _resample_nearest(out, new_h, new_w)
        return np.ascontiguousarray(out)

    channels = transform(view.channels)
    channels = channels.copy()
    channels[:, :, 3] *= scale
    return BirdsEyeView(
        channels=channels,
        valid=transform(view.valid),
        index_map=None,
        cell_size=view.cell_size / scale,
        origin=view.origin.copy(),
        gt_semantic=transform(view.gt_semantic),
        gt_instance=transform(view.gt_instance),
    )


def view_to_arrays(view: BirdsEyeView, prefix: str = "bev") -> dict[str, np.ndarray]:
    """Flatten a view into named float64 arrays for the checkpoint container."""
    out = {
        f"{prefix}.channels": view.channels,
        f"{prefix}.valid": view.valid.astype(np.float64),
        f"{prefix}.cell_size": np.array(view.cell_size),
        f"{prefix}.origin": view.origin,
    }
    if view.index_map is not None:
        out[f"{prefix}.index_map"] = view.index_map.astype(np.float64)
    if view.gt_semantic is not None:
        out[f"{prefix}.gt_semantic"] = view.gt_semantic.astype(np.float64)
    if view.gt_instance is not None:
        out[f"{prefix}.gt_instance"] = view.gt_instance.astype(np.float64)
    return out


def view_from_arrays(arrays: dict[str, np.ndarray], prefix: str = "bev") -> BirdsEyeView:
    def geti(name):
        a = arrays.get(f"{prefix}.{name}")
        return None if a is None else a.astype(np.int64)

    return BirdsEyeView(
        channels=arrays[f"{prefix}.channels"],
        valid=arrays[f"{prefix}.valid"].astype(bool),
        index_map=geti("index_map"),
        cell_size=float(arrays[f"{prefix}.cell_size"]),
        origin=arrays[f"{prefix}.origin"],
        gt_semantic=geti("gt_semantic"),
        gt_instance=geti("gt_instance"),
    )
