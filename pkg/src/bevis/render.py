"""PPM (P6) export of views, label maps and PCA-projected feature maps."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .bev import BirdsEyeView


def write_ppm(path, rgb: np.ndarray):
    """Write an (H, W, 3) float image in [0, 1] as binary PPM."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected HxWx3 image, got {rgb.shape}")
    h, w = rgb.shape[:2]
    data = (np.clip(rgb, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def pca_rgb(features: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Project a per-pixel feature map to RGB via PCA over the valid cells.

    Each of the top three components is min-max scaled to [0, 1]; degenerate
    (zero-variance) feature maps render as a uniform mid-gray.
    """
    features = np.asarray(features, dtype=np.float64)
    h, w, d = features.shape
    out = np.zeros((h, w, 3))
    rows = features[valid]
    if rows.shape[0] == 0:
        return out
    centered = rows - rows.mean(axis=0)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    comps = centered @ vt[:3].T
    if comps.shape[1] < 3:
        comps = np.pad(comps, ((0, 0), (0, 3 - comps.shape[1])))
    spans = comps.max(axis=0) - comps.min(axis=0)
    scaled = np.full_like(comps, 0.5)
    nz = spans > 1e-12
    scaled[:, nz] = (comps[:, nz] - comps[:, nz].min(axis=0)) / spans[nz]
    out[valid] = scaled
    return out


def instance_rgb(ids: np.ndarray) -> np.ndarray:
    """Deterministic color per instance id via golden-ratio hues; -1 is black."""
    ids = np.asarray(ids, dtype=np.int64)
    out = np.zeros(ids.shape + (3,))
    mask = ids >= 0
    hue = (ids[mask] * 0.61803398875) % 1.0
    out[mask] = _hsv_to_rgb(hue, 0.75, 0.95)
    return out


def _hsv_to_rgb(h, s, v):
    i = np.floor(h * 6.0).astype(int) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p = v * (1 - s)
    q = v * (1 - f * s)
    t = v * (1 - (1 - f) * s)
    table = np.stack(
        [
            np.stack([np.full_like(f, v), t, np.full_like(f, p)], axis=-1),
            np.stack([q, np.full_like(f, v), np.full_like(f, p)], axis=-1),
            np.stack([np.full_like(f, p), np.full_like(f, v), t], axis=-1),
            np.stack([np.full_like(f, p), q, np.full_like(f, v)], axis=-1),
            np.stack([t, np.full_like(f, p), np.full_like(f, v)], axis=-1),
            np.stack([np.full_like(f, v), np.full_like(f, p), q], axis=-1),
        ],
        axis=0,
    )
    return table[i, np.arange(len(h))]


def render_view(view: BirdsEyeView, embeddings: np.ndarray | None, out_dir, stem: str):
    """Emit the standard render set: BEV colors, GT instances, PCA embeddings."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    rgb = view.channels[:, :, 0:3] * view.valid[:, :, None]
    path = out_dir / f"{stem}_bev.ppm"
    write_ppm(path, rgb)
    written.append(path)
    if view.gt_instance is not None:
        path = out_dir / f"{stem}_gt_instances.ppm"
        write_ppm(path, instance_rgb(view.gt_instance))
        written.append(path)
    if embeddings is not None:
        path = out_dir / f"{stem}_embedding_pca.ppm"
        write_ppm(path, pca_rgb(embeddings, view.valid))
        written.append(path)
    return written
