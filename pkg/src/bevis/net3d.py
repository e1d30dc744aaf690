"""Graph propagation network over point neighborhoods.

EdgeConv blocks on a static xyz k-nearest-neighbor graph consume the 9 input
features concatenated with the unprojected BEV instance features (zero for
points invisible in the view) and predict per-point instance features plus
semantic logits. Training draws 1024-point cylindrical blocks; full scenes are
covered by overlapping blocks whose outputs are averaged per point.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .bev import BirdsEyeView, unproject
from .nn import Dense, DenseBnRelu, merge_params, merge_state
from .scene import PointCloud


def build_knn(points: np.ndarray, k: int, chunk: int = 512) -> np.ndarray:
    """Exact k nearest neighbors by Euclidean distance, ties to lower index.

    No self-loops; requires N > k. Uses argpartition plus an explicit pass
    over the boundary tie group, so distance ties resolve to the lowest index
    exactly as a full (distance, index) sort would.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if n <= k:
        raise ValueError(f"need more than k={k} points, got {n}")
    out = np.empty((n, k), dtype=np.int64)
    sq = (pts * pts).sum(axis=1)
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        m = hi - lo
        d2 = sq[lo:hi, None] + sq[None, :] - 2.0 * (pts[lo:hi] @ pts.T)
        d2[np.arange(m), np.arange(lo, hi)] = np.inf
        part = np.argpartition(d2, k - 1, axis=1)[:, :k]
        vals = np.take_along_axis(d2, part, axis=1)
        # rowwise lexicographic (distance, index) order via two stable sorts
        by_idx = np.argsort(part, axis=1, kind="stable")
        part = np.take_along_axis(part, by_idx, axis=1)
        vals = np.take_along_axis(vals, by_idx, axis=1)
        by_val = np.argsort(vals, axis=1, kind="stable")
        part = np.take_along_axis(part, by_val, axis=1)
        vals = np.take_along_axis(vals, by_val, axis=1)
        out[lo:hi] = part
        # rows whose boundary distance ties with excluded points need the
        # exact scan; with continuous inputs this is rare
        boundary = vals[:, -1]
        ties = np.flatnonzero((d2 <= boundary[:, None]).sum(axis=1) > k)
        for r in ties:
            cand = np.flatnonzero(d2[r] <= boundary[r])
            order = np.lexsort((cand, d2[r, cand]))
            out[lo + r] = cand[order[:k]]
    return out


def edgeconv(features: Tensor, neighbors: np.ndarray, mlp) -> Tensor:
    """Shared MLP on (x_i, x_j - x_i) per edge, max-aggregated over neighbors."""
    n, c = features.shape
    if neighbors.ndim != 2 or neighbors.shape[0] != n:
        raise ValueError(f"graph shape {neighbors.shape} does not match {n} points")
    k = neighbors.shape[1]
    xi = ad.repeat_rows(features, k)
    xj = ad.gather_rows(features, neighbors.reshape(-1))
    edge = ad.concat([xi, ad.sub(xj, xi)], axis=1)
    hidden = mlp(edge)
    return ad.reduce_max(ad.reshape(hidden, (n, k, hidden.shape[1])), axis=1)


class PropagationNet3D:
    """Three EdgeConv blocks (64, 64, 64), a block-global context vector, and
    a dense trunk with two heads.

    The global branch (max over all points, as in the DGCNN segmentation
    architecture) matters here: visible points of an instance may sit many
    neighborhood hops away from its occluded points, and the block-level
    summary is what carries their embedding across in one step.
    """

    def __init__(self, in_dim=17, widths=(64, 64, 64), embed_dim=8, n_classes=8, seed=0):
        rng = np.random.default_rng(seed)
        self.in_dim = in_dim
        self.embed_dim = embed_dim
        self.n_classes = n_classes
        self.edges = []
        prev = in_dim
        for i, width in enumerate(widths):
            self.edges.append(DenseBnRelu(f"edge{i}", 2 * prev, width, rng))
            prev = width
        self.global_dense = Dense("global", sum(widths), 256, rng)
        self.trunk = DenseBnRelu("trunk", sum(widths) + 256, 256, rng)
        self.head_inst = Dense("head_inst", 256, embed_dim, rng)
        self.head_sem = Dense("head_sem", 256, n_classes, rng)
        self._blocks = [*self.edges, self.global_dense, self.trunk, self.head_inst, self.head_sem]

    def forward(self, features: np.ndarray, neighbors: np.ndarray, training: bool):
        """features: (N, in_dim) point rows. Returns (instance features, logits)."""
        feats = np.array(features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[1] != self.in_dim:
            raise ValueError(f"expected Nx{self.in_dim} features, got {feats.shape}")
        # center the block in the ground plane; edge differences are already
        # translation invariant, this keeps the absolute-position inputs local
        feats[:, 0] -= feats[:, 0].mean()
        feats[:, 1] -= feats[:, 1].mean()
        h = Tensor(feats)
        skips = []
        for block in self.edges:
            h = edgeconv(h, neighbors, lambda e, b=block: b(e, training))
            skips.append(h)
        cat = ad.concat(skips, axis=1)
        pooled = ad.reshape(ad.reduce_max(cat, axis=0), (1, cat.shape[1]))
        context = ad.repeat_rows(ad.relu(self.global_dense(pooled)), feats.shape[0])
        trunk = self.trunk(ad.concat([cat, context], axis=1), training)
        return self.head_inst(trunk), self.head_sem(trunk)

    def params(self):
        return merge_params(*self._blocks)

    def state(self):
        return merge_state(*self._blocks)

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        for name, p in self.params().items():
            if arrays[name].shape != p.data.shape:
                raise ValueError(f"checkpoint shape mismatch for {name}")
            p.data = np.array(arrays[name])
        for block in self._blocks:
            if hasattr(block, "bn"):
                block.bn.load_state(arrays)


def sample_block(cloud: PointCloud, center_xy, diameter: float, n: int, rng) -> np.ndarray:
    """Indices of ``n`` points from the cylinder around ``center_xy``.

    Sampling is uniform without replacement, falling back to replacement when
    the cylinder holds fewer than ``n`` candidates. Empty cylinders raise so
    the caller can pick another center.
    """
    if len(cloud) == 0:
        raise ValueError("cannot sample from an empty cloud")
    center = np.asarray(center_xy, dtype=np.float64)
    delta = cloud.xyz[:, 0:2] - center
    inside = np.flatnonzero((delta * delta).sum(axis=1) <= (diameter / 2.0) ** 2)
    if inside.size == 0:
        raise ValueError("cylindrical block is empty")
    return rng.choice(inside, size=n, replace=inside.size < n)


def augmented_features(cloud: PointCloud, view: BirdsEyeView, embeddings: np.ndarray):
    """Point features concatenated with unprojected BEV instance features.

    Points not visible in the view get zeros in the trailing embedding slots.
    Returns ``(features, seen_mask)``.
    """
    emb_pts, seen = unproject(view, embeddings, len(cloud))
    return np.hstack([cloud.points, emb_pts]), seen


def compute_targets(view: BirdsEyeView, embeddings: np.ndarray, gt_instance: np.ndarray, n_points: int):
    """Regression targets: per ground-truth instance, the mean embedding of its
    visible pixels, broadcast to all its points. Instances without a visible
    pixel stay undefined and are excluded from the loss.
    """
    emb_pts, seen = unproject(view, embeddings, n_points)
    targets = np.zeros((n_points, embeddings.shape[2]))
    defined = np.zeros(n_points, dtype=bool)
    for inst in np.unique(gt_instance):
        members = gt_instance == inst
        visible = members & seen
        if visible.any():
            targets[members] = emb_pts[visible].mean(axis=0)
            defined[members] = True
    return targets, defined


def instance_loss_3d(pred: Tensor, targets: np.ndarray, defined: np.ndarray):
    """Mean Euclidean distance between predicted and target rows over defined
    points. Returns ``(loss, warned)``; zero with a warning if nothing is defined.
    """
    idx = np.flatnonzero(defined)
    if idx.size == 0:
        return Tensor(0.0), True
    rows = ad.gather_rows(pred, idx)
    diff = ad.sub(rows, Tensor(targets[idx]))
    dist = ad.sqrt(ad.tsum(ad.mul(diff, diff), axis=1))
    return ad.tmean(dist), False


def tile_centers(xy: np.ndarray, stride: float) -> list[tuple[float, float]]:
    """Grid of block centers covering the xy bounding box, centered on it.

    With stride = diameter / 2 every point lies within the radius of its
    nearest center, so coverage is guaranteed; a cloud whose extent fits one
    stride yields exactly one center.
    """
    lo = xy.min(axis=0)
    hi = xy.max(axis=0)
    mid = (lo + hi) / 2.0
    counts = [max(1, int(np.ceil((hi[a] - lo[a]) / stride))) for a in range(2)]
    axes = [mid[a] + (np.arange(counts[a]) - (counts[a] - 1) / 2.0) * stride for a in range(2)]
    return [(float(cx), float(cy)) for cy in axes[1] for cx in axes[0]]


def infer_full_scene(net: PropagationNet3D, features: np.ndarray, xyz: np.ndarray, k: int, diameter: float):
    """Cover the scene with overlapping cylindrical blocks and average the
    per-point outputs over every block containing the point.
    """
    n = len(xyz)
    d, c = net.embed_dim, net.n_classes
    acc = np.zeros((n, d + c))
    cnt = np.zeros(n)
    r2 = (diameter / 2.0) ** 2
    xy = xyz[:, 0:2]
    for cx, cy in tile_centers(xy, diameter / 2.0):
        delta = xy - [cx, cy]
        idx = np.flatnonzero((delta * delta).sum(axis=1) <= r2)
        if idx.size < 2:
            continue
        nb = build_knn(xyz[idx], min(k, idx.size - 1))
        with ad.no_grad():
            f_inst, logits = net.forward(features[idx], nb, training=False)
        acc[idx, :d] += f_inst.data
        acc[idx, d:] += logits.data
        cnt[idx] += 1
    uncovered = np.flatnonzero(cnt == 0)
    covered = np.flatnonzero(cnt > 0)
    if uncovered.size:
        if covered.size == 0:
            raise ValueError("no block covered any point")
        # isolated points inherit the nearest covered prediction
        for i in uncovered:
            diff = xyz[covered] - xyz[i]
            j = covered[int(np.argmin(np.einsum("ij,ij->i", diff, diff)))]
            acc[i] = acc[j] / cnt[j]
            cnt[i] = 1.0
    out = acc / cnt[:, None]
    return out[:, :d], out[:, d:]
