"""Mean-shift grouping of instance features and semantic post-processing.

Every point seeds a flat-kernel (uniform ball) mean-shift iteration; converged
modes within the merge radius collapse to one cluster, numbered by first
occurrence so the result is deterministic in the input order. A final pass
splits predicted instances whose members disagree semantically: any class that
accumulates at least ``alpha * average_instance_size(class)`` points becomes
its own instance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import Labeling


@dataclass
class MeanShiftConfig:
    bandwidth: float = 1.0
    max_iters: int = 100
    convergence_tol: float = 1e-3
    mode_merge_radius: float = 0.5

    def __post_init__(self):
        if self.bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        if self.mode_merge_radius > self.bandwidth:
            raise ValueError("mode_merge_radius must not exceed the bandwidth")


@dataclass
class SplitConfig:
    alpha: float = 0.25
    avg_instance_size: np.ndarray | None = None  # per-class mean points per instance

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.avg_instance_size is not None:
            self.avg_instance_size = np.asarray(self.avg_instance_size, dtype=np.float64)
            if np.any(self.avg_instance_size <= 0):
                raise ValueError("average instance sizes must be positive")


def mean_shift(features: np.ndarray, cfg: MeanShiftConfig, chunk: int = 2048) -> np.ndarray:
    """Cluster ids per point (0-based, dense, ordered by first occurrence).

    Seeds whose modes coincide exactly follow identical trajectories (the
    update is a pure function of the mode vector), so each iteration runs on
    the unique mode rows only; in well-separated data whole clusters collapse
    to a single representative after a couple of iterations.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or len(x) < 1:
        raise ValueError(f"features must be a non-empty NxD matrix, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("features must be finite")
    n = len(x)
    bw2 = cfg.bandwidth**2
    sq_norms = (x * x).sum(axis=1)

    modes = x.copy()
    frozen = np.zeros(n, dtype=bool)
    for _ in range(cfg.max_iters):
        active = np.flatnonzero(~frozen)
        if active.size == 0:
            break
        uniq, inverse = np.unique(modes[active], axis=0, return_inverse=True)
        new_uniq = np.empty_like(uniq)
        shift = np.empty(len(uniq))
        for lo in range(0, len(uniq), chunk):
            seeds = uniq[lo : lo + chunk]
            d2 = (
                (seeds * seeds).sum(axis=1)[:, None]
                + sq_norms[None, :]
                - 2.0 * seeds @ x.T
            )
            inside = d2 <= bw2
            counts = np.maximum(inside.sum(axis=1), 1)  # the seed itself is inside
            new = (inside.astype(np.float64) @ x) / counts[:, None]
            new_uniq[lo : lo + chunk] = new
            shift[lo : lo + chunk] = np.linalg.norm(new - seeds, axis=1)
        modes[active] = new_uniq[inverse]
        frozen[active] = (shift <= cfg.convergence_tol)[inverse]

    # merge modes within the radius, numbering clusters by first point order;
    # the scan runs per unique mode, labels broadcast back afterwards
    uniq, first_pos, inverse = np.unique(
        modes, axis=0, return_index=True, return_inverse=True
    )
    order = np.argsort(first_pos, kind="stable")
    merge2 = cfg.mode_merge_radius**2
    centers: list[np.ndarray] = []
    uniq_label = np.empty(len(uniq), dtype=np.int64)
    for u in order:
        mode = uniq[u]
        for cid, center in enumerate(centers):
            d = mode - center
            if d @ d <= merge2:
                uniq_label[u] = cid
                break
        else:
            uniq_label[u] = len(centers)
            centers.append(mode)
    return uniq_label[inverse]


def assign_semantics(instance_labels: np.ndarray, logits: np.ndarray):
    """Per-point classes from the argmax logits plus a majority class per
    instance (ties to the lower class id). Returns ``(Labeling, instance_class)``.
    """
    instance_labels = np.asarray(instance_labels, dtype=np.int64)
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2 or len(logits) != len(instance_labels):
        raise ValueError("logits must be NxK aligned with the instance labels")
    semantic = logits.argmax(axis=1)
    instance_class = {}
    for inst in np.unique(instance_labels):
        votes = np.bincount(semantic[instance_labels == inst], minlength=logits.shape[1])
        instance_class[int(inst)] = int(votes.argmax())  # argmax takes the lower id on ties
    return Labeling(semantic, instance_labels), instance_class


def split_inconsistent(labeling: Labeling, cfg: SplitConfig) -> Labeling:
    """Split instances whose semantic votes pass the per-class threshold.

    Within each instance, every class c with at least
    ``alpha * avg_instance_size[c]`` member points becomes its own instance;
    the remaining sub-threshold points stay together with the instance's
    majority group. The result is a full partition and the operation is
    idempotent.
    """
    if cfg.avg_instance_size is None:
        raise ValueError("SplitConfig needs per-class average instance sizes")
    thresholds = cfg.alpha * cfg.avg_instance_size
    semantic = labeling.semantic
    out = np.empty_like(labeling.instance)
    next_id = 0
    for inst in np.unique(labeling.instance):
        members = np.flatnonzero(labeling.instance == inst)
        counts = np.bincount(semantic[members], minlength=len(thresholds))
        passing = np.flatnonzero((counts > 0) & (counts >= thresholds))
        if passing.size == 0:
            out[members] = next_id
            next_id += 1
            continue
        majority = int(counts.argmax())
        rest_id = None
        for cls in passing:
            ids = members[semantic[members] == cls]
            out[ids] = next_id
            if cls == majority:
                rest_id = next_id
            next_id += 1
        leftover = members[~np.isin(semantic[members], passing)]
        if leftover.size:
            if rest_id is None:
                # no passing majority to rejoin: the sub-threshold remainder,
                # led by its majority class, stays together as one instance
                rest_id = next_id
                next_id += 1
            out[leftover] = rest_id
    return Labeling(semantic.copy(), out)


def average_instance_sizes(clouds, n_classes: int) -> np.ndarray:
    """Mean points per ground-truth instance for every class over a dataset.

    Classes never seen fall back to the global mean instance size.
    """
    totals = np.zeros(n_classes)
    counts = np.zeros(n_classes)
    for cloud in clouds:
        for inst in np.unique(cloud.gt_instance):
            members = cloud.gt_instance == inst
            cls = int(cloud.gt_semantic[members][0])
            totals[cls] += members.sum()
            counts[cls] += 1
    seen = counts > 0
    out = np.full(n_classes, max(totals.sum() / max(counts.sum(), 1), 1.0))
    out[seen] = totals[seen] / counts[seen]
    return out
