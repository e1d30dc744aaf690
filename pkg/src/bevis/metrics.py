"""Segmentation metrics: mIoU / accuracy and instance AP at IoU overlaps.

Instance AP follows the classic detection protocol on point sets: within each
class, predictions ranked by confidence greedily claim the unmatched
ground-truth instance of the same class (and scene) with the highest IoU; a
claim counts as a true positive when that IoU reaches the threshold
(inclusive). Average precision is the area under the precision-recall curve
with all-point interpolation; unmatched ground truth counts as false negative.
Classes without any ground-truth instance are excluded from means.

Since mean-shift clusters carry no scores, the confidence of a predicted
instance is its size divided by the scene size.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

STRICT_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
REPORT_THRESHOLDS = (0.25, 0.5, 0.75)


@dataclass
class SemanticMetrics:
    miou: float
    oacc: float
    macc: float
    per_class_iou: dict[int, float]


def semantic_metrics(pred: np.ndarray, gt: np.ndarray, n_classes: int) -> SemanticMetrics:
    """Per-class IoU over classes present in the ground truth, overall point
    accuracy, and mean per-class recall."""
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    if pred.shape != gt.shape:
        raise ValueError("prediction and ground truth must align")
    present = np.unique(gt)
    ious, recalls = {}, []
    for cls in present:
        p = pred == cls
        g = gt == cls
        tp = np.sum(p & g)
        union = np.sum(p | g)
        ious[int(cls)] = float(tp / union) if union else 1.0
        recalls.append(float(tp / g.sum()))
    oacc = float(np.mean(pred == gt)) if len(gt) else 1.0
    miou = float(np.mean(list(ious.values()))) if ious else 1.0
    macc = float(np.mean(recalls)) if recalls else 1.0
    return SemanticMetrics(miou, oacc, macc, ious)


@dataclass
class Instance:
    """One instance as a point-index set within a named scene."""

    scene: str
    cls: int
    points: np.ndarray
    confidence: float = 0.0

    def __post_init__(self):
        self.points = np.unique(np.asarray(self.points, dtype=np.int64))


def instances_from_labels(labeling, scene: str = "scene") -> list[Instance]:
    """Instances for a labeled scene; confidence = instance size / scene size."""
    n = len(labeling.instance)
    out = []
    for inst in np.unique(labeling.instance):
        points = np.flatnonzero(labeling.instance == inst)
        votes = np.bincount(labeling.semantic[points])
        out.append(Instance(scene, int(votes.argmax()), points, confidence=len(points) / n))
    return out


def _iou(a: Instance, b: Instance) -> float:
    inter = np.intersect1d(a.points, b.points, assume_unique=True).size
    union = a.points.size + b.points.size - inter
    return inter / union if union else 0.0


def match_class(preds: list[Instance], gts: list[Instance], threshold: float):
    """Greedy matching within one class.

    Returns ``(flags, n_gt)`` where flags mark each prediction, in confidence
    order, as true positive (matched) or false positive.
    """
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].confidence, preds[i].scene, i))
    claimed: set[int] = set()
    flags = []
    for pi in order:
        p = preds[pi]
        best_iou, best_gi = 0.0, None
        for gi, g in enumerate(gts):
            if gi in claimed or g.scene != p.scene:
                continue
            iou = _iou(p, g)
            if iou > best_iou:
                best_iou, best_gi = iou, gi
        if best_gi is not None and best_iou >= threshold:
            claimed.add(best_gi)
            flags.append(True)
        else:
            flags.append(False)
    return flags, len(gts)


def average_precision(flags: list[bool], n_gt: int) -> float:
    """Area under the precision-recall curve, all-point interpolation."""
    if n_gt == 0:
        return float("nan")
    if not flags:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~np.asarray(flags, dtype=bool))
    recall = tp / n_gt
    precision = tp / (tp + fp)
    mrec = np.concatenate([[0.0], recall, [recall[-1]]])
    mpre = np.concatenate([[1.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    return float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))


def ap_at_overlap(preds: list[Instance], gts: list[Instance], threshold: float) -> dict[int, float]:
    """Per-class AP at one IoU threshold over classes with ground truth."""
    classes = sorted({g.cls for g in gts})
    out = {}
    for cls in classes:
        flags, n_gt = match_class(
            [p for p in preds if p.cls == cls], [g for g in gts if g.cls == cls], threshold
        )
        out[cls] = average_precision(flags, n_gt)
    return out


@dataclass
class ApReport:
    per_class: dict[float, dict[int, float]] = field(default_factory=dict)
    mean: dict[float, float] = field(default_factory=dict)
    strict_mean: float = 0.0  # mean AP over the [0.5:0.95:0.05] range

    @property
    def ap50(self) -> float:
        return self.mean[0.5]

    @property
    def ap25(self) -> float:
        return self.mean[0.25]


def strict_ap(preds: list[Instance], gts: list[Instance]) -> ApReport:
    """AP at 0.25/0.5/0.75 plus the strict mean over [0.5:0.95:0.05].

    Matching is always class-equal, so a correct instance mask with the wrong
    class leaves its ground truth unmatched (a false negative).
    """
    report = ApReport()
    thresholds = sorted(set(REPORT_THRESHOLDS) | set(STRICT_THRESHOLDS))
    for t in thresholds:
        per_class = ap_at_overlap(preds, gts, t)
        report.per_class[t] = per_class
        report.mean[t] = float(np.mean(list(per_class.values()))) if per_class else 0.0
    report.strict_mean = float(np.mean([report.mean[t] for t in STRICT_THRESHOLDS]))
    return report
