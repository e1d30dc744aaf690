"""Desk-scale joint semantic/instance segmentation of indoor point clouds.

Pipeline: bird's-eye-view rasterization -> 2D embedding network ->
unprojection -> 3D graph propagation network -> mean-shift grouping ->
semantic-consistency splitting -> instance metrics.
"""

from .autodiff import Tensor, no_grad
from .bev import BirdsEyeView, augment, rasterize, remove_ceiling, unproject
from .config import PipelineConfig
from .grouping import (
    MeanShiftConfig,
    SplitConfig,
    assign_semantics,
    mean_shift,
    split_inconsistent,
)
from .metrics import ap_at_overlap, semantic_metrics, strict_ap
from .scene import Labeling, PointCloud, SceneSpec, featurize, generate_scene

__all__ = [
    "Tensor",
    "no_grad",
    "PointCloud",
    "SceneSpec",
    "Labeling",
    "generate_scene",
    "featurize",
    "BirdsEyeView",
    "rasterize",
    "remove_ceiling",
    "unproject",
    "augment",
    "MeanShiftConfig",
    "SplitConfig",
    "mean_shift",
    "assign_semantics",
    "split_inconsistent",
    "semantic_metrics",
    "ap_at_overlap",
    "strict_ap",
    "PipelineConfig",
]
