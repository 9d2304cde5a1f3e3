"""Active 3D reconstruction with a hybrid implicit field and Gaussian splat map.

The package builds an uncertainty volume from both maps, picks next-best views
by expected hybrid information gain and reaches them along risk-aware RRT* paths.
"""

from .geometry import CameraIntrinsics, Pose, look_at
from .implicit import ImplicitField, ImplicitHyperparams
from .keyframes import KeyframeParams, KeyframeStore
from .pipeline import Explorer, MetricsReport, RunConfig, run_baseline_policy, run_exploration
from .planning import PlannerParams
from .scene import get_scene, gt_sdf, render_rgbd
from .splats import SplatMap, SplatParams, render_splats
from .uncertainty import FusionParams, UncertaintyVolume
from .volume import VoxelGrid

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics", "Pose", "look_at", "ImplicitField", "ImplicitHyperparams",
    "KeyframeParams", "KeyframeStore", "Explorer", "MetricsReport", "RunConfig",
    "run_baseline_policy", "run_exploration", "PlannerParams", "get_scene", "gt_sdf",
    "render_rgbd", "SplatMap", "SplatParams", "render_splats", "FusionParams",
    "UncertaintyVolume", "VoxelGrid",
]
