"""Uncertainty-driven keyframe promotion and the viewpoint-space optimisation window."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .planning import nbv_reward, visible_voxels


@dataclass
class KeyframeParams:
    tau_view: float = 0.3
    tau_info: float = 1.0
    tau_rho: float = 0.05
    tau_h: float = 0.5
    m: int = 8
    theta_mix: float = 0.5
    n_iou_samples: int = 128
    frustum_depth: float = 3.0
    use_uncertainty: bool = True
    temporal_window: bool = False

    def __post_init__(self):
        if min(self.tau_view, self.tau_info, self.tau_rho, self.tau_h) <= 0:
            raise ValueError("keyframe thresholds must be positive")
        if self.m < 1:
            raise ValueError("window size must be >= 1")
        if not 0.0 <= self.theta_mix <= 1.0:
            raise ValueError("theta_mix must lie in [0, 1]")


@dataclass
class Keyframe:
    id: int
    pose: object
    footprint: np.ndarray
    frame: object = None
    diagnostics: dict = field(default_factory=dict)
    order: int = 0


@dataclass
class KeyframeStore:
    keyframes: list = field(default_factory=list)

    def __len__(self):
        return len(self.keyframes)

    @property
    def ids(self):
        return [k.id for k in self.keyframes]

    def get(self, kf_id):
        for k in self.keyframes:
            if k.id == kf_id:
                return k
        raise KeyError(kf_id)

    def refresh_footprints(self, volume, intr, ray_budget, occ_threshold):
        for k in self.keyframes:
            k.footprint = visible_voxels(k.pose, volume, intr, ray_budget, occ_threshold)

    def to_json(self):
        return [{"id": k.id, "rotation": k.pose.rotation.tolist(),
                 "translation": k.pose.translation.tolist(),
                 "diagnostics": k.diagnostics} for k in self.keyframes]


# ----------------------------------------------------------------------------
# divergence


def _frustum_samples(intr, n, depth, seed=12345):
    """Fixed volume-uniform samples inside a camera frustum (camera frame)."""
    rng = np.random.default_rng(seed)
    near = intr.near
    u = rng.uniform(0, intr.width, n)
    v = rng.uniform(0, intr.height, n)
    z = np.cbrt(near ** 3 + rng.uniform(0, 1, n) * (depth ** 3 - near ** 3))
    return np.stack([(u - intr.cx) / intr.fx * z, (v - intr.cy) / intr.fy * z, z], axis=1)


def _inside_frustum(points, pose, intr, depth):
    pc = pose.world_to_cam(points)
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * pc[:, 0] / z + intr.cx
        v = intr.fy * pc[:, 1] / z + intr.cy
    return (z >= intr.near) & (z <= depth) & (u >= 0) & (u <= intr.width) & (v >= 0) & (v <= intr.height)


def frustum_iou(a, b, intr, n=128, depth=3.0):
    """Sampled-containment IoU of two equal-size frusta (symmetric by construction)."""
    local = _frustum_samples(intr, n, depth)
    f_ab = np.mean(_inside_frustum(a.cam_to_world(local), b, intr, depth))
    f_ba = np.mean(_inside_frustum(b.cam_to_world(local), a, intr, depth))
    f = 0.5 * (f_ab + f_ba)
    return float(f / (2.0 - f))


def viewpoint_divergence(a, b, intr, theta_mix=0.5, n=128, depth=3.0):
    ang = math.acos(float(np.clip(np.dot(a.forward, b.forward), -1.0, 1.0)))
    return theta_mix * ang + (1.0 - theta_mix) * (1.0 - frustum_iou(a, b, intr, n, depth))


# ----------------------------------------------------------------------------
# promotion


def high_uncertainty_set(volume, tau_h, layers=("u_exp", "u_imp")):
    """Voxels above ``tau_h`` in every listed layer (ablations pass only the live ones)."""
    if len(layers) == 0:
        return np.zeros(0, dtype=np.int64)
    hit = np.ones(volume.grid.n, dtype=bool)
    for name in layers:
        hit &= volume.layer(name) > tau_h
    return np.nonzero(hit)[0]


def coverage_ratio(visible, v_high):
    if len(visible) == 0:
        return 0.0
    return len(np.intersect1d(visible, v_high, assume_unique=True)) / len(visible)


def try_promote(frame, store, volume, intr, params, planner_params, visible=None, v_high=None):
    """Promote when divergence, information gain and coverage all clear their thresholds."""
    if visible is None:
        visible = visible_voxels(frame.pose, volume, intr, planner_params.ray_budget,
                                 planner_params.occ_threshold)
    if v_high is None:
        v_high = high_uncertainty_set(volume, params.tau_h)
    if len(store) == 0:
        delta = math.inf
    else:
        delta = min(viewpoint_divergence(frame.pose, k.pose, intr, params.theta_mix,
                                         params.n_iou_samples, params.frustum_depth)
                    for k in store.keyframes)
    gain, _ = nbv_reward(visible, volume, planner_params)
    rho = coverage_ratio(visible, v_high)
    ok_view = delta > params.tau_view
    if params.use_uncertainty:
        promoted = ok_view and gain > params.tau_info and rho > params.tau_rho
    else:
        promoted = ok_view
    diag = {"delta": delta if math.isfinite(delta) else "inf", "gain": gain, "rho": rho}
    if promoted:
        store.keyframes.append(Keyframe(frame.id, frame.pose, visible, frame, diag,
                                        order=len(store.keyframes)))
    return promoted, diag


def select_window(store, current_visible, v_high, m, temporal=False):
    """Top-m keyframes by covisibility, then V_high overlap, then recency; latest always kept."""
    if len(store) == 0:
        raise ValueError("keyframe store is empty")
    kfs = store.keyframes
    if temporal:
        return [k.id for k in kfs[-m:]][::-1]
    scored = []
    for k in kfs:
        covis = len(np.intersect1d(k.footprint, current_visible, assume_unique=True))
        hi = len(np.intersect1d(k.footprint, v_high, assume_unique=True))
        scored.append((-covis, -hi, -k.order, k.id))
    scored.sort()
    chosen = [s[3] for s in scored[:m]]
    latest = kfs[-1].id
    if latest not in chosen:
        chosen[-1] = latest
    return chosen
