"""Active reconstruction loop: sense, map, estimate uncertainty, plan, move."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, Pose, look_at, yaw_rotate
from .implicit import ImplicitField, ImplicitHyperparams, make_ray_batch, save_checkpoint, train_step
from .keyframes import (KeyframeParams, KeyframeStore, high_uncertainty_set, select_window,
                        try_promote)
from .metrics import eval_geometry, eval_mad, eval_render
from .planning import (PlannerParams, build_risk_field, frontier_goal, plan_path,
                       sample_candidates, score_candidates, select_nbv, visible_voxels,
                       write_trajectory_csv)
from .scene import get_scene, gt_sdf, render_rgbd, sample_gt_surface
from .splats import (ObservedSdfGrid, SplatMap, SplatParams, fuse_observed_sdf, optimize_window,
                     render_splats, spawn_from_frame)
from .uncertainty import (FusionParams, SdfSnapshot, UncertaintyVolume, backproject_u_exp,
                          compute_u_time, fuse_final, hybrid_entropy, observed_mask,
                          residual_maps, temporal_masks)
from .volume import VoxelGrid

log = logging.getLogger(__name__)

POLICIES = ("ehig", "random", "frontier-lite")
ABLATIONS = ("no_mlp_uncert", "no_depth_uncert", "no_rgb_uncert", "no_sdf_temp",
             "no_risk_planning", "no_uncert_keyframe", "temporal_window")
OUT_ENV = "ACTIVE_RECON_OUT"

METRIC_FIELDS = ["step", "frames", "splats", "keyframes", "Acc", "Com", "CR", "MAD",
                 "u_final_mean", "entropy_mean", "u_imp_mean", "u_exp_mean", "u_time_mean",
                 "path_length", "collisions", "min_clearance"]

_BLOCKS = {"implicit": ImplicitHyperparams, "fusion": FusionParams, "planner": PlannerParams,
           "keyframes": KeyframeParams, "splats": SplatParams}


@dataclass
class RunConfig:
    scene: str = "two_room"
    steps: int = 200
    seed: int = 0
    policy: str = "ehig"
    ablations: tuple = ()
    out_dir: str = None
    width: int = 96
    height: int = 72
    hfov: float = 90.0
    vfov: float = 60.0
    far: float = 8.0
    noise_sigma: float = 0.0
    voxel_size: float = 0.1
    implicit_cell: float = 0.2
    spawn_stride: int = 4
    spawn_alpha: float = 0.5
    spawn_depth_err: float = 0.2
    implicit_iters: int = 10
    window_every: int = 5
    window_iters: int = 3
    eval_every: int = 10
    n_eval_samples: int = 20000
    n_holdout: int = 4
    bootstrap_spin: int = 8
    max_failures: int = 8
    implicit: ImplicitHyperparams = field(default_factory=lambda: ImplicitHyperparams(n_rays=192))
    fusion: FusionParams = field(default_factory=FusionParams)
    planner: PlannerParams = field(default_factory=PlannerParams)
    keyframes: KeyframeParams = field(default_factory=KeyframeParams)
    splats: SplatParams = field(default_factory=lambda: SplatParams(r_merge=0.05, s_max=0.1))

    def __post_init__(self):
        self.ablations = tuple(sorted(set(self.ablations)))
        self.validate()

    def validate(self):
        if self.steps < 1:
            raise ValueError("step budget must be >= 1")
        if self.policy not in POLICIES:
            raise ValueError(f"unknown policy {self.policy!r}; expected one of {POLICIES}")
        bad = set(self.ablations) - set(ABLATIONS)
        if bad:
            raise ValueError(f"unknown ablation flags: {sorted(bad)}")
        get_scene(self.scene)  # raises on a bad name or missing file

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["ablations"] = list(self.ablations)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key, typ in _BLOCKS.items():
            if key in d and isinstance(d[key], dict):
                block = dict(d[key])
                for k, v in block.items():
                    if isinstance(v, list):
                        block[k] = tuple(v)
                d[key] = typ(**block)
        if "ablations" in d:
            d["ablations"] = tuple(d["ablations"])
        return cls(**d)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            d = json.load(fh)
        base = Path(path).parent
        scene = d.get("scene", "two_room")
        if scene.endswith(".json") and not os.path.isabs(scene) and (base / scene).exists():
            d["scene"] = str(base / scene)
        return cls.from_dict(d)

    def has(self, flag):
        return flag in self.ablations

    @property
    def intrinsics(self):
        return CameraIntrinsics.from_fov(self.width, self.height, self.hfov, self.vfov, far=self.far)


@dataclass
class MetricsReport:
    final: dict
    curves: list
    render: dict = field(default_factory=dict)
    stopped_early: bool = False
    collisions: int = 0
    min_clearance: float = math.inf

    def curve(self, key):
        return np.array([r[key] for r in self.curves])

    def cr_at(self, step):
        """C.R. of the last evaluated epoch at or before ``step``."""
        best = None
        for r in self.curves:
            if r["step"] <= step:
                best = r["CR"]
        return 0.0 if best is None else best


def holdout_poses(scene, n, seed=0, min_clear=0.5):
    """Deterministic viewpoints in free space looking at surface points 1-3 units away."""
    rng = np.random.default_rng(seed)
    lo, hi = scene.bounds
    surf = sample_gt_surface(scene, 2000, seed=seed + 1)
    out = []
    for _ in range(10000):
        if len(out) >= n:
            break
        p = rng.uniform(lo, hi)
        if gt_sdf(scene, p[None])[0] < min_clear:
            continue
        d = np.linalg.norm(surf - p, axis=1)
        ok = np.nonzero((d > 1.0) & (d < 3.0))[0]
        if ok.size == 0:
            continue
        out.append(look_at(p, surf[ok[rng.integers(ok.size)]]))
    return out


class Explorer:
    """Owns every map and runs one step of the active loop at a time."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.scene = get_scene(cfg.scene)
        self.intr = cfg.intrinsics
        self.grid = VoxelGrid.covering(self.scene.bounds, cfg.voxel_size)
        self.hp = cfg.implicit
        self.field = ImplicitField.create(self.scene.bounds, cell_size=cfg.implicit_cell,
                                          seed=cfg.seed)
        self.splats = SplatMap(self.scene.bounds, cfg.splats)
        self.exp_enabled = not (cfg.has("no_depth_uncert") and cfg.has("no_rgb_uncert"))
        self.high_layers = tuple(name for name, on in (("u_exp", self.exp_enabled),
                                                       ("u_imp", not cfg.has("no_mlp_uncert"))) if on)
        fp = cfg.fusion
        self.fusion = dataclasses.replace(
            fp, w_depth=0.0 if cfg.has("no_depth_uncert") else fp.w_depth,
            w_rgb=0.0 if cfg.has("no_rgb_uncert") else fp.w_rgb)
        self.volume = UncertaintyVolume.empty(self.grid, fp.u_exp_init if self.exp_enabled else 0.0)
        self.obs_sdf = ObservedSdfGrid(self.grid, tau_band=self.hp.tau)
        self.planner = (dataclasses.replace(cfg.planner, lam=0.0)
                        if cfg.has("no_risk_planning") else cfg.planner)
        self.kf_params = dataclasses.replace(
            cfg.keyframes, use_uncertainty=not cfg.has("no_uncert_keyframe"),
            temporal_window=cfg.has("temporal_window"))
        self.store = KeyframeStore()
        self.observed = np.zeros(self.grid.n, dtype=bool)
        self.observed_recent = np.zeros(self.grid.n, dtype=bool)
        self.rng_train = np.random.default_rng([cfg.seed, 1])
        self.rng_noise = np.random.default_rng([cfg.seed, 2])
        self.rng_policy = np.random.default_rng([cfg.seed, 3])
        self.pose = self.scene.start_pose()
        self.frames = {}
        self.trajectory = []
        self.plan = None
        self.plan_idx = 0
        self.window = []
        self.snapshot = None
        self.sdf_vox = None
        self.risk = None
        self.cycle = 0
        self.failures = 0
        self.stopped = False
        self.collisions = 0
        self.min_clearance = math.inf
        self.path_length = 0.0
        self.planner_log = []
        self.curves = []
        self.timings = {}
        self.gt_points = sample_gt_surface(self.scene, cfg.n_eval_samples, seed=0)
        self.cr_threshold = 2.0 * cfg.voxel_size
        self.t = 0
        self.last_uncert = -1

    # -- helpers -------------------------------------------------------------

    def _tick(self, name, t0):
        self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - t0

    def _window_frames(self, frame):
        frames = [self.store.get(i).frame for i in self.window if i != frame.id]
        return frames

    # -- stages --------------------------------------------------------------

    def sense(self):
        t0 = time.perf_counter()
        fr = render_rgbd(self.scene, self.pose, self.intr, self.cfg.noise_sigma, self.rng_noise,
                         frame_id=self.t)
        self.frames[fr.id] = fr
        self.trajectory.append(self.pose)
        clear = float(gt_sdf(self.scene, self.pose.translation[None])[0])
        self.min_clearance = min(self.min_clearance, clear)
        if clear < self.planner.agent_radius:
            self.collisions += 1
            log.warning("step %d: pose within agent radius of a surface (%.3f)", self.t, clear)
        self._tick("render", t0)
        return fr

    def integrate(self, fr):
        t0 = time.perf_counter()
        # densify only where the current map explains the frame poorly
        cur = render_splats(self.splats, fr.pose, self.intr)
        poor = (cur.alpha < self.cfg.spawn_alpha) | (np.abs(cur.depth - fr.depth) > self.cfg.spawn_depth_err)
        spawn_from_frame(self.splats, fr, self.cfg.spawn_stride, mask=poor)
        fuse_observed_sdf(self.obs_sdf, fr)
        band = self.fusion.gate_voxels * self.grid.voxel_size
        seen = observed_mask(self.grid, fr.pose, self.intr, fr.depth, fr.valid, band,
                             max_range=self.fusion.obs_range)
        self.observed |= seen
        self.observed_recent |= seen
        self._tick("integrate", t0)

    def train_implicit(self, fr):
        t0 = time.perf_counter()
        others = self._window_frames(fr)
        frames = [fr] + others
        weights = [1.0] + ([1.0 / len(others)] * len(others) if others else [])
        for _ in range(self.cfg.implicit_iters):
            batch = make_ray_batch(frames, self.hp.n_rays, self.hp, self.rng_train, weights)
            train_step(self.field, batch, self.hp, self.intr.far)
        self._tick("implicit", t0)

    def keyframe(self, fr):
        t0 = time.perf_counter()
        vis = visible_voxels(fr.pose, self.volume, self.intr, self.planner.ray_budget,
                             self.planner.occ_threshold)
        v_high = high_uncertainty_set(self.volume, self.kf_params.tau_h, self.high_layers)
        promoted, diag = try_promote(fr, self.store, self.volume, self.intr, self.kf_params,
                                     self.planner, visible=vis, v_high=v_high)
        if promoted and not self.cfg.has("no_sdf_temp"):
            # the field is only supervised as a truncated SDF; compare snapshots in that band
            tau = self.hp.tau
            s_t = SdfSnapshot(np.clip(self.field.sdf(self.grid.centers), -tau, tau), fr.id)
            if self.snapshot is not None:
                masks = temporal_masks(s_t, self.snapshot, self.fusion)
                compute_u_time(self.volume, masks["dS"], masks, self.fusion)
            self.snapshot = s_t
        self._tick("keyframes", t0)
        return promoted, vis

    def refine_window(self, fr, vis):
        t0 = time.perf_counter()
        if len(self.store):
            v_high = high_uncertainty_set(self.volume, self.kf_params.tau_h, self.high_layers)
            self.window = select_window(self.store, vis, v_high, self.kf_params.m,
                                        temporal=self.kf_params.temporal_window)
        if self.cfg.window_iters > 0:
            frames = [fr] + self._window_frames(fr)
            optimize_window(self.splats, frames, self.field, self.cfg.window_iters)
            self.splats.cull(redundant_radius=2.0 * self.splats.params.r_merge)
        self._tick("window", t0)

    def update_uncertainty(self, fr):
        t0 = time.perf_counter()
        s, _, var = self.field.eval(self.grid.centers)
        self.sdf_vox = s
        vol, fp = self.volume, self.fusion
        vol.u_imp = np.zeros(self.grid.n) if self.cfg.has("no_mlp_uncert") else var
        if self.exp_enabled:
            prior = np.where(self.observed_recent, fp.exp_decay * vol.u_exp, vol.u_exp)
            self.observed_recent[:] = False
            views = [fr] + self._window_frames(fr)
            gains = [0.0] + [float(self.store.get(i).diagnostics.get("gain", 0.0))
                             for i in self.window if i != fr.id]
            order = sorted(range(len(views)), key=lambda i: (-gains[i], i))[:fp.top_k]
            res, poses, depths = [], [], []
            for i in order:
                r = residual_maps(self.splats, views[i])
                res.append(r)
                poses.append(views[i].pose)
                depths.append(r["render"].depth)
            backproject_u_exp(vol, res, poses, self.intr, depths, fp, prior=prior)
        if self.cfg.has("no_sdf_temp"):
            vol.u_time = np.zeros(self.grid.n)
        fuse_final(vol, fp)
        hybrid_entropy(vol, self.field, self.splats, fp, sdf=s)
        vol.check()
        self.risk = build_risk_field(self.grid, self.planner, s, vol.p_G)
        self.last_uncert = self.t
        self._tick("uncertainty", t0)

    def _goals(self):
        pp = self.planner
        seed = [self.cfg.seed, 100 + self.cycle]
        pos = self.pose.translation
        if self.cfg.policy == "frontier-lite":
            g = frontier_goal(self.volume, self.risk, self.observed, pp, pos)
            if g is not None:
                return [g], {"goal_kind": "frontier"}
        cands = sample_candidates(self.volume, self.risk, pp.n_candidates, seed, pp, self.intr)
        if self.cfg.policy == "random":
            order = self.rng_policy.permutation(len(cands))
            return [cands[i] for i in order[:3]], {"goal_kind": "random"}
        score_candidates(cands, self.volume, self.intr, pp)
        best = select_nbv(cands, pos)
        rest = sorted((c for c in cands if c is not best),
                      key=lambda c: (-c.reward, float(np.linalg.norm(c.position - pos)), c.id))
        info = {"goal_kind": "ehig", "rewards": [round(c.reward, 6) for c in cands]}
        return [best] + rest[:2], info

    def replan(self, fr):
        t0 = time.perf_counter()
        self.cycle += 1
        if self.last_uncert != self.t:
            self.update_uncertainty(fr)
        rec = {"cycle": self.cycle, "step": self.t, "policy": self.cfg.policy}
        self.plan = None
        try:
            goals, info = self._goals()
        except RuntimeError as exc:
            goals, info = [], {"error": str(exc)}
        rec.update(info)
        for k, g in enumerate(goals):
            plan = plan_path(self.pose, g, self.risk, self.volume, self.planner,
                             seed=[self.cfg.seed, 200 + self.cycle, k], intr=self.intr)
            if plan.success:
                self.plan, self.plan_idx = plan, (1 if len(plan.waypoints) > 1 else 0)
                rec.update(goal=[float(v) for v in g.position], reward=float(g.reward),
                           reward_split=g.diagnostics, attempts=k + 1, success=True,
                           tree_size=plan.stats["tree_size"], costs=plan.costs,
                           cost_trace_final=plan.stats["cost_trace"][-1],
                           waypoints=len(plan.waypoints))
                break
        else:
            rec.update(success=False, attempts=len(goals))
        self.planner_log.append(rec)
        self._tick("planning", t0)

    def _path_still_safe(self):
        if self.plan is None or self.risk is None:
            return True
        rest = np.asarray(self.plan.waypoints[self.plan_idx:])
        return len(rest) == 0 or bool(np.all(self.risk.at(rest) < self.planner.risk_threshold))

    def move(self, fr):
        cfg = self.cfg
        if self.t < cfg.bootstrap_spin - 1:
            self.pose = yaw_rotate(self.pose, 2 * math.pi / cfg.bootstrap_spin)
            return
        if self.plan is not None and not self._path_still_safe():
            self.plan = None
        if self.plan is None or self.plan_idx >= len(self.plan.waypoints):
            self.replan(fr)
        if self.plan is None:
            self.failures += 1
            if self.failures > cfg.max_failures:
                log.warning("planner failed %d times in a row; stopping", self.failures)
                self.stopped = True
            self.pose = yaw_rotate(self.pose, 2 * math.pi / max(cfg.bootstrap_spin, 1))
            return
        self.failures = 0
        nxt = self.plan.orientations[self.plan_idx]
        self.path_length += float(np.linalg.norm(nxt.translation - self.pose.translation))
        self.pose = nxt
        self.plan_idx += 1

    def evaluate(self):
        t0 = time.perf_counter()
        geo = eval_geometry(self.splats.mu, self.scene, self.cr_threshold, self.gt_points,
                            n=self.cfg.n_eval_samples, seed=0)
        mad = eval_mad(self.field, self.scene, n=5000, seed=0, band=4 * self.cfg.voxel_size)
        v = self.volume
        row = {"step": self.t, "frames": len(self.frames), "splats": len(self.splats),
               "keyframes": len(self.store), "Acc": geo["Acc"], "Com": geo["Com"],
               "CR": geo["CR"], "MAD": mad, "u_final_mean": float(v.u_final.mean()),
               "entropy_mean": float(v.entropy.mean()), "u_imp_mean": float(v.u_imp.mean()),
               "u_exp_mean": float(v.u_exp.mean()), "u_time_mean": float(v.u_time.mean()),
               "path_length": self.path_length, "collisions": self.collisions,
               "min_clearance": self.min_clearance}
        self.curves.append(row)
        self._tick("evaluate", t0)
        return row

    def step(self):
        cfg = self.cfg
        fr = self.sense()
        self.integrate(fr)
        self.train_implicit(fr)
        _, vis = self.keyframe(fr)
        periodic = (self.t % cfg.window_every) == cfg.window_every - 1
        if periodic:
            self.refine_window(fr, vis)
        if periodic or self.t == 0:
            self.update_uncertainty(fr)
        if (self.t + 1) % cfg.eval_every == 0:
            self.evaluate()
        if self.t + 1 < cfg.steps:
            self.move(fr)
        self.t += 1

    def run(self):
        while self.t < self.cfg.steps and not self.stopped:
            self.step()
        if not self.curves or self.curves[-1]["step"] != self.t - 1:
            self.evaluate()
        return self.report()

    def report(self):
        return MetricsReport(dict(self.curves[-1]), list(self.curves), {}, self.stopped,
                             self.collisions, self.min_clearance)


# ----------------------------------------------------------------------------
# outputs


def _fmt(v):
    if isinstance(v, float):
        return "inf" if math.isinf(v) else ("nan" if math.isnan(v) else repr(round(v, 10)))
    return str(v)


def write_metrics_csv(path, curves):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_FIELDS)
        for r in curves:
            w.writerow([_fmt(r[k]) for k in METRIC_FIELDS])


def _jsonable(o):
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, (np.floating, float)):
        f = float(o)
        return f if math.isfinite(f) else str(f)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, np.ndarray):
        return _jsonable(o.tolist())
    return o


def write_outputs(ex, out_dir, render_eval=True, figures=True):
    """Metrics, trajectory, planner/keyframe logs, checkpoint, mesh, renders, volume dumps."""
    from .meshing import export_mesh, write_ply_mesh, write_ppm
    from .splats import export_ply, render_splats
    from .volume import dump_layer

    out = Path(out_dir)
    (out / "renders").mkdir(parents=True, exist_ok=True)
    (out / "volume").mkdir(exist_ok=True)
    write_metrics_csv(out / "metrics.csv", ex.curves)
    write_trajectory_csv(out / "trajectory.csv", ex.trajectory)
    with open(out / "planner.json", "w") as fh:
        json.dump(_jsonable(ex.planner_log), fh, indent=1)
    with open(out / "keyframes.json", "w") as fh:
        json.dump(_jsonable(ex.store.to_json()), fh, indent=1)
    with open(out / "config.json", "w") as fh:
        json.dump(_jsonable(ex.cfg.to_dict()), fh, indent=1)
    save_checkpoint(ex.field, out / "field.bin")
    export_ply(ex.splats, out / "splats.ply")
    mesh = export_mesh(ex.field, ex.scene.bounds, 64)
    write_ply_mesh(out / "mesh.ply", mesh)
    for name in ("u_imp", "u_exp", "u_time", "u_final", "occupancy", "entropy"):
        dump_layer(ex.grid, ex.volume.layer(name), out / "volume" / f"{name}.raw", name, ex.t - 1)
    dump_layer(ex.grid, ex.obs_sdf.values, out / "volume" / "observed_sdf.raw", "observed_sdf",
               ex.t - 1)
    summary = {"final": ex.curves[-1], "stopped_early": ex.stopped}
    if render_eval:
        poses = holdout_poses(ex.scene, ex.cfg.n_holdout, seed=0)
        if poses:
            summary["render"] = eval_render(ex.splats, poses, ex.scene, ex.intr)
            for i, p in enumerate(poses):
                write_ppm(out / "renders" / f"holdout_{i}.ppm",
                          render_splats(ex.splats, p, ex.intr).image)
                write_ppm(out / "renders" / f"holdout_{i}_gt.ppm",
                          render_rgbd(ex.scene, p, ex.intr).image)
    with open(out / "summary.json", "w") as fh:
        json.dump(_jsonable(summary), fh, indent=1)
    with open(out / "timings.json", "w") as fh:
        json.dump(_jsonable(ex.timings), fh, indent=1)
    if figures:
        from . import plotting

        plotting.report_figures(ex, out)
    return summary


def run_exploration(cfg, out_dir=None):
    """Run the full loop; writes artifacts when an output directory is configured."""
    out_dir = os.environ.get(OUT_ENV) or out_dir or cfg.out_dir
    ex = Explorer(cfg)
    report = ex.run()
    if out_dir:
        summary = write_outputs(ex, out_dir)
        report.render = summary.get("render", {})
    return report, ex


def run_baseline_policy(cfg, out_dir=None):
    if cfg.policy not in ("random", "frontier-lite"):
        raise ValueError("baseline policy must be 'random' or 'frontier-lite'")
    return run_exploration(cfg, out_dir)
