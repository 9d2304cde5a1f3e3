"""Next-best-view selection and risk-aware RRT* path planning.

Candidates are scored by the expected hybrid information gain surrogate

    R(c) = sum_{v in V_c} w(v) (1 - O(v)),   w(v) = alpha u_final(v) + beta H_hybrid(v)

where V_c is the set of voxels a frustum ray fan reaches before hitting
occupied space.  Paths minimise the discretised integral of
``1 + lam * risk - eta * reward`` along arc length (reward normalised to [0, 1]).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import distance_transform_edt, grey_dilation
from scipy.spatial import cKDTree
from scipy.special import expit

from .geometry import CameraIntrinsics, Pose, look_at, yaw_rotate


@dataclass
class PlannerParams:
    alpha: float = 1.0
    beta: float = 1.0
    eta: float = 0.5
    lam: float = 5.0
    n_candidates: int = 64
    ray_budget: tuple = (32, 24)
    rrt_iters: int = 300
    step: float = 0.3
    goal_radius: float = 0.2
    rewire_radius: float = 0.8
    goal_bias: float = 0.15
    risk_threshold: float = 0.3
    agent_radius: float = 0.2
    sigma_risk: float = 0.1
    dilation_decay: float = 0.5
    decay_rings: int = 2
    occ_threshold: float = 0.65
    view_range: tuple = (0.5, 3.0)
    yaw_jitter: float = 0.2
    max_attempts: int = 50
    reward_lattice: float = 0.4
    reward_rays: tuple = (8, 6)
    start_exempt: float = 0.25

    def __post_init__(self):
        vals = [self.alpha, self.beta, self.eta, self.lam, self.step, self.goal_radius,
                self.rewire_radius, self.agent_radius]
        if min(vals) < 0:
            raise ValueError("planner parameters must be non-negative")
        if self.rrt_iters < 1:
            raise ValueError("rrt_iters must be >= 1")
        if self.eta >= 1.0:
            raise ValueError("eta must stay below 1 so edge costs remain positive")


@dataclass
class CandidateViewpoint:
    pose: Pose
    id: int = 0
    target: np.ndarray = None
    reward: float = 0.0
    visible: np.ndarray = None
    feasible: bool = True
    clearance: float = 0.0
    diagnostics: dict = field(default_factory=dict)

    @property
    def position(self):
        return self.pose.translation


@dataclass
class RiskField:
    grid: object
    risk: np.ndarray
    base: np.ndarray = None

    def at(self, points):
        """Risk of the voxel containing each point; 1 outside the grid."""
        idx = self.grid.flat_index(np.atleast_2d(points))
        return np.where(idx >= 0, self.risk[np.maximum(idx, 0)], 1.0)

    def free_mask(self, threshold):
        return self.risk < threshold


@dataclass
class PathPlan:
    waypoints: list
    orientations: list
    success: bool = True
    costs: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)

    @property
    def length(self):
        if len(self.waypoints) < 2:
            return 0.0
        w = np.asarray(self.waypoints)
        return float(np.sum(np.linalg.norm(np.diff(w, axis=0), axis=1)))


# ----------------------------------------------------------------------------
# risk


def build_risk_field(grid, params, sdf, p_G):
    """risk = max(p_G, sigmoid(-sdf / sigma_risk)), forced to 1 inside solids, then dilated.

    Dilation is flat (no decay) within the agent radius, followed by
    ``decay_rings`` one-voxel rings that multiply by ``dilation_decay``.
    """
    base = np.maximum(np.asarray(p_G), expit(-np.asarray(sdf) / params.sigma_risk))
    base = np.where(np.asarray(sdf) < 0, 1.0, base)
    vol = base.reshape(grid.shape)
    k = int(math.ceil(params.agent_radius / grid.voxel_size))
    if k > 0:
        r = np.arange(-k, k + 1)
        ball = (r[:, None, None] ** 2 + r[None, :, None] ** 2 + r[None, None, :] ** 2) <= k * k
        vol = np.maximum(vol, grey_dilation(vol, footprint=ball, mode="nearest"))
    cube = np.ones((3, 3, 3), dtype=bool)
    for _ in range(params.decay_rings):
        vol = np.maximum(vol, params.dilation_decay * grey_dilation(vol, footprint=cube,
                                                                    mode="nearest"))
    return RiskField(grid, np.clip(vol.ravel(), 0.0, 1.0), base)


def risk_from_maps(field, splat_map, volume, params, sdf=None):
    """Convenience wrapper pulling SDF from the implicit field and p_G from the splats."""
    from .uncertainty import explicit_occupancy

    centers = volume.grid.centers
    s = field.sdf(centers) if sdf is None else sdf
    p_g = volume.p_G if volume.p_G is not None else explicit_occupancy(splat_map, centers)
    return build_risk_field(volume.grid, params, s, p_g)


# ----------------------------------------------------------------------------
# candidates and visibility


def _clearance(risk, threshold):
    free = risk.free_mask(threshold).reshape(risk.grid.shape)
    return distance_transform_edt(free) * risk.grid.voxel_size


def _view_target(pos, volume, params, rng):
    """Highest u_final voxel within range of ``pos``; ties go to the nearest one."""
    c = volume.grid.centers
    d = np.linalg.norm(c - pos, axis=1)
    ok = (d >= params.view_range[0]) & (d <= params.view_range[1])
    if not np.any(ok):
        return None
    idx = np.nonzero(ok)[0]
    u = volume.u_final[idx]
    best = idx[u >= u.max() - 1e-12]
    return c[best[np.argmin(d[best])]]


def sample_candidates(volume, risk, n, seed, params, intr=None):
    """n feasible viewpoints uniformly in free space with clearance, aimed at uncertainty."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    grid = volume.grid
    clear = _clearance(risk, params.risk_threshold).ravel()
    admissible = np.nonzero(clear >= params.agent_radius + 0.5 * grid.voxel_size)[0]
    if admissible.size < 0.01 * grid.n:
        raise RuntimeError("free space is below 1% of the volume; cannot sample candidates")
    out = []
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > params.max_attempts * n:
            raise RuntimeError("candidate sampling exceeded its attempt budget")
        v = admissible[rng.integers(admissible.size)]
        pos = grid.centers[v] + rng.uniform(-0.25, 0.25, size=3) * grid.voxel_size
        target = _view_target(pos, volume, params, rng)
        if target is None:
            continue
        pose = look_at(pos, target)
        pose = yaw_rotate(pose, rng.uniform(-params.yaw_jitter, params.yaw_jitter))
        out.append(CandidateViewpoint(pose, id=len(out), target=target, clearance=float(clear[v])))
    return out


def ray_fan(intr, ray_budget):
    """Unit camera-frame directions of a uniform nx x ny fan across the image."""
    nx, ny = ray_budget
    if nx <= 0 or ny <= 0:
        return np.zeros((0, 3))
    us = (np.arange(nx) + 0.5) / nx * intr.width
    vs = (np.arange(ny) + 0.5) / ny * intr.height
    uu, vv = np.meshgrid(us, vs)
    d = np.stack([(uu - intr.cx) / intr.fx, (vv - intr.cy) / intr.fy, np.ones_like(uu)], -1)
    d = d.reshape(-1, 3)
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def visible_voxels(pose, volume, intr, ray_budget, occ_threshold=0.65, max_range=None):
    """Voxel ids reached by the ray fan before (and including) the first occupied voxel."""
    dirs_c = ray_fan(intr, ray_budget)
    if len(dirs_c) == 0:
        return np.zeros(0, dtype=np.int64)
    grid = volume.grid
    far = intr.far if max_range is None else max_range
    step = 0.5 * grid.voxel_size
    t = np.arange(intr.near, far + 1e-9, step)
    dirs = dirs_c @ pose.rotation.T
    pts = pose.translation + dirs[:, None, :] * t[None, :, None]
    idx = grid.flat_index(pts.reshape(-1, 3)).reshape(len(dirs), len(t))
    outside = idx < 0
    occ = np.where(outside, 0.0, volume.occupancy[np.maximum(idx, 0)])
    stop = outside | (occ >= occ_threshold)
    first = np.where(stop.any(axis=1), np.argmax(stop, axis=1), len(t))
    upto = np.arange(len(t))[None, :] <= first[:, None]
    keep = upto & ~outside
    return np.unique(idx[keep])


def voxel_weight(volume, params, ids=None):
    u = volume.u_final if ids is None else volume.u_final[ids]
    h = volume.entropy if ids is None else volume.entropy[ids]
    return params.alpha * u + params.beta * h


def nbv_reward(visible, volume, params):
    """Reward and its diagnostic split into u_final / implicit-entropy / explicit-entropy parts."""
    if visible is None or len(visible) == 0:
        return 0.0, {"u_part": 0.0, "imp_part": 0.0, "exp_part": 0.0}
    free = 1.0 - volume.occupancy[visible]
    r = float(np.sum(voxel_weight(volume, params, visible) * free))
    diag = {
        "u_part": float(np.sum(params.alpha * volume.u_final[visible] * free)),
        "imp_part": float(np.sum(params.beta * volume.H_imp[visible] * free)),
        "exp_part": float(np.sum(params.beta * volume.H_exp[visible] * free)),
    }
    return r, diag


def score_candidates(candidates, volume, intr, params):
    for c in candidates:
        c.visible = visible_voxels(c.pose, volume, intr, params.ray_budget, params.occ_threshold)
        c.reward, c.diagnostics = nbv_reward(c.visible, volume, params)
    return candidates


def select_nbv(candidates, current_position=None):
    """Max-reward feasible candidate; ties by distance then id. Falls back to max clearance."""
    if not candidates:
        raise ValueError("no candidates")
    cur = np.zeros(3) if current_position is None else np.asarray(current_position)
    feas = [c for c in candidates if c.feasible]
    if not feas:
        best = max(candidates, key=lambda c: (c.clearance, -c.id))
        best.diagnostics["degraded"] = True
        return best

    def key(c):
        return (-c.reward, float(np.linalg.norm(c.position - cur)), c.id)

    return min(feas, key=key)


# ----------------------------------------------------------------------------
# RRT*


class _RewardLattice:
    """Lazily evaluated, cached normalised reward of coarse poses looking toward a target."""

    def __init__(self, volume, intr, params, target, ref):
        self.volume, self.intr, self.params = volume, intr, params
        self.target = np.asarray(target)
        self.ref = ref
        self.cache = {}

    def __call__(self, points):
        h = self.params.reward_lattice
        keys = np.round(np.asarray(points) / h).astype(np.int64)
        out = np.empty(len(keys))
        for i, k in enumerate(map(tuple, keys)):
            if k not in self.cache:
                self.cache[k] = self._eval(np.asarray(k) * h)
            out[i] = self.cache[k]
        return out

    def _eval(self, p):
        if self.ref <= 0 or np.linalg.norm(self.target - p) < 1e-6:
            return 0.0
        pose = look_at(p, self.target)
        vis = visible_voxels(pose, self.volume, self.intr, self.params.reward_rays,
                             self.params.occ_threshold)
        r, _ = nbv_reward(vis, self.volume, self.params)
        return min(1.0, r / self.ref)


def _edge(a, b, risk, reward, params, exempt_start=False):
    """(feasible, cost, travel, risk_part, reward_part) of the straight segment a->b."""
    L = float(np.linalg.norm(b - a))
    if L < 1e-12:
        return True, 0.0, 0.0, 0.0, 0.0
    ds = 0.5 * risk.grid.voxel_size
    n = max(1, int(math.ceil(L / ds)))
    t = (np.arange(n) + 0.5) / n
    pts = a + t[:, None] * (b - a)
    rk = risk.at(np.vstack([pts, b[None]]))
    check = rk
    if exempt_start:
        # the agent may start inside an unmapped, hence risky, voxel; let it leave
        tt = np.append(t, 1.0) * L
        check = rk[tt > params.start_exempt]
    if np.any(check >= params.risk_threshold):
        return False, math.inf, L, 0.0, 0.0
    rk = rk[:-1]
    seg = L / n
    rw = reward(pts) if (reward is not None and params.eta > 0) else np.zeros(n)
    risk_part = params.lam * float(np.sum(rk)) * seg
    reward_part = params.eta * float(np.sum(rw)) * seg
    return True, L + risk_part - reward_part, L, risk_part, reward_part


def _path_cost(points, risk, reward, params):
    tot = np.zeros(4)
    for a, b in zip(points[:-1], points[1:]):
        ok, c, L, rp, wp = _edge(a, b, risk, reward, params)
        tot += (c, L, rp, wp)
    return tot


def plan_path(start, goal, risk, volume, params, seed=0, intr=None, reward=None):
    """Risk-aware RRT* from ``start`` (Pose) to ``goal`` (CandidateViewpoint)."""
    rng = np.random.default_rng(seed)
    s = np.asarray(start.translation, dtype=np.float64)
    g = np.asarray(goal.position, dtype=np.float64)
    target = goal.target if goal.target is not None else g + goal.pose.forward
    if np.linalg.norm(g - s) < 1e-9:
        return PathPlan([g.copy()], [goal.pose], True,
                        {"C_travel": 0.0, "C_risk": 0.0, "reward": 0.0, "total": 0.0},
                        {"iterations": 0, "tree_size": 1, "cost_trace": [0.0]})
    if reward is None and intr is not None and params.eta > 0:
        vis = visible_voxels(goal.pose, volume, intr, params.reward_rays, params.occ_threshold)
        ref, _ = nbv_reward(vis, volume, params)
        reward = _RewardLattice(volume, intr, params, target, ref)

    lo, hi = risk.grid.origin, risk.grid.upper
    nodes = [s]
    parent = [-1]
    cost = [0.0]
    children = [[]]
    best_goal, best_cost = -1, math.inf
    trace = []

    def edge(i, p):
        return _edge(nodes[i], p, risk, reward, params, exempt_start=(i == 0))

    def propagate(i, delta):
        stack = list(children[i])
        while stack:
            j = stack.pop()
            cost[j] += delta
            stack.extend(children[j])

    tree = None
    rebuild_every = 25
    pts_arr = np.asarray(nodes)
    for it in range(params.rrt_iters):
        if rng.uniform() < params.goal_bias:
            x = g.copy()
        else:
            x = rng.uniform(lo, hi)
        pts_arr = np.asarray(nodes)
        d = np.linalg.norm(pts_arr - x, axis=1)
        near_i = int(np.argmin(d))
        v = x - nodes[near_i]
        dist = np.linalg.norm(v)
        new = x if dist <= params.step else nodes[near_i] + v * (params.step / dist)
        if risk.at(new[None])[0] >= params.risk_threshold:
            trace.append(best_cost)
            continue
        dn = np.linalg.norm(pts_arr - new, axis=1)
        near = np.nonzero(dn <= params.rewire_radius)[0]
        if near_i not in near:
            near = np.append(near, near_i)
        best_p, best_c = -1, math.inf
        edge_cost = {}
        for j in near[np.argsort(dn[near], kind="stable")]:
            ok, c, *_ = edge(j, new)
            edge_cost[j] = c if ok else math.inf
            if ok and cost[j] + c < best_c:
                best_p, best_c = j, cost[j] + c
        if best_p < 0:
            trace.append(best_cost)
            continue
        k = len(nodes)
        nodes.append(new)
        parent.append(best_p)
        cost.append(best_c)
        children.append([])
        children[best_p].append(k)
        # rewire
        for j in near:
            if j == best_p or j == 0:
                continue
            ok, c, *_ = _edge(new, nodes[j], risk, reward, params)
            if ok and best_c + c < cost[j] - 1e-12:
                delta = best_c + c - cost[j]
                children[parent[j]].remove(j)
                parent[j] = k
                children[k].append(j)
                cost[j] += delta
                propagate(j, delta)
        # goal bookkeeping over all nodes in the goal region (costs may have dropped)
        in_goal = np.nonzero(np.linalg.norm(np.asarray(nodes) - g, axis=1) <= params.goal_radius)[0]
        if in_goal.size:
            cs = np.asarray(cost)[in_goal]
            i_b = int(in_goal[np.argmin(cs)])
            if cost[i_b] <= best_cost:
                best_goal, best_cost = i_b, cost[i_b]
        trace.append(best_cost)

    stats = {"iterations": params.rrt_iters, "tree_size": len(nodes), "cost_trace": trace}
    if best_goal < 0:
        dists = np.linalg.norm(np.asarray(nodes) - g, axis=1)
        stats["closest_to_goal"] = float(dists.min())
        return PathPlan([s.copy()], [start], False, {}, stats)

    chain = []
    i = best_goal
    while i >= 0:
        chain.append(nodes[i])
        i = parent[i]
    chain = chain[::-1]
    ok, *_ = _edge(chain[-1], g, risk, reward, params)
    if ok and np.linalg.norm(chain[-1] - g) > 1e-12:
        chain.append(g.copy())
    chain = _shortcut(chain, risk, reward, params)
    wps = _resample(chain, params.step)
    orient = [look_at(p, target) if np.linalg.norm(target - p) > 1e-6 else goal.pose for p in wps]
    if np.linalg.norm(wps[-1] - g) < 1e-9:
        orient[-1] = goal.pose
    tot = _path_cost(wps, risk, reward, params)
    costs = {"total": float(tot[0]), "C_travel": float(tot[1]), "C_risk": float(tot[2]),
             "reward": float(tot[3])}
    return PathPlan(wps, orient, True, costs, stats)


def _shortcut(chain, risk, reward, params):
    """Greedy shortcutting that only accepts straight segments no costlier than the detour."""
    out = [chain[0]]
    i = 0
    while i < len(chain) - 1:
        nxt = i + 1
        for j in range(len(chain) - 1, i + 1, -1):
            ok, c, *_ = _edge(chain[i], chain[j], risk, reward, params, exempt_start=(i == 0))
            if ok and c <= _path_cost(chain[i:j + 1], risk, reward, params)[0] + 1e-12:
                nxt = j
                break
        out.append(chain[nxt])
        i = nxt
    return out


def _resample(chain, step):
    out = [np.asarray(chain[0], dtype=np.float64)]
    for a, b in zip(chain[:-1], chain[1:]):
        L = np.linalg.norm(b - a)
        n = max(1, int(math.ceil(L / step - 1e-9)))
        for k in range(1, n + 1):
            out.append(a + (b - a) * (k / n))
    return out


# ----------------------------------------------------------------------------
# export


def write_trajectory_csv(path, poses, times=None):
    """Rows of t, x, y, z, qx, qy, qz, qw."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "x", "y", "z", "qx", "qy", "qz", "qw"])
        for i, p in enumerate(poses):
            t = i if times is None else times[i]
            q = p.quaternion()
            w.writerow([t] + [f"{v:.9f}" for v in p.translation] + [f"{v:.9f}" for v in q])


def frontier_goal(volume, risk, observed, params, current, seed=0):
    """Nearest free observed voxel adjacent to never-observed space, looking into it."""
    grid = volume.grid
    free = risk.free_mask(params.risk_threshold)
    clear = _clearance(risk, params.risk_threshold).ravel()
    unknown = (~observed).reshape(grid.shape)
    near_unknown = grey_dilation(unknown.astype(np.uint8), size=(3, 3, 3)).ravel() > 0
    cand = np.nonzero(free & observed & near_unknown
                      & (clear >= params.agent_radius + 0.5 * grid.voxel_size))[0]
    if cand.size == 0:
        return None
    c = grid.centers[cand]
    d = np.linalg.norm(c - current, axis=1)
    d = np.where(d < params.view_range[0], np.inf, d)
    if not np.isfinite(d).any():
        d = np.linalg.norm(c - current, axis=1)
    order = np.lexsort((cand, d))
    v = cand[order[0]]
    pos = grid.centers[v]
    unk = np.nonzero(~observed)[0]
    tree = cKDTree(grid.centers[unk])
    _, j = tree.query(pos, k=min(27, len(unk)))
    tgt = grid.centers[unk[np.atleast_1d(j)]].mean(axis=0)
    if np.linalg.norm(tgt - pos) < 1e-6:
        tgt = pos + np.array([1.0, 0.0, 0.0])
    # look a little past the frontier so the camera faces the unknown region
    direction = (tgt - pos) / np.linalg.norm(tgt - pos)
    target = pos + direction * max(params.view_range[0], 1.0)
    return CandidateViewpoint(look_at(pos, target), id=0, target=target, clearance=float(clear[v]))
