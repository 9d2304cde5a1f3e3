"""Hierarchical uncertainty volume.

Three layers share one voxel grid:

* ``u_imp``  - variance head of the implicit field at voxel centres,
* ``u_exp``  - splat render residuals back-projected from selected views,
* ``u_time`` - change of the implicit SDF between keyframe snapshots,

fused into ``u_final``.  The same pass refreshes the hybrid occupancy and
entropy layers used by the planner.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.special import entr, expit

from .geometry import bilinear_sample, project
from .splats import render_splats

LAYERS = ("u_imp", "u_exp", "u_time", "u_final")


@dataclass
class FusionParams:
    alpha: tuple = (0.4, 0.4, 0.2)
    beta1: float = 1.0
    beta2: float = 0.5
    tau_s: float = 0.1
    tau_n: float = 0.05
    tau_c: float = 0.1
    tau_f: float = 0.05
    lambda_imp: float = 1.0
    lambda_exp: float = 1.0
    top_k: int = 4
    sigma_occ: float = 0.05
    w_depth: float = 1.0
    w_rgb: float = 0.25
    gate_voxels: float = 2.0
    exp_decay: float = 0.2
    u_exp_init: float = 1.0
    obs_range: float = 3.0

    def __post_init__(self):
        vals = list(self.alpha) + [self.beta1, self.beta2, self.lambda_imp, self.lambda_exp]
        if min(vals) < 0:
            raise ValueError("fusion weights must be non-negative")
        if sum(self.alpha) <= 0:
            raise ValueError("at least one fusion weight must be positive")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.sigma_occ <= 0:
            raise ValueError("sigma_occ must be positive")

    @property
    def alpha_normalized(self):
        a = np.asarray(self.alpha, dtype=np.float64)
        return a / a.sum()


@dataclass
class SdfSnapshot:
    values: np.ndarray
    frame_id: int = -1


@dataclass
class UncertaintyVolume:
    grid: object
    u_imp: np.ndarray = None
    u_exp: np.ndarray = None
    u_time: np.ndarray = None
    u_final: np.ndarray = None
    occupancy: np.ndarray = None
    entropy: np.ndarray = None
    p_F: np.ndarray = None
    p_G: np.ndarray = None
    H_imp: np.ndarray = None
    H_exp: np.ndarray = None
    extras: dict = field(default_factory=dict)

    @classmethod
    def empty(cls, grid, u_exp_init=1.0):
        n = grid.n
        half = np.full(n, 0.5)
        return cls(grid, u_imp=np.zeros(n), u_exp=np.full(n, float(u_exp_init)),
                   u_time=np.zeros(n), u_final=np.zeros(n), occupancy=half.copy(),
                   entropy=np.zeros(n), p_F=half.copy(), p_G=np.zeros(n),
                   H_imp=np.zeros(n), H_exp=np.zeros(n))

    def layer(self, name):
        return getattr(self, name)

    def stats(self):
        out = {}
        for name in LAYERS + ("occupancy", "entropy"):
            v = self.layer(name)
            out[f"{name}_mean"] = float(v.mean())
            out[f"{name}_max"] = float(v.max())
        return out

    def check(self):
        for name in LAYERS + ("entropy",):
            v = self.layer(name)
            if not (np.all(np.isfinite(v)) and np.all(v >= 0)):
                raise FloatingPointError(f"layer {name} is negative or non-finite")
        if np.any(self.occupancy < 0) or np.any(self.occupancy > 1):
            raise FloatingPointError("occupancy outside [0, 1]")


# ----------------------------------------------------------------------------
# implicit layer


def compute_u_imp(volume, field):
    """Variance head of the implicit field at voxel centres (already softplus-positive)."""
    u = field.variance(volume.grid.centers)
    volume.u_imp = np.maximum(u, 0.0)
    return volume.u_imp


# ----------------------------------------------------------------------------
# explicit layer


def residual_maps(splat_map, frame, render=None):
    """Absolute depth and summed RGB residuals of the splat render, zero off-mask."""
    out = render if render is not None else render_splats(splat_map, frame.pose, frame.intrinsics)
    m = frame.valid
    e_depth = np.where(m, np.abs(out.depth - frame.depth), 0.0)
    e_rgb = np.where(m, np.abs(out.image - frame.image).sum(axis=2), 0.0)
    return {"E_depth": e_depth, "E_rgb": e_rgb, "render": out}


def _gated_samples(grid, pose, intr, rendered_depth, band):
    """Voxels whose ray length matches the rendered depth within +-band. Returns (idx, uv)."""
    uv, z, dist = project(grid.centers, pose, intr)
    ok = (z > intr.near) & (uv[:, 0] >= 0) & (uv[:, 0] <= intr.width)
    ok &= (uv[:, 1] >= 0) & (uv[:, 1] <= intr.height)
    idx = np.nonzero(ok)[0]
    d_r, inb = bilinear_sample(rendered_depth, uv[idx], rendered_depth > 0)
    keep = inb & (np.abs(dist[idx] - d_r) <= band)
    return idx[keep], uv[idx[keep]]


def backproject_u_exp(volume, residuals, poses, intr, rendered_depths, params, prior=None):
    """Mean over views of gated, bilinearly sampled residual mixes added to ``prior``.

    ``residuals`` is a list of ``{"E_depth", "E_rgb"}`` dicts aligned with
    ``poses`` and ``rendered_depths``.  Voxels outside every view's surface
    band keep their prior value.
    """
    if len(residuals) == 0:
        raise ValueError("need at least one high-uncertainty view")
    grid = volume.grid
    base = volume.u_exp if prior is None else prior
    incr = np.zeros(grid.n)
    band = params.gate_voxels * grid.voxel_size
    for res, pose, d_r in zip(residuals, poses, rendered_depths):
        mix = params.w_depth * res["E_depth"] + params.w_rgb * res["E_rgb"]
        idx, uv = _gated_samples(grid, pose, intr, d_r, band)
        vals, _ = bilinear_sample(mix, uv)
        np.add.at(incr, idx, vals)
    incr /= len(residuals)
    volume.u_exp = np.maximum(base + incr, 0.0)
    volume.extras["u_exp_increment"] = incr
    return volume.u_exp


def observed_mask(grid, pose, intr, depth, valid, band, max_range=None):
    """Voxels seen as free space or surface (ray length <= observed depth + band).

    ``max_range`` optionally ignores voxels farther than that from the camera.
    """
    uv, z, dist = project(grid.centers, pose, intr)
    ok = (z > intr.near) & (uv[:, 0] >= 0) & (uv[:, 0] <= intr.width)
    ok &= (uv[:, 1] >= 0) & (uv[:, 1] <= intr.height)
    idx = np.nonzero(ok)[0]
    d, inb = bilinear_sample(depth, uv[idx], valid)
    out = np.zeros(grid.n, dtype=bool)
    ok = inb & (dist[idx] <= d + band)
    if max_range is not None:
        ok &= dist[idx] <= max_range
    out[idx[ok]] = True
    return out


# ----------------------------------------------------------------------------
# temporal layer


def temporal_masks(S_t, S_prev, params):
    s_t = S_t.values if isinstance(S_t, SdfSnapshot) else np.asarray(S_t)
    s_p = S_prev.values if isinstance(S_prev, SdfSnapshot) else np.asarray(S_prev)
    if s_t.shape != s_p.shape:
        raise ValueError("snapshots must share geometry")
    dS = s_t - s_p
    m_new = (s_t >= 0) & (s_t <= params.tau_s) & (dS > params.tau_n)
    m_change = np.abs(dS) > params.tau_c
    m_free = (s_t > params.tau_f) & (s_p < -params.tau_f)
    return {"M_new": m_new, "M_change": m_change, "M_free": m_free, "dS": dS}


def compute_u_time(volume, dS, masks, params):
    hit = masks["M_new"] | masks["M_change"] | masks["M_free"]
    volume.u_time = params.beta1 * np.abs(dS) + params.beta2 * hit
    return volume.u_time


# ----------------------------------------------------------------------------
# fusion and entropy


def fuse_final(volume, params):
    a = params.alpha_normalized
    volume.u_final = a[0] * volume.u_imp + a[1] * volume.u_exp + a[2] * volume.u_time
    return volume.u_final


def binary_entropy(p):
    """H[p] in nats with H[0] = H[1] = 0."""
    p = np.clip(p, 0.0, 1.0)
    return entr(p) + entr(1.0 - p)


def implicit_occupancy(sdf, sigma_occ):
    return expit(-np.asarray(sdf) / sigma_occ)


def splat_density(splat_map, points, chunk=200_000):
    """Sum of opacity-weighted isotropic normal densities, each truncated at 3 sigma."""
    points = np.asarray(points, dtype=np.float64)
    rho = np.zeros(len(points))
    if len(splat_map) == 0 or len(points) == 0:
        return rho
    from scipy.spatial import cKDTree

    tree = cKDTree(points)
    mu, s, a = splat_map.mu, splat_map.scale, splat_map.opacity
    hits = tree.query_ball_point(mu, 3.0 * s)
    counts = np.fromiter((len(h) for h in hits), dtype=np.int64, count=len(hits))
    if counts.sum() == 0:
        return rho
    prim = np.repeat(np.arange(len(mu)), counts)
    vox = np.fromiter(itertools.chain.from_iterable(hits), dtype=np.int64, count=int(counts.sum()))
    for i in range(0, len(prim), chunk):
        pr, vx = prim[i:i + chunk], vox[i:i + chunk]
        r2 = np.sum((points[vx] - mu[pr]) ** 2, axis=1)
        dens = a[pr] * (2 * np.pi * s[pr] ** 2) ** -1.5 * np.exp(-0.5 * r2 / s[pr] ** 2)
        rho += np.bincount(vx, weights=dens, minlength=len(points))
    return rho


def explicit_occupancy(splat_map, points):
    return -np.expm1(-splat_density(splat_map, points))


def hybrid_entropy(volume, field, splat_map, params, sdf=None):
    """Entropy of implicit and explicit occupancy; also refreshes O = max(p_F, p_G)."""
    centers = volume.grid.centers
    s = field.sdf(centers) if sdf is None else sdf
    p_f = implicit_occupancy(s, params.sigma_occ)
    p_g = explicit_occupancy(splat_map, centers)
    volume.p_F, volume.p_G = p_f, p_g
    volume.H_imp = params.lambda_imp * binary_entropy(p_f)
    volume.H_exp = params.lambda_exp * binary_entropy(p_g)
    volume.entropy = volume.H_imp + volume.H_exp
    volume.occupancy = np.maximum(p_f, p_g)
    return volume.entropy


def calibrate_fusion_weights(u_imp, u_exp, u_time, error, steps=10):
    """Grid search on the weight simplex maximising correlation with a realised error.

    Optional calibration for the fusion weights; returns the normalised triple.
    """
    best, best_r = (1 / 3, 1 / 3, 1 / 3), -np.inf
    err = np.asarray(error, dtype=np.float64)
    for i in range(steps + 1):
        for j in range(steps + 1 - i):
            a = np.array([i, j, steps - i - j]) / steps
            u = a[0] * u_imp + a[1] * u_exp + a[2] * u_time
            if np.std(u) == 0 or np.std(err) == 0:
                continue
            r = np.corrcoef(u, err)[0, 1]
            if r > best_r:
                best, best_r = tuple(a), r
    return best
