"""Explicit branch: isotropic Gaussian splats.

Primitives are seeded by back-projecting depth, rendered by front-to-back
alpha compositing of their projected 2D footprints, and refined over a
window of frames.  Depth follows the sensor convention (ray length).

Also hosts the EWMA observed-SDF grid fused directly from depth frames.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import bilinear_sample, project
from .scene import backproject

log = logging.getLogger(__name__)

ALPHA_MIN, ALPHA_MAX = 0.005, 0.995
ALPHA_COMPOSITE_MAX = 1.0
CUTOFF_Q = 9.0  # (3 sigma)^2


@dataclass
class RenderOutput:
    image: np.ndarray
    depth: np.ndarray
    alpha: np.ndarray


@dataclass
class SplatParams:
    r_merge: float = 0.05
    alpha_init: float = 0.7
    s_min: float = 0.005
    s_max: float = 0.5
    radius_factor: float = 0.5
    cull_opacity: float = 0.02
    lr_mu: float = 2e-3
    lr_scale: float = 1e-3
    lr_opacity: float = 2e-2
    lr_color: float = 1e-2


class SplatMap:
    """Growable set of isotropic Gaussians with a KD-tree spatial index."""

    def __init__(self, bounds, params=None):
        self.bounds = np.asarray(bounds, dtype=np.float64).reshape(2, 3)
        self.params = params or SplatParams()
        self.mu = np.zeros((0, 3))
        self.scale = np.zeros(0)
        self.opacity = np.zeros(0)
        self.color = np.zeros((0, 3))
        self.frame_ids = np.zeros(0, dtype=np.int64)
        self.ids = np.zeros(0, dtype=np.int64)
        self.optimizable = np.zeros(0, dtype=bool)
        self.next_id = 0
        self.adam = {}
        self.adam_step = 0
        self.diagnostics = {"nonfinite_skipped": 0, "culled": 0}
        self._tree = None

    def __len__(self):
        return len(self.mu)

    def copy(self):
        out = SplatMap(self.bounds, self.params)
        for k in ("mu", "scale", "opacity", "color", "frame_ids", "ids", "optimizable"):
            setattr(out, k, getattr(self, k).copy())
        out.next_id = self.next_id
        out.adam = {k: (m.copy(), v.copy()) for k, (m, v) in self.adam.items()}
        out.adam_step = self.adam_step
        out.diagnostics = dict(self.diagnostics)
        out.rebuild_index()
        return out

    def rebuild_index(self):
        self._tree = cKDTree(self.mu) if len(self.mu) else None

    def has_neighbor(self, points, r):
        if self._tree is None or len(points) == 0:
            return np.zeros(len(points), dtype=bool)
        d, _ = self._tree.query(points, k=1, distance_upper_bound=r)
        return d <= r

    def add(self, mu, scale, opacity, color, frame_id=-1):
        n = len(mu)
        if n == 0:
            return 0
        p = self.params
        self.mu = np.concatenate([self.mu, np.clip(mu, self.bounds[0], self.bounds[1])])
        self.scale = np.concatenate([self.scale, np.clip(scale, p.s_min, p.s_max)])
        self.opacity = np.concatenate([self.opacity, np.clip(opacity, ALPHA_MIN, ALPHA_MAX)])
        self.color = np.concatenate([self.color, np.clip(color, 0.0, 1.0)])
        self.frame_ids = np.concatenate([self.frame_ids, np.full(n, frame_id, dtype=np.int64)])
        self.ids = np.concatenate([self.ids, self.next_id + np.arange(n, dtype=np.int64)])
        self.optimizable = np.concatenate([self.optimizable, np.ones(n, dtype=bool)])
        self.next_id += n
        for k, (m, v) in self.adam.items():
            pad = np.zeros((n,) + m.shape[1:])
            self.adam[k] = (np.concatenate([m, pad]), np.concatenate([v, pad]))
        self.rebuild_index()
        return n

    def keep(self, mask):
        for k in ("mu", "scale", "opacity", "color", "frame_ids", "ids", "optimizable"):
            setattr(self, k, getattr(self, k)[mask])
        self.adam = {k: (m[mask], v[mask]) for k, (m, v) in self.adam.items()}
        self.rebuild_index()

    def cull(self, min_opacity=None, redundant_radius=None):
        """Drop faint primitives; with ``redundant_radius`` only those with a kept neighbour."""
        thr = self.params.cull_opacity if min_opacity is None else min_opacity
        drop = self.opacity < thr
        if redundant_radius is not None and np.any(drop):
            keep_idx = np.nonzero(~drop)[0]
            if len(keep_idx) == 0:
                drop[:] = False
            else:
                d, _ = cKDTree(self.mu[keep_idx]).query(self.mu[drop], k=1)
                cand = np.nonzero(drop)[0]
                drop[cand[d > redundant_radius]] = False
        if np.any(drop):
            self.diagnostics["culled"] += int(drop.sum())
            self.keep(~drop)
        return int(drop.sum())


def spawn_from_frame(splat_map, frame, stride=4, mask=None):
    """Back-project every ``stride``-th valid pixel; skip points near existing primitives."""
    pts, cols, depth = backproject(frame, stride, mask)
    if len(pts) == 0:
        return 0
    p = splat_map.params
    inb = np.all((pts >= splat_map.bounds[0]) & (pts <= splat_map.bounds[1]), axis=1)
    pts, cols, depth = pts[inb], cols[inb], depth[inb]
    fresh = ~splat_map.has_neighbor(pts, p.r_merge)
    pts, cols, depth = pts[fresh], cols[fresh], depth[fresh]
    if len(pts) > 1:
        # suppress duplicates inside the batch (first come, first kept)
        pairs = cKDTree(pts).query_pairs(p.r_merge, output_type="ndarray")
        drop = np.zeros(len(pts), dtype=bool)
        if len(pairs):
            pairs = pairs[np.lexsort((pairs[:, 1], pairs[:, 0]))]
            for i, j in pairs:
                if not drop[i]:
                    drop[j] = True
        pts, cols, depth = pts[~drop], cols[~drop], depth[~drop]
    radius = p.radius_factor * stride * depth / frame.intrinsics.focal
    return splat_map.add(pts, radius, np.full(len(pts), p.alpha_init), cols, frame.id)


# ----------------------------------------------------------------------------
# rasterisation


def _segment_base(x, starts_mask):
    """Running ``cumsum(x)`` along axis 0 and, per element, its value just before the
    element's segment starts."""
    cs = np.cumsum(x, axis=0)
    before = cs - x
    seg_id = np.cumsum(starts_mask) - 1
    return cs, before[np.nonzero(starts_mask)[0]][seg_id]


def _rasterize(mu, scale, opacity, color, ids, pose, intr):
    h, w = intr.shape
    uv, Z, dist = project(mu, pose, intr)
    front = Z > intr.near
    Zs = np.where(front, Z, 1.0)
    sx = intr.fx * scale / Zs
    sy = intr.fy * scale / Zs
    u, v = uv[:, 0], uv[:, 1]
    x0 = np.ceil(u - 3 * sx - 0.5)
    x1 = np.floor(u + 3 * sx - 0.5)
    y0 = np.ceil(v - 3 * sy - 0.5)
    y1 = np.floor(v + 3 * sy - 0.5)
    with np.errstate(invalid="ignore"):
        x0 = np.clip(np.where(front, x0, 0), 0, w - 1)
        x1 = np.clip(np.where(front, x1, -1), -1, w - 1)
        y0 = np.clip(np.where(front, y0, 0), 0, h - 1)
        y1 = np.clip(np.where(front, y1, -1), -1, h - 1)
    nx = np.maximum(x1 - x0 + 1, 0).astype(np.int64)
    ny = np.maximum(y1 - y0 + 1, 0).astype(np.int64)
    cnt = nx * ny
    cnt[~front] = 0
    prim = np.repeat(np.arange(len(mu)), cnt)
    offs = np.concatenate([[0], np.cumsum(cnt)[:-1]])
    local = np.arange(prim.size) - np.repeat(offs, cnt)
    px = x0[prim].astype(np.int64) + local % nx[prim]
    py = y0[prim].astype(np.int64) + local // nx[prim]
    du = u[prim] - (px + 0.5)
    dv = v[prim] - (py + 0.5)
    q = du ** 2 / sx[prim] ** 2 + dv ** 2 / sy[prim] ** 2
    keep = q <= CUTOFF_Q
    prim, px, py, du, dv, q = prim[keep], px[keep], py[keep], du[keep], dv[keep], q[keep]
    pix = py * w + px
    zk = dist[prim]
    order = np.lexsort((ids[prim], zk, pix))
    prim, pix, du, dv, q, zk = prim[order], pix[order], du[order], dv[order], q[order], zk[order]
    g = np.exp(-0.5 * q)
    a_raw = opacity[prim] * g
    clamped = a_raw > ALPHA_COMPOSITE_MAX
    a = np.where(clamped, ALPHA_COMPOSITE_MAX, a_raw)
    starts = np.ones(pix.size, dtype=bool)
    starts[1:] = pix[1:] != pix[:-1]
    log1m = np.log1p(-np.minimum(a, 1.0 - 1e-15))  # keep fully opaque splats finite
    if pix.size:
        cs, base = _segment_base(log1m, starts)
        T = np.exp(cs - log1m - base)
    else:
        T = np.zeros(0)
    wk = T * a
    return dict(prim=prim, pix=pix, du=du, dv=dv, q=q, zk=zk, g=g, a=a, clamped=clamped,
                T=T, wk=wk, starts=starts, Z=Z, uv=uv, sx=sx, sy=sy, dist=dist, front=front)


def render_splats(splat_map, pose, intr, background=None, _ctx=None):
    """Alpha-composite the splat map into an image, expected depth and opacity."""
    if not pose.is_valid():
        raise ValueError("pose rotation is not orthonormal")
    h, w = intr.shape
    bg = np.zeros(3) if background is None else np.asarray(background, dtype=np.float64)
    n = h * w
    if len(splat_map) == 0:
        out = RenderOutput(np.broadcast_to(bg, (h, w, 3)).copy(), np.zeros((h, w)), np.zeros((h, w)))
        if _ctx is not None:
            _ctx.update(r=None, out=out, bg=bg)
        return out
    r = _rasterize(splat_map.mu, splat_map.scale, splat_map.opacity, splat_map.color,
                   splat_map.ids, pose, intr)
    pix, wk = r["pix"], r["wk"]
    A = np.bincount(pix, weights=wk, minlength=n)
    col = np.stack([np.bincount(pix, weights=wk * splat_map.color[r["prim"], c], minlength=n)
                    for c in range(3)], axis=1)
    Nz = np.bincount(pix, weights=wk * r["zk"], minlength=n)
    A = np.clip(A, 0.0, 1.0)
    img = col + (1.0 - A)[:, None] * bg
    covered = A > 1e-12
    depth = np.where(covered, Nz / np.where(covered, A, 1.0), 0.0)
    out = RenderOutput(img.reshape(h, w, 3), depth.reshape(h, w), A.reshape(h, w))
    if _ctx is not None:
        _ctx.update(r=r, out=out, bg=bg, A=A, Nz=Nz)
    return out


def _render_backward(splat_map, pose, intr, ctx, dimg, ddepth):
    """Gradients w.r.t. (mu, scale, opacity, color) given d/d image (H,W,3), d/d depth (H,W)."""
    N = len(splat_map)
    grads = {"mu": np.zeros((N, 3)), "scale": np.zeros(N), "opacity": np.zeros(N),
             "color": np.zeros((N, 3))}
    r = ctx["r"]
    if r is None or r["pix"].size == 0:
        return grads, np.zeros(N, dtype=bool)
    n = intr.width * intr.height
    prim, pix, wk, a, T, zk = r["prim"], r["pix"], r["wk"], r["a"], r["T"], r["zk"]
    starts = r["starts"]
    color = splat_map.color[prim]
    dimg = dimg.reshape(n, 3)
    ddepth = ddepth.reshape(n)
    A = ctx["A"]
    bg = ctx["bg"]
    Tfin = 1.0 - A
    depth = ctx["out"].depth.reshape(n)

    # colour
    for c in range(3):
        grads["color"][:, c] = np.bincount(prim, weights=wk * dimg[pix, c], minlength=N)

    # exclusive per-pixel suffix sums of w*c (3 channels) and w*z in one pass
    one_m = np.maximum(1.0 - a, 1e-12)
    x = wk[:, None] * np.column_stack([color, zk])
    cs, base = _segment_base(x, starts)
    seg = np.cumsum(starts) - 1
    ends = np.append(np.nonzero(starts)[0][1:], len(starts)) - 1
    total = (cs[ends] - base[np.nonzero(starts)[0]])[seg]
    suffix = total - (cs - base)
    tail = suffix[:, :3] + Tfin[pix][:, None] * bg
    dA = np.sum(dimg[pix] * (T[:, None] * color - tail / one_m[:, None]), axis=1)
    suffix_z = suffix[:, 3]
    Ap = A[pix]
    ok = Ap > 1e-12
    Asafe = np.where(ok, Ap, 1.0)
    dNz = T * zk - suffix_z / one_m
    dAcc = Tfin[pix] / one_m
    dD_da = np.where(ok, (dNz - depth[pix] * dAcc) / Asafe, 0.0)
    dD = ddepth[pix]
    dA += dD * dD_da
    dzk = np.where(ok, dD * wk / Asafe, 0.0)

    # through alpha = min(opacity * g, cap)
    live = ~r["clamped"]
    d_op = np.where(live, dA * r["g"], 0.0)
    dg = np.where(live, dA * splat_map.opacity[prim], 0.0)
    grads["opacity"] = np.bincount(prim, weights=d_op, minlength=N)
    dq = -0.5 * r["g"] * dg
    sx, sy = r["sx"][prim], r["sy"][prim]
    du_ = dq * 2 * r["du"] / sx ** 2
    dv_ = dq * 2 * r["dv"] / sy ** 2
    dsx_ = -dq * 2 * r["du"] ** 2 / sx ** 3
    dsy_ = -dq * 2 * r["dv"] ** 2 / sy ** 3
    du = np.bincount(prim, weights=du_, minlength=N)
    dv = np.bincount(prim, weights=dv_, minlength=N)
    dsx = np.bincount(prim, weights=dsx_, minlength=N)
    dsy = np.bincount(prim, weights=dsy_, minlength=N)
    dz = np.bincount(prim, weights=dzk, minlength=N)

    pc = pose.world_to_cam(splat_map.mu)
    X, Y, Z = pc[:, 0], pc[:, 1], np.where(r["front"], pc[:, 2], 1.0)
    fx, fy = intr.fx, intr.fy
    s = splat_map.scale
    dX = du * fx / Z
    dY = dv * fy / Z
    dZ = -du * fx * X / Z ** 2 - dv * fy * Y / Z ** 2 - dsx * fx * s / Z ** 2 - dsy * fy * s / Z ** 2
    grads["scale"] = dsx * fx / Z + dsy * fy / Z
    grads["mu"] = np.stack([dX, dY, dZ], axis=1) @ pose.rotation.T
    rel = splat_map.mu - pose.translation
    grads["mu"] += dz[:, None] * rel / np.maximum(r["dist"], 1e-12)[:, None]
    touched = np.bincount(prim, minlength=N) > 0
    return grads, touched


# ----------------------------------------------------------------------------
# losses


def _frame_terms(splat_map, frame, need_grad):
    ctx = {}
    out = render_splats(splat_map, frame.pose, frame.intrinsics, _ctx=ctx)
    m = frame.valid
    nv = int(m.sum())
    if nv == 0:
        log.warning("frame %s has no valid pixels; photometric/geometric terms are zero", frame.id)
        return 0.0, 0.0, None, None, ctx
    res_c = (out.image - frame.image) * m[..., None]
    covered = out.alpha > 1e-12
    res_d = (out.depth - frame.depth) * m
    e_photo = float(np.sum(res_c ** 2) / nv)
    e_geo = float(np.sum(res_d ** 2) / nv)
    if not need_grad:
        return e_photo, e_geo, None, None, ctx
    return e_photo, e_geo, 2.0 * res_c / nv, 2.0 * res_d * covered / nv, ctx


def _align_terms(splat_map, sel, field):
    if field is None or not np.any(sel):
        return 0.0, np.zeros((len(splat_map), 3))
    s, g = field.sdf_and_grad(splat_map.mu[sel])
    n = int(sel.sum())
    grad = np.zeros((len(splat_map), 3))
    grad[sel] = 2.0 * s[:, None] * g / n
    return float(np.mean(s ** 2)), grad


def _reg_terms(splat_map, sel):
    n = int(sel.sum())
    if n == 0:
        return 0.0, np.zeros(len(splat_map)), np.zeros(len(splat_map))
    a, s = splat_map.opacity[sel], splat_map.scale[sel]
    ga = np.zeros(len(splat_map))
    gs = np.zeros(len(splat_map))
    ga[sel] = s ** 2 / n
    gs[sel] = 2 * a * s / n
    return float(np.mean(a * s ** 2)), ga, gs


def splat_losses(splat_map, frame, field=None):
    """E_photo, E_geo over the frame's valid pixels; E_align, E_reg over primitives it sees."""
    e_photo, e_geo, _, _, ctx = _frame_terms(splat_map, frame, need_grad=False)
    vis = np.zeros(len(splat_map), dtype=bool)
    if ctx.get("r") is not None:
        vis[np.unique(ctx["r"]["prim"])] = True
    e_align, _ = _align_terms(splat_map, vis, field)
    e_reg, _, _ = _reg_terms(splat_map, vis)
    return {"E_photo": e_photo, "E_geo": e_geo, "E_align": e_align, "E_reg": e_reg}


DEFAULT_WEIGHTS = {"photo": 1.0, "geo": 1.0, "align": 0.1, "reg": 0.01}


def window_objective(splat_map, window, field=None, weights=None, need_grad=True):
    """E_total over a window of frames plus alignment/regulariser, with gradients."""
    wts = dict(DEFAULT_WEIGHTS, **(weights or {}))
    N = len(splat_map)
    grads = {"mu": np.zeros((N, 3)), "scale": np.zeros(N), "opacity": np.zeros(N),
             "color": np.zeros((N, 3))}
    visible = np.zeros(N, dtype=bool)
    total = 0.0
    terms = {"E_photo": 0.0, "E_geo": 0.0}
    for fr in window:
        e_photo, e_geo, dimg, ddep, ctx = _frame_terms(splat_map, fr, need_grad)
        terms["E_photo"] += e_photo
        terms["E_geo"] += e_geo
        total += wts["photo"] * e_photo + wts["geo"] * e_geo
        if ctx.get("r") is not None:
            visible[np.unique(ctx["r"]["prim"])] = True
        if need_grad and dimg is not None:
            g, _ = _render_backward(splat_map, fr.pose, fr.intrinsics, ctx,
                                    wts["photo"] * dimg, wts["geo"] * ddep)
            for k in grads:
                grads[k] += g[k]
    e_align, g_align = _align_terms(splat_map, visible, field)
    e_reg, ga, gs = _reg_terms(splat_map, visible)
    terms["E_align"] = e_align
    terms["E_reg"] = e_reg
    total += wts["align"] * e_align + wts["reg"] * e_reg
    terms["E_total"] = float(total)
    if need_grad:
        grads["mu"] += wts["align"] * g_align
        grads["opacity"] += wts["reg"] * ga
        grads["scale"] += wts["reg"] * gs
    return terms, grads, visible


def _contribution_pattern(splat_map, window):
    """Which (primitive, pixel) pairs contribute and which alphas are clamped."""
    parts = []
    for fr in window:
        ctx = {}
        render_splats(splat_map, fr.pose, fr.intrinsics, _ctx=ctx)
        r = ctx.get("r")
        if r is not None:
            parts += [r["prim"], r["pix"], r["clamped"].astype(np.int64)]
    return parts


def grad_check(splat_map, window, field=None, weights=None, epsilon=1e-4, per_param=16,
               seed=0, max_tries=50):
    """Max relative error between analytic and fourth-order central-difference gradients.

    Entries are drawn among primitives visible in the window.  An entry whose
    perturbation changes the footprint set (3 sigma cutoff) or an alpha clamp
    is redrawn.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    rng = np.random.default_rng(seed)
    _, grads, visible = window_objective(splat_map, window, field, weights)
    base = _contribution_pattern(splat_map, window)
    pool = np.nonzero(visible)[0]
    worst = 0.0
    checked = skipped = 0
    for name in PARAM_BOUNDS:
        arr = getattr(splat_map, name)
        width = 1 if arr.ndim == 1 else arr.shape[1]
        flat = arr.reshape(-1)
        cand = (pool[:, None] * width + np.arange(width)[None, :]).reshape(-1)
        done = 0
        for i in rng.permutation(cand)[:per_param + max_tries]:
            if done >= per_param:
                break
            old = flat[i]
            vals, same = [], True
            for k in (2, 1, -1, -2):
                flat[i] = old + k * epsilon
                vals.append(window_objective(splat_map, window, field, weights,
                                             need_grad=False)[0]["E_total"])
                pat = _contribution_pattern(splat_map, window)
                same &= len(pat) == len(base) and all(np.array_equal(a, b)
                                                      for a, b in zip(pat, base))
            flat[i] = old
            if not same:
                skipped += 1
                continue
            num = (8.0 * (vals[1] - vals[2]) - (vals[0] - vals[3])) / (12.0 * epsilon)
            ana = grads[name].reshape(-1)[i]
            worst = max(worst, abs(num - ana) / (max(abs(num), abs(ana)) + 1e-8))
            checked += 1
            done += 1
    grad_check.last_count = checked
    grad_check.last_skipped = skipped
    return worst


PARAM_BOUNDS = ("mu", "scale", "opacity", "color")


def _clamp(splat_map):
    p = splat_map.params
    np.clip(splat_map.mu, splat_map.bounds[0], splat_map.bounds[1], out=splat_map.mu)
    np.clip(splat_map.scale, p.s_min, p.s_max, out=splat_map.scale)
    np.clip(splat_map.opacity, ALPHA_MIN, ALPHA_MAX, out=splat_map.opacity)
    np.clip(splat_map.color, 0.0, 1.0, out=splat_map.color)


def optimize_window(splat_map, window, field=None, iters=10, weights=None,
                    beta1=0.9, beta2=0.999, eps=1e-8):
    """Adam on the primitives visible in the window. Returns the per-iteration E_total trace."""
    if not window:
        raise ValueError("window must contain at least one frame")
    p = splat_map.params
    lrs = {"mu": p.lr_mu, "scale": p.lr_scale, "opacity": p.lr_opacity, "color": p.lr_color}
    trace = []
    for _ in range(iters):
        terms, grads, visible = window_objective(splat_map, window, field, weights)
        trace.append(terms["E_total"])
        sel = visible & splat_map.optimizable
        bad = np.zeros(len(splat_map), dtype=bool)
        for k in grads:
            g = grads[k]
            bad |= ~np.all(np.isfinite(g.reshape(len(splat_map), -1)), axis=1)
        if np.any(bad & sel):
            splat_map.diagnostics["nonfinite_skipped"] += int((bad & sel).sum())
        sel &= ~bad
        splat_map.adam_step += 1
        t = splat_map.adam_step
        for k in PARAM_BOUNDS:
            arr = getattr(splat_map, k)
            g = grads[k]
            m, v = splat_map.adam.get(k, (np.zeros_like(arr), np.zeros_like(arr)))
            m[sel] = beta1 * m[sel] + (1 - beta1) * g[sel]
            v[sel] = beta2 * v[sel] + (1 - beta2) * g[sel] ** 2
            splat_map.adam[k] = (m, v)
            step = lrs[k] * (m[sel] / (1 - beta1 ** t)) / (np.sqrt(v[sel] / (1 - beta2 ** t)) + eps)
            arr[sel] -= step
        _clamp(splat_map)
    if iters:
        splat_map.rebuild_index()
    return trace


# ----------------------------------------------------------------------------
# observed SDF (explicit-only fusion)


class ObservedSdfGrid:
    """Voxel grid of EWMA-fused truncated depth discrepancies."""

    def __init__(self, grid, tau_band=0.3, ema=0.3):
        self.grid = grid
        self.tau_band = float(tau_band)
        self.ema = float(ema)
        self.values = np.zeros(grid.n)
        self.weights = np.zeros(grid.n)

    @property
    def centers(self):
        return self.grid.centers


def fuse_observed_sdf(grid, frame, continuity=0.1):
    """Fuse one frame into the observed-SDF grid; returns the number of voxels updated.

    Observations are ``clamp(D(pixel) - ray_length(voxel), +-tau_band)``; voxels
    lying more than ``tau_band`` behind the observed surface are left alone.
    """
    intr = frame.intrinsics
    uv, z, dist = project(grid.centers, frame.pose, intr)
    cand = (z > intr.near) & (dist >= intr.near) & (dist <= intr.far)
    cand &= (uv[:, 0] >= 0) & (uv[:, 0] <= intr.width) & (uv[:, 1] >= 0) & (uv[:, 1] <= intr.height)
    idx = np.nonzero(cand)[0]
    if idx.size == 0:
        return 0
    d, ok = bilinear_sample(frame.depth, uv[idx], frame.valid)
    # reject samples straddling depth discontinuities
    h, w = intr.shape
    x0 = np.clip(np.floor(uv[idx, 0] - 0.5).astype(int), 0, w - 2)
    y0 = np.clip(np.floor(uv[idx, 1] - 0.5).astype(int), 0, h - 2)
    taps = np.stack([frame.depth[y0, x0], frame.depth[y0, x0 + 1],
                     frame.depth[y0 + 1, x0], frame.depth[y0 + 1, x0 + 1]], axis=1)
    ok &= (taps.max(axis=1) - taps.min(axis=1)) < continuity * np.maximum(d, 1.0)
    obs = d - dist[idx]
    ok &= obs >= -grid.tau_band
    idx, obs = idx[ok], np.clip(obs[ok], -grid.tau_band, grid.tau_band)
    first = grid.weights[idx] == 0
    old = grid.values[idx]
    grid.values[idx] = np.where(first, obs, (1 - grid.ema) * old + grid.ema * obs)
    grid.weights[idx] += 1
    return int(idx.size)


# ----------------------------------------------------------------------------
# export


def export_ply(splat_map, path):
    """ASCII PLY point cloud with per-point radius, opacity and colour."""
    lines = ["ply", "format ascii 1.0", f"element vertex {len(splat_map)}",
             "property float x", "property float y", "property float z",
             "property float radius", "property float opacity",
             "property float red", "property float green", "property float blue", "end_header"]
    rows = np.column_stack([splat_map.mu, splat_map.scale, splat_map.opacity, splat_map.color])
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
        np.savetxt(fh, rows, fmt="%.9g")


def load_ply(path, bounds, params=None):
    with open(path) as fh:
        n = 0
        for line in fh:
            if line.startswith("element vertex"):
                n = int(line.split()[-1])
            if line.strip() == "end_header":
                break
        rows = np.loadtxt(fh, ndmin=2) if n else np.zeros((0, 8))
    m = SplatMap(bounds, params)
    m.add(rows[:, :3], rows[:, 3], rows[:, 4], rows[:, 5:8])
    return m
