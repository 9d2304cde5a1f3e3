"""Implicit branch: dense trilinear feature grid decoded by a small MLP.

The trunk is two hidden layers (ReLU) shared by three linear heads: SDF,
colour (sigmoid) and variance (softplus + floor).  Trunk biases and the SDF /
variance head biases are frozen, so a vertex whose features are still at their
(tiny) initial values decodes to ``s ~ 0`` and ``var ~ softplus(prior)``.  This
keeps never-observed space at maximal occupancy entropy and prior variance.

Gradients are written out by hand (reverse mode) and verified against
central finite differences by :func:`grad_check`.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

log = logging.getLogger(__name__)

TRAINABLE_DEFAULT = ("features", "W1", "W2", "Ws", "Wc", "bc", "Wu")
PARAM_ORDER = ("features", "W1", "b1", "W2", "b2", "Ws", "bs", "Wc", "bc", "Wu", "bu")


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(x):
    return np.logaddexp(0.0, x)


def inv_softplus(y):
    out = np.log(np.expm1(y))
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class ImplicitHyperparams:
    tau: float = 0.3  # L_sdf truncation band
    d_trunc: float = 7.5  # depth validity cutoff
    lambda_rgb: float = 1.0
    lambda_depth: float = 1.0
    lambda_sdf: float = 10.0
    lambda_free: float = 10.0
    lambda_uncert: float = 0.05
    lr: float = 5e-3
    n_samples: int = 24
    n_rays: int = 256
    invalid_ray_weight: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        for name in ("lambda_rgb", "lambda_depth", "lambda_sdf", "lambda_free", "lambda_uncert"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def tr(self):
        return self.tau / 4.0

    def scaled(self, k):
        d = asdict(self)
        for name in ("lambda_rgb", "lambda_depth", "lambda_sdf", "lambda_free", "lambda_uncert"):
            d[name] *= k
        return ImplicitHyperparams(**d)


# ----------------------------------------------------------------------------
# feature grid


@dataclass
class FeatureGrid:
    origin: np.ndarray
    cell_size: float
    resolution: tuple
    features: np.ndarray

    @classmethod
    def covering(cls, bounds, cell_size, n_features=8, init_std=1e-2, rng=None):
        lo, hi = np.asarray(bounds, dtype=np.float64)
        res = tuple(max(2, int(np.ceil((h - l) / cell_size - 1e-9))) for l, h in zip(lo, hi))
        rng = np.random.default_rng(0) if rng is None else rng
        feats = rng.normal(0.0, init_std, size=(res[0] + 1, res[1] + 1, res[2] + 1, n_features))
        return cls(lo.copy(), float(cell_size), res, feats)

    @property
    def n_features(self):
        return self.features.shape[-1]

    @property
    def upper(self):
        return self.origin + self.cell_size * np.asarray(self.resolution)

    def corners(self, p):
        """Flat vertex ids (N,8), weights (N,8) and d(weight)/dp (N,8,3)."""
        p = np.atleast_2d(np.asarray(p, dtype=np.float64))
        res = np.asarray(self.resolution)
        g = (p - self.origin) / self.cell_size
        inside = (g >= 0) & (g <= res)
        g = np.clip(g, 0, res)
        i0 = np.minimum(np.floor(g).astype(np.int64), res - 1)
        f = g - i0
        nx, ny, nz = res + 1
        ids = np.empty((len(p), 8), dtype=np.int64)
        w = np.empty((len(p), 8))
        dw = np.empty((len(p), 8, 3))
        k = 0
        for dx in (0, 1):
            wx = f[:, 0] if dx else 1 - f[:, 0]
            sx = 1.0 if dx else -1.0
            for dy in (0, 1):
                wy = f[:, 1] if dy else 1 - f[:, 1]
                sy = 1.0 if dy else -1.0
                for dz in (0, 1):
                    wz = f[:, 2] if dz else 1 - f[:, 2]
                    sz = 1.0 if dz else -1.0
                    ids[:, k] = ((i0[:, 0] + dx) * ny + (i0[:, 1] + dy)) * nz + (i0[:, 2] + dz)
                    w[:, k] = wx * wy * wz
                    dw[:, k, 0] = sx * wy * wz
                    dw[:, k, 1] = wx * sy * wz
                    dw[:, k, 2] = wx * wy * sz
                    k += 1
        dw *= inside[:, None, :] / self.cell_size
        return ids, w, dw


def encode(grid, p):
    """Trilinear blend of the 8 surrounding vertex features (clamped to the grid)."""
    ids, w, _ = grid.corners(p)
    flat = grid.features.reshape(-1, grid.n_features)
    return np.einsum("nk,nkf->nf", w, flat[ids])


# ----------------------------------------------------------------------------
# field


@dataclass
class ImplicitField:
    grid: FeatureGrid
    params: dict
    activation: str = "relu"
    sigma2_min: float = 1e-4
    trainable: tuple = TRAINABLE_DEFAULT
    adam: dict = field(default_factory=dict)
    step: int = 0
    warnings: dict = field(default_factory=lambda: {"no_valid_rays": 0, "flagged_rays": 0})

    @classmethod
    def create(cls, bounds, cell_size=0.1, n_features=8, hidden=32, prior_var=1.0, seed=0,
               feature_init_std=1e-2, activation="relu"):
        rng = np.random.default_rng(seed)
        grid = FeatureGrid.covering(bounds, cell_size, n_features, feature_init_std, rng)
        f, h = n_features, hidden
        params = {
            "features": grid.features,
            "W1": rng.normal(0, np.sqrt(2.0 / f), size=(f, h)),
            "b1": np.zeros(h),
            "W2": rng.normal(0, np.sqrt(2.0 / h), size=(h, h)),
            "b2": np.zeros(h),
            "Ws": rng.normal(0, np.sqrt(1.0 / h), size=(h, 1)),
            "bs": np.zeros(1),
            "Wc": rng.normal(0, np.sqrt(1.0 / h), size=(h, 3)),
            "bc": np.zeros(3),
            "Wu": rng.normal(0, np.sqrt(1.0 / h), size=(h, 1)),
            "bu": np.array([inv_softplus(prior_var)]),
        }
        return cls(grid, params, activation)

    # -- forward -----------------------------------------------------------

    def _act(self, x):
        return np.maximum(x, 0.0) if self.activation == "relu" else x

    def _dact(self, x):
        return (x > 0).astype(np.float64) if self.activation == "relu" else np.ones_like(x)

    def forward(self, p):
        P = self.params
        ids, w, dw = self.grid.corners(p)
        flat = P["features"].reshape(-1, self.grid.n_features)
        feat = np.einsum("nk,nkf->nf", w, flat[ids])
        a1 = feat @ P["W1"] + P["b1"]
        h1 = self._act(a1)
        a2 = h1 @ P["W2"] + P["b2"]
        h2 = self._act(a2)
        s = (h2 @ P["Ws"])[:, 0] + P["bs"][0]
        craw = h2 @ P["Wc"] + P["bc"]
        c = sigmoid(craw)
        uraw = (h2 @ P["Wu"])[:, 0] + P["bu"][0]
        var = softplus(uraw) + self.sigma2_min
        cache = dict(ids=ids, w=w, dw=dw, feat=feat, a1=a1, h1=h1, a2=a2, h2=h2, c=c, uraw=uraw)
        return s, c, var, cache

    def eval(self, p, chunk=65536):
        """Return (sdf, colour, variance) at points ``p`` (N,3)."""
        p = np.atleast_2d(p)
        outs = [self.forward(p[i:i + chunk])[:3] for i in range(0, len(p), chunk)]
        return tuple(np.concatenate(o) for o in zip(*outs))

    def sdf(self, p, chunk=65536):
        return self.eval(p, chunk)[0]

    def variance(self, p, chunk=65536):
        return self.eval(p, chunk)[2]

    def backward(self, cache, ds=None, dc=None, dvar=None):
        """Parameter gradients given upstream gradients on s (N,), c (N,3), var (N,)."""
        P = self.params
        n = cache["feat"].shape[0]
        ds = np.zeros(n) if ds is None else ds
        dc = np.zeros((n, 3)) if dc is None else dc
        dvar = np.zeros(n) if dvar is None else dvar
        h2 = cache["h2"]
        dcraw = dc * cache["c"] * (1.0 - cache["c"])
        duraw = dvar * sigmoid(cache["uraw"])
        g = {
            "Ws": h2.T @ ds[:, None], "bs": np.array([ds.sum()]),
            "Wc": h2.T @ dcraw, "bc": dcraw.sum(axis=0),
            "Wu": h2.T @ duraw[:, None], "bu": np.array([duraw.sum()]),
        }
        dh2 = ds[:, None] * P["Ws"][:, 0] + dcraw @ P["Wc"].T + duraw[:, None] * P["Wu"][:, 0]
        da2 = dh2 * self._dact(cache["a2"])
        g["W2"] = cache["h1"].T @ da2
        g["b2"] = da2.sum(axis=0)
        dh1 = da2 @ P["W2"].T
        da1 = dh1 * self._dact(cache["a1"])
        g["W1"] = cache["feat"].T @ da1
        g["b1"] = da1.sum(axis=0)
        dfeat = da1 @ P["W1"].T
        F = self.grid.n_features
        flat_ids = (cache["ids"][:, :, None] * F + np.arange(F)).ravel()
        vals = (cache["w"][:, :, None] * dfeat[:, None, :]).ravel()
        gf = np.bincount(flat_ids, weights=vals, minlength=P["features"].size)
        g["features"] = gf.reshape(P["features"].shape)
        g["_dfeat"] = dfeat
        return g

    def sdf_and_grad(self, p):
        """SDF values and spatial gradients d s / d p at points (N,3)."""
        s, _, _, cache = self.forward(p)
        P = self.params
        dh2 = np.broadcast_to(P["Ws"][:, 0], cache["h2"].shape)
        da2 = dh2 * self._dact(cache["a2"])
        da1 = (da2 @ P["W2"].T) * self._dact(cache["a1"])
        dfeat = da1 @ P["W1"].T
        flat = P["features"].reshape(-1, self.grid.n_features)
        # d feat / d p = sum_k F[ids_k] (x) dw_k
        dfeat_dp = np.einsum("nkf,nkd->nfd", flat[cache["ids"]], cache["dw"])
        return s, np.einsum("nf,nfd->nd", dfeat, dfeat_dp)

    # -- parameters ----------------------------------------------------------

    def copy(self):
        params = {k: v.copy() for k, v in self.params.items()}
        grid = FeatureGrid(self.grid.origin.copy(), self.grid.cell_size, self.grid.resolution,
                           params["features"])
        adam = {k: (m.copy(), v.copy()) for k, (m, v) in self.adam.items()}
        return ImplicitField(grid, params, self.activation, self.sigma2_min, self.trainable,
                             adam, self.step, dict(self.warnings))

    def n_parameters(self):
        return sum(self.params[k].size for k in self.trainable)


# ----------------------------------------------------------------------------
# rays


@dataclass
class RayBatch:
    origins: np.ndarray
    dirs: np.ndarray
    gt_color: np.ndarray
    gt_depth: np.ndarray
    valid: np.ndarray
    weight: np.ndarray
    z: np.ndarray

    def __len__(self):
        return len(self.origins)

    @property
    def n_samples(self):
        return self.z.shape[1]


def stratified(lo, hi, n, rng):
    """n jittered, strictly increasing samples per row in [lo, hi]."""
    u = (np.arange(n) + rng.uniform(0.05, 0.95, size=(len(lo), n))) / n
    return lo[:, None] + (hi - lo)[:, None] * u


def sample_depths(gt_depth, valid, near, far, tau, n, rng):
    """Per-ray sample depths: half in free space, half in the +-tau surface band."""
    r = len(gt_depth)
    z = np.empty((r, n))
    n_free = n // 2
    has_free = valid & (gt_depth - tau > near + 1e-3)
    band_lo = np.where(has_free, gt_depth - tau, near)
    band_hi = np.minimum(gt_depth + tau, far)
    idx = np.nonzero(has_free)[0]
    if idx.size:
        z[idx, :n_free] = stratified(np.full(idx.size, near), band_lo[idx], n_free, rng)
        z[idx, n_free:] = stratified(band_lo[idx], band_hi[idx], n - n_free, rng)
    idx = np.nonzero(valid & ~has_free)[0]
    if idx.size:
        z[idx] = stratified(np.full(idx.size, near), band_hi[idx], n, rng)
    idx = np.nonzero(~valid)[0]
    if idx.size:
        z[idx] = stratified(np.full(idx.size, near), np.full(idx.size, far), n, rng)
    return z


def make_ray_batch(frames, n_rays, hp, rng, frame_weights=None):
    """Sample ``n_rays`` random pixels across ``frames`` into a RayBatch."""
    frames = list(frames)
    probs = None if frame_weights is None else np.asarray(frame_weights) / np.sum(frame_weights)
    which = rng.choice(len(frames), size=n_rays, p=probs)
    parts = []
    for fi in range(len(frames)):
        k = int(np.sum(which == fi))
        if k == 0:
            continue
        fr = frames[fi]
        h, w = fr.intrinsics.shape
        pix = rng.integers(0, h * w, size=k)
        v, u = np.divmod(pix, w)
        d_cam = np.stack([(u + 0.5 - fr.intrinsics.cx) / fr.intrinsics.fx,
                          (v + 0.5 - fr.intrinsics.cy) / fr.intrinsics.fy, np.ones(k)], axis=1)
        d_cam /= np.linalg.norm(d_cam, axis=1, keepdims=True)
        parts.append((np.broadcast_to(fr.pose.translation, (k, 3)), d_cam @ fr.pose.rotation.T,
                      fr.image[v, u], fr.depth[v, u], fr.valid[v, u], fr.intrinsics))
    o = np.concatenate([p[0] for p in parts])
    d = np.concatenate([p[1] for p in parts])
    col = np.concatenate([p[2] for p in parts])
    dep = np.concatenate([p[3] for p in parts])
    val = np.concatenate([p[4] for p in parts])
    intr = frames[0].intrinsics
    z = sample_depths(dep, val, intr.near, intr.far, hp.tau, hp.n_samples, rng)
    wts = np.where(val, 1.0, hp.invalid_ray_weight)
    return RayBatch(o, d, col, dep, val, wts, z)


# ----------------------------------------------------------------------------
# rendering and losses


def render_weights(s, z, tr, tau, eps=1e-8):
    """Truncation-bell weights per sample, normalised per ray.

    Samples after the first one lying deeper than ``tau`` inside a solid are
    treated as occluded.  Rays with (almost) no weight are flagged.
    """
    sg = sigmoid(s / tr)
    bell = sg * (1.0 - sg)
    deep = s <= -tau
    gate = np.ones_like(s)
    gate[:, 1:] = np.cumsum(deep, axis=1)[:, :-1] == 0
    b = bell * gate
    W = b.sum(axis=1)
    flagged = W < eps
    return b, W, flagged, sg, gate


def volume_render_ray(s, c, z, tr, tau, far, background=None):
    """Render colour and depth for rays with per-sample sdf ``s`` (R,Ns), colour ``c`` (R,Ns,3)."""
    s = np.atleast_2d(s)
    z = np.atleast_2d(z)
    c = c.reshape(s.shape + (3,))
    bg = np.zeros(3) if background is None else np.asarray(background)
    b, W, flagged, _, _ = render_weights(s, z, tr, tau)
    Wsafe = np.where(flagged, 1.0, W)
    w = b / Wsafe[:, None]
    C = np.einsum("rn,rnc->rc", w, c)
    D = np.sum(w * z, axis=1)
    C[flagged] = bg
    D[flagged] = far
    return C, D, flagged


def _losses_and_grads(field, batch, hp, far, need_grad=True, pattern=False):
    R, Ns = batch.z.shape
    pts = batch.origins[:, None, :] + batch.z[..., None] * batch.dirs[:, None, :]
    s, c, var, cache = field.forward(pts.reshape(-1, 3))
    s = s.reshape(R, Ns)
    c = c.reshape(R, Ns, 3)
    var = var.reshape(R, Ns)
    tr = hp.tr
    b, W, flagged, sg, gate = render_weights(s, batch.z, tr, hp.tau)
    Wsafe = np.where(flagged, 1.0, W)
    w = b / Wsafe[:, None]
    C = np.einsum("rn,rnc->rc", w, c)
    D = np.sum(w * batch.z, axis=1)
    C[flagged] = 0.0
    D[flagged] = far
    field.warnings["flagged_rays"] += int(flagged.sum())

    N = R
    dep_ok = batch.valid & (batch.gt_depth <= hp.d_trunc)
    Nv = int(dep_ok.sum())
    if Nv == 0:
        field.warnings["no_valid_rays"] += 1

    cres = C - batch.gt_color
    L_rgb = float(np.sum(batch.weight * np.sum(cres ** 2, axis=1)) / N)

    r = D - batch.gt_depth
    ray_var = var.mean(axis=1)
    if Nv:
        L_depth = float(np.sum(r[dep_ok] ** 2) / Nv)
        L_uncert = float(np.sum(r[dep_ok] ** 2 / (2 * ray_var[dep_ok])
                                + 0.5 * np.log(ray_var[dep_ok])) / Nv)
    else:
        L_depth = L_uncert = 0.0

    target = batch.gt_depth[:, None] - batch.z
    band = dep_ok[:, None] & (np.abs(target) < hp.tau)
    free = dep_ok[:, None] & (target >= hp.tau)
    nM = int(band.sum())
    nF = int(free.sum())
    sres = s - target
    L_sdf = float(np.sum(sres[band] ** 2) / nM) if nM else 0.0
    hinge = np.maximum(0.0, hp.tau - s)
    L_free = float(np.sum(hinge[free] ** 2) / nF) if nF else 0.0

    L_total = (hp.lambda_rgb * L_rgb + hp.lambda_depth * L_depth + hp.lambda_sdf * L_sdf
               + hp.lambda_free * L_free + hp.lambda_uncert * L_uncert)
    losses = dict(L_rgb=L_rgb, L_depth=L_depth, L_sdf=L_sdf, L_free=L_free,
                  L_uncert=L_uncert, L_total=float(L_total))
    if pattern:
        # piecewise-linear switches; FD is only meaningful when none flip
        sig = np.concatenate([(cache["a1"] > 0).ravel(), (cache["a2"] > 0).ravel(),
                              gate.ravel() > 0, (hinge > 0).ravel(), flagged])
        return losses, sig
    if not need_grad:
        return losses, None

    # upstream gradients on rendered colour/depth and per-ray variance
    dC = (2.0 * hp.lambda_rgb / N) * batch.weight[:, None] * cres
    dD = np.zeros(R)
    dvar_ray = np.zeros(R)
    if Nv:
        dD[dep_ok] = (2.0 * hp.lambda_depth / Nv) * r[dep_ok]
        dD[dep_ok] += (hp.lambda_uncert / Nv) * r[dep_ok] / ray_var[dep_ok]
        dvar_ray[dep_ok] = (hp.lambda_uncert / Nv) * (
            -r[dep_ok] ** 2 / (2 * ray_var[dep_ok] ** 2) + 0.5 / ray_var[dep_ok])
    dC[flagged] = 0.0
    dD[flagged] = 0.0

    # through the normalised bell weights
    dw = np.einsum("rc,rnc->rn", dC, c - C[:, None, :]) + dD[:, None] * (batch.z - D[:, None])
    db = dw / Wsafe[:, None]
    db[flagged] = 0.0
    dbell_ds = gate * sg * (1 - sg) * (1 - 2 * sg) / tr
    ds = db * dbell_ds
    if nM:
        ds += np.where(band, (2.0 * hp.lambda_sdf / nM) * sres, 0.0)
    if nF:
        ds += np.where(free, (-2.0 * hp.lambda_free / nF) * hinge, 0.0)
    dc = w[..., None] * dC[:, None, :]
    dvar = np.broadcast_to((dvar_ray / Ns)[:, None], (R, Ns))
    grads = field.backward(cache, ds.ravel(), dc.reshape(-1, 3), dvar.ravel())
    return losses, grads


def implicit_losses(field, batch, hp, far=None):
    """Scalar loss terms for a ray batch."""
    if len(batch) == 0:
        raise ValueError("empty ray batch")
    far = float(batch.z.max()) if far is None else far
    return _losses_and_grads(field, batch, hp, far, need_grad=False)[0]


def loss_and_grad(field, batch, hp, far=None):
    far = float(batch.z.max()) if far is None else far
    return _losses_and_grads(field, batch, hp, far, need_grad=True)


LOSS_TERMS = ("rgb", "depth", "sdf", "free", "uncert")


def _only(hp, term):
    d = asdict(hp)
    for t in LOSS_TERMS:
        d[f"lambda_{t}"] = d[f"lambda_{t}"] if t == term else 0.0
    return ImplicitHyperparams(**d)


def train_step(field, batch, hp, far=None):
    """One Adam update on all trainable parameters. Returns the pre-update loss report."""
    losses, grads = loss_and_grad(field, batch, hp, far)
    report = dict(losses)
    report["aborted"] = False
    bad = [k for k in field.trainable if not np.all(np.isfinite(grads[k]))]
    if bad or not np.isfinite(losses["L_total"]):
        offending = "unknown"
        for term in LOSS_TERMS:
            _, g = loss_and_grad(field, batch, _only(hp, term), far)
            if any(not np.all(np.isfinite(g[k])) for k in field.trainable):
                offending = term
                break
        report["aborted"] = True
        report["offending_term"] = offending
        log.warning("train_step aborted: non-finite gradient from L_%s", offending)
        return field, report
    field.step += 1
    t = field.step
    for k in field.trainable:
        g = grads[k]
        m, v = field.adam.get(k, (np.zeros_like(g), np.zeros_like(g)))
        m = hp.beta1 * m + (1 - hp.beta1) * g
        v = hp.beta2 * v + (1 - hp.beta2) * g * g
        field.adam[k] = (m, v)
        if hp.lr == 0:
            continue
        mhat = m / (1 - hp.beta1 ** t)
        vhat = v / (1 - hp.beta2 ** t)
        field.params[k] -= hp.lr * mhat / (np.sqrt(vhat) + hp.adam_eps)
    return field, report


def grad_check(field, batch, hp, epsilon=1e-4, per_param=10, seed=0, far=None, max_tries=50):
    """Max relative error between analytic and central-difference gradients.

    Checks ``per_param`` random entries of every trainable array (feature
    entries are drawn from vertices touched by the batch).  The numeric
    gradient uses a fourth-order central stencil.  An entry whose +-epsilon
    or +-2 epsilon evaluations switch any ReLU, occlusion gate or hinge is
    redrawn, since a difference across a kink does not estimate the gradient.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    far = float(batch.z.max()) if far is None else far
    rng = np.random.default_rng(seed)
    _, grads = loss_and_grad(field, batch, hp, far)
    worst = 0.0
    checked = skipped = 0
    for name in field.trainable:
        arr = field.params[name]
        if name == "features":
            touched = np.nonzero(np.abs(grads[name]).reshape(-1) > 0)[0]
            pool = touched if touched.size else np.arange(arr.size)
        else:
            pool = np.arange(arr.size)
        order = rng.permutation(pool)
        flat = arr.reshape(-1)
        done = 0
        for i in order[:per_param + max_tries]:
            if done >= per_param:
                break
            old = flat[i]
            vals, pats = [], []
            for k in (2, 1, -1, -2):
                flat[i] = old + k * epsilon
                lk, pk = _losses_and_grads(field, batch, hp, far, pattern=True)
                vals.append(lk["L_total"])
                pats.append(pk)
            flat[i] = old
            if not all(np.array_equal(pats[0], q) for q in pats[1:]):
                skipped += 1
                continue
            # fourth-order central stencil
            num = (8.0 * (vals[1] - vals[2]) - (vals[0] - vals[3])) / (12.0 * epsilon)
            ana = grads[name].reshape(-1)[i]
            err = abs(num - ana) / (max(abs(num), abs(ana)) + 1e-8)
            worst = max(worst, err)
            checked += 1
            done += 1
    grad_check.last_count = checked
    grad_check.last_skipped = skipped
    return worst


# ----------------------------------------------------------------------------
# checkpoint
#
# Layout (all little-endian):
#   4 bytes  magic b"ARIF"
#   uint32   format version (1)
#   uint32   header length H
#   H bytes  UTF-8 JSON header: {"meta": {...}, "arrays": [{"name", "shape"}, ...]}
#   float64 payloads of every array in header order, C order

CKPT_MAGIC = b"ARIF"
CKPT_VERSION = 1


def save_checkpoint(field, path):
    arrays = [(k, field.params[k]) for k in PARAM_ORDER]
    meta = {"origin": field.grid.origin.tolist(), "cell_size": field.grid.cell_size,
            "resolution": list(field.grid.resolution), "activation": field.activation,
            "sigma2_min": field.sigma2_min, "trainable": list(field.trainable),
            "step": field.step}
    header = json.dumps({"meta": meta, "arrays": [{"name": k, "shape": list(a.shape)}
                                                  for k, a in arrays]}).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(header)))
        fh.write(header)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        if fh.read(4) != CKPT_MAGIC:
            raise ValueError("not an implicit-field checkpoint")
        version, hlen = struct.unpack("<II", fh.read(8))
        if version != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(fh.read(hlen))
        params = {}
        for spec in header["arrays"]:
            n = int(np.prod(spec["shape"]))
            params[spec["name"]] = np.frombuffer(fh.read(8 * n), dtype="<f8").astype(
                np.float64).reshape(spec["shape"])
    meta = header["meta"]
    grid = FeatureGrid(np.array(meta["origin"]), meta["cell_size"], tuple(meta["resolution"]),
                       params["features"])
    return ImplicitField(grid, params, meta["activation"], meta["sigma2_min"],
                         tuple(meta["trainable"]), step=meta["step"])
