"""Analytic ground-truth scenes and a pinhole RGB-D sensor.

Scenes are unions of spheres, axis-aligned boxes and half-space planes.  The
signed distance is exact for single primitives and a min-union otherwise.
``render_rgbd`` sphere-traces the analytic SDF to produce frames.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, Pose, camera_rays, look_at

MAX_STEPS = 256
EPS_REL = 1e-4
BACKGROUND = np.zeros(3)


# ----------------------------------------------------------------------------
# primitives


@dataclass
class Sphere:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)

    def sdf(self, p):
        return np.linalg.norm(p - self.center, axis=-1) - self.radius

    def normal(self, p):
        d = p - self.center
        n = np.linalg.norm(d, axis=-1, keepdims=True)
        return d / np.maximum(n, 1e-12)

    def intersects(self, lo, hi):
        q = np.clip(self.center, lo, hi)
        return np.linalg.norm(q - self.center) <= self.radius

    def to_dict(self):
        return {"shape": "sphere", "center": self.center.tolist(), "radius": self.radius}


@dataclass
class Box:
    center: np.ndarray
    half_size: np.ndarray

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.half_size = np.asarray(self.half_size, dtype=np.float64)

    def sdf(self, p):
        q = np.abs(p - self.center) - self.half_size
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(np.max(q, axis=-1), 0.0)
        return outside + inside

    def normal(self, p):
        rel = p - self.center
        q = np.abs(rel) - self.half_size
        sgn = np.where(rel >= 0, 1.0, -1.0)
        out = np.maximum(q, 0.0)
        on = np.linalg.norm(out, axis=-1, keepdims=True)
        n_out = sgn * out / np.maximum(on, 1e-12)
        axis = np.argmax(q, axis=-1)
        n_in = np.zeros_like(p)
        np.put_along_axis(n_in, axis[..., None], 1.0, axis=-1)
        n_in *= sgn
        return np.where(on > 0, n_out, n_in)

    def intersects(self, lo, hi):
        return bool(np.all(self.center - self.half_size <= hi) and
                    np.all(self.center + self.half_size >= lo))

    def to_dict(self):
        return {"shape": "box", "center": self.center.tolist(),
                "half_size": self.half_size.tolist()}


@dataclass
class Plane:
    """Half-space solid ``normal . p < offset``; the free side is along ``normal``."""

    normal_vec: np.ndarray
    offset: float

    def __post_init__(self):
        n = np.asarray(self.normal_vec, dtype=np.float64)
        self.normal_vec = n / np.linalg.norm(n)

    def sdf(self, p):
        return p @ self.normal_vec - self.offset

    def normal(self, p):
        return np.broadcast_to(self.normal_vec, p.shape).copy()

    def intersects(self, lo, hi):
        corners = np.array([[x, y, z] for x in (lo[0], hi[0])
                            for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
        s = self.sdf(corners)
        return bool(s.min() <= 0.0 <= s.max())

    def to_dict(self):
        return {"shape": "plane", "normal": self.normal_vec.tolist(), "offset": self.offset}


def primitive_from_dict(d):
    shape = d["shape"]
    if shape == "sphere":
        return Sphere(d["center"], float(d["radius"]))
    if shape == "box":
        return Box(d["center"], d["half_size"])
    if shape == "plane":
        return Plane(d["normal"], float(d["offset"]))
    raise ValueError(f"unknown primitive shape {shape!r}")


# ----------------------------------------------------------------------------
# albedo


def _smooth(t):
    return t * t * (3.0 - 2.0 * t)


class ValueNoise:
    """Seeded 3D value noise in [0, 1] (lattice hash + smoothstep trilinear)."""

    def __init__(self, seed=0):
        rng = np.random.default_rng(seed)
        self.perm = rng.permutation(256)
        self.values = rng.random(256)

    def _hash(self, i, j, k):
        p = self.perm
        return self.values[p[(p[(p[i & 255] + j) & 255] + k) & 255]]

    def __call__(self, x):
        f = np.floor(x)
        i = f.astype(np.int64)
        t = _smooth(x - f)
        out = 0.0
        for dx in (0, 1):
            wx = t[..., 0] if dx else 1 - t[..., 0]
            for dy in (0, 1):
                wy = t[..., 1] if dy else 1 - t[..., 1]
                for dz in (0, 1):
                    wz = t[..., 2] if dz else 1 - t[..., 2]
                    out = out + wx * wy * wz * self._hash(i[..., 0] + dx, i[..., 1] + dy,
                                                          i[..., 2] + dz)
        return out


class Albedo:
    """Procedural colour function: ``checker`` or ``noise``."""

    def __init__(self, kind="noise", color_a=(0.25, 0.3, 0.45), color_b=(0.9, 0.75, 0.45),
                 size=0.5, seed=0, octaves=2, offset=0.5):
        if kind not in ("checker", "noise"):
            raise ValueError(f"unknown albedo kind {kind!r}")
        self.kind = kind
        self.color_a = np.clip(np.asarray(color_a, dtype=np.float64), 0, 1)
        self.color_b = np.clip(np.asarray(color_b, dtype=np.float64), 0, 1)
        self.size = float(size)
        self.seed = int(seed)
        self.octaves = int(octaves)
        self.offset = float(offset)
        self._noise = [ValueNoise(seed + o) for o in range(self.octaves)]

    def mix(self, p):
        p = np.asarray(p, dtype=np.float64)
        if self.kind == "checker":
            idx = np.floor(p / self.size + self.offset).astype(np.int64)
            return (idx.sum(axis=-1) % 2).astype(np.float64)
        total, amp, norm = 0.0, 1.0, 0.0
        for o, noise in enumerate(self._noise):
            total = total + amp * noise(p * (2 ** o) / self.size)
            norm += amp
            amp *= 0.5
        return total / norm

    def __call__(self, p):
        m = self.mix(p)[..., None]
        return self.color_a + (self.color_b - self.color_a) * m

    def to_dict(self):
        return {"kind": self.kind, "color_a": self.color_a.tolist(),
                "color_b": self.color_b.tolist(), "size": self.size, "seed": self.seed,
                "octaves": self.octaves, "offset": self.offset}


# ----------------------------------------------------------------------------
# scene


@dataclass
class SceneSpec:
    primitives: list
    albedo: Albedo
    bounds: np.ndarray
    name: str = "scene"
    start: dict = field(default_factory=dict)
    ambient: float = 0.3

    def __post_init__(self):
        self.bounds = np.asarray(self.bounds, dtype=np.float64).reshape(2, 3)
        lo, hi = self.bounds
        if not np.all(hi > lo):
            raise ValueError("scene bounds must have positive extent on every axis")
        if not self.primitives:
            raise ValueError("scene needs at least one primitive")
        for prim in self.primitives:
            if not prim.intersects(lo, hi):
                raise ValueError(f"primitive {prim.to_dict()} does not intersect bounds")

    @property
    def scale(self):
        """Characteristic length: the largest bounds extent."""
        return float(np.max(self.bounds[1] - self.bounds[0]))

    @property
    def eps(self):
        return EPS_REL * self.scale

    def sdf(self, points):
        p = np.asarray(points, dtype=np.float64)
        out = self.primitives[0].sdf(p)
        for prim in self.primitives[1:]:
            out = np.minimum(out, prim.sdf(p))
        return out

    def sdf_and_normal(self, points):
        p = np.asarray(points, dtype=np.float64)
        vals = np.stack([prim.sdf(p) for prim in self.primitives], axis=-1)
        which = np.argmin(vals, axis=-1)
        s = np.take_along_axis(vals, which[..., None], axis=-1)[..., 0]
        n = np.zeros(p.shape)
        for i, prim in enumerate(self.primitives):
            m = which == i
            if np.any(m):
                n[m] = prim.normal(p[m])
        return s, n

    def start_pose(self):
        if not self.start:
            lo, hi = self.bounds
            c = 0.5 * (lo + hi)
            return look_at(c, c + np.array([1.0, 0.0, 0.0]))
        return look_at(self.start["eye"], self.start["target"])

    def to_dict(self):
        return {"name": self.name, "bounds": self.bounds.tolist(),
                "primitives": [p.to_dict() for p in self.primitives],
                "albedo": self.albedo.to_dict(), "start": self.start, "ambient": self.ambient}

    @classmethod
    def from_dict(cls, d):
        return cls([primitive_from_dict(p) for p in d["primitives"]],
                   Albedo(**d.get("albedo", {})), d["bounds"], d.get("name", "scene"),
                   d.get("start", {}), float(d.get("ambient", 0.3)))


def gt_sdf(scene, p):
    """Signed distance of ``p`` (3-vector or (N,3)) to the scene surface."""
    return scene.sdf(p)


def load_scene(path):
    with open(path) as fh:
        return SceneSpec.from_dict(json.load(fh))


def save_scene(scene, path):
    Path(path).write_text(json.dumps(scene.to_dict(), indent=2))


# ----------------------------------------------------------------------------
# sensor


@dataclass
class Frame:
    image: np.ndarray
    depth: np.ndarray
    valid: np.ndarray
    pose: Pose
    intrinsics: CameraIntrinsics
    id: int = 0


def sphere_trace(scene, origins, dirs, far, max_steps=MAX_STEPS, eps=None):
    """March rays against the scene SDF. Returns (t, hit) with t the ray length."""
    eps = scene.eps if eps is None else eps
    n = origins.shape[0]
    t = np.zeros(n)
    hit = np.zeros(n, dtype=bool)
    active = np.arange(n)
    for _ in range(max_steps):
        if active.size == 0:
            break
        s = scene.sdf(origins[active] + t[active, None] * dirs[active])
        done = s < eps
        hit[active[done]] = True
        t[active[~done]] += s[~done]
        keep = ~done & (t[active] <= far)
        active = active[keep]
    # polish hits with a few Newton steps along the ray
    idx = np.nonzero(hit)[0]
    for _ in range(4):
        if idx.size == 0:
            break
        s, nrm = scene.sdf_and_normal(origins[idx] + t[idx, None] * dirs[idx])
        slope = np.sum(nrm * dirs[idx], axis=1)
        step = np.where(slope < -0.1, -s / np.minimum(slope, -0.1), s)
        t[idx] += step
    return t, hit


def render_rgbd(scene, pose, intr, noise_sigma=0.0, rng=None, frame_id=0):
    """Render a posed RGB-D frame by sphere tracing the analytic SDF."""
    if not pose.is_valid():
        raise ValueError("pose rotation is not orthonormal")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    o, d = camera_rays(pose, intr)
    h, w = intr.shape
    o = o.reshape(-1, 3)
    d = d.reshape(-1, 3)
    t, hit = sphere_trace(scene, o, d, intr.far)
    valid = hit & (t > intr.near) & (t < intr.far)
    depth = np.where(valid, t, 0.0)
    image = np.broadcast_to(BACKGROUND, (h * w, 3)).copy()
    if np.any(valid):
        p = o[valid] + t[valid, None] * d[valid]
        _, nrm = scene.sdf_and_normal(p)
        lam = np.clip(-np.sum(nrm * d[valid], axis=1), 0.0, 1.0)
        shade = scene.ambient + (1.0 - scene.ambient) * lam
        image[valid] = np.clip(scene.albedo(p) * shade[:, None], 0.0, 1.0)
        if noise_sigma > 0:
            rng = np.random.default_rng(0) if rng is None else rng
            noisy = depth[valid] + rng.normal(0.0, noise_sigma, size=int(valid.sum()))
            span = 1e-6 * (intr.far - intr.near)
            depth[valid] = np.clip(noisy, intr.near + span, intr.far - span)
    return Frame(image.reshape(h, w, 3), depth.reshape(h, w), valid.reshape(h, w),
                 pose, intr, frame_id)


def backproject(frame, stride=1, mask=None):
    """World points, colours and depths of every ``stride``-th valid pixel."""
    _, d = camera_rays(frame.pose, frame.intrinsics, stride)
    valid = frame.valid[::stride, ::stride]
    if mask is not None:
        valid = valid & mask[::stride, ::stride]
    depth = frame.depth[::stride, ::stride][valid]
    pts = frame.pose.translation + d[valid] * depth[:, None]
    return pts, frame.image[::stride, ::stride][valid], depth


# ----------------------------------------------------------------------------
# surface sampling


def sample_gt_surface(scene, n, seed=0, shell=None, max_rounds=2000):
    """Area-uniform samples on the zero level set inside the scene bounds.

    Uniform points are rejection-sampled inside a thin shell around the surface
    (whose volume is proportional to area) and then projected onto it.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    lo, hi = scene.bounds
    shell = 2e-3 * scene.scale if shell is None else shell
    lo_s, hi_s = lo - shell, hi + shell
    out = []
    count = 0
    batch = 200_000
    for _ in range(max_rounds):
        p = rng.uniform(lo_s, hi_s, size=(batch, 3))
        s = scene.sdf(p)
        p = p[np.abs(s) < shell]
        if p.size:
            for _ in range(8):
                s, nrm = scene.sdf_and_normal(p)
                p = p - s[:, None] * nrm
            s = scene.sdf(p)
            tol = 1e-9 * scene.scale
            keep = (np.abs(s) < 1e-6 * scene.scale) & np.all((p >= lo - tol) & (p <= hi + tol), axis=1)
            p = p[keep]
            out.append(p)
            count += len(p)
        if count >= n:
            break
    if count == 0:
        raise ValueError("scene has no surface inside its bounds")
    pts = np.concatenate(out)[:n]
    if len(pts) < n:
        raise ValueError("surface sampling did not converge")
    return pts


# ----------------------------------------------------------------------------
# built-in scenes


def _room_planes(lo, hi):
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    planes = []
    for ax in range(3):
        n = np.zeros(3)
        n[ax] = 1.0
        planes.append(Plane(n, lo[ax]))
        planes.append(Plane(-n, -hi[ax]))
    return planes


def unit_sphere_scene():
    return SceneSpec([Sphere([0, 0, 0], 1.0)], Albedo("checker", size=0.4),
                     [[-2, -2, -2], [2, 2, 2]], name="unit_sphere")


def box_scene():
    return SceneSpec([Box([0, 0, 0], [1, 1, 1])], Albedo("checker", size=0.4),
                     [[-2, -2, -2], [2, 2, 2]], name="box")


def plane_scene():
    return SceneSpec([Plane([0, 0, 1], 0.0)], Albedo("noise", size=0.5, seed=2),
                     [[-3, -3, -0.5], [3, 3, 3]], name="plane")


def sphere_room():
    """4 x 4 x 2.5 room with a floating sphere in the middle."""
    lo, hi = [-2.0, -2.0, 0.0], [2.0, 2.0, 2.5]
    prims = _room_planes(lo, hi) + [Sphere([0.0, 0.0, 1.1], 0.6)]
    return SceneSpec(prims, Albedo("noise", size=0.6, seed=7), [lo, hi], name="sphere_room",
                     start={"eye": [-1.4, -1.4, 1.3], "target": [0.0, 0.0, 1.1]})


def two_room():
    """Two 4 x 4 rooms joined by a doorway, a pillar in each room."""
    lo, hi = [0.0, 0.0, 0.0], [8.0, 4.0, 2.4]
    prims = _room_planes(lo, hi) + [
        Box([4.0, 1.05, 1.2], [0.1, 1.55, 1.7]),  # divider wall, doorway at y in [2.6, 4]
        Box([1.6, 1.3, 1.2], [0.25, 0.25, 1.7]),  # pillar, room A
        Box([6.2, 2.6, 1.2], [0.3, 0.3, 1.7]),  # pillar, room B
        Sphere([6.6, 0.9, 0.2], 0.55),  # half-buried ball, room B
    ]
    return SceneSpec(prims, Albedo("noise", size=0.6, seed=11), [lo, hi], name="two_room",
                     start={"eye": [0.8, 3.0, 1.2], "target": [2.5, 1.5, 1.0]})


def corridor_scene():
    """Long box-shaped room used by planner tests."""
    lo, hi = [0.0, 0.0, 0.0], [4.0, 4.0, 4.0]
    prims = _room_planes(lo, hi) + [Box([2.0, 2.0, 2.0], [0.6, 2.5, 2.5])]
    return SceneSpec(prims, Albedo("checker", size=0.5), [lo, hi], name="corridor")


BUILTIN_SCENES = {
    "unit_sphere": unit_sphere_scene,
    "box": box_scene,
    "plane": plane_scene,
    "sphere_room": sphere_room,
    "two_room": two_room,
    "corridor": corridor_scene,
}


def get_scene(name_or_path):
    if name_or_path in BUILTIN_SCENES:
        return BUILTIN_SCENES[name_or_path]()
    if not Path(name_or_path).exists():
        raise ValueError(f"unknown scene {name_or_path!r}: not a built-in "
                         f"({sorted(BUILTIN_SCENES)}) and no such file")
    return load_scene(name_or_path)
