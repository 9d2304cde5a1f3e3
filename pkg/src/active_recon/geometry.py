"""Camera poses, pinhole intrinsics and ray generation.

Conventions used everywhere in the package:

* ``Pose.rotation`` maps camera axes to world axes (columns are the camera
  x/y/z axes expressed in world coordinates) and ``Pose.translation`` is the
  camera centre in world coordinates.
* Camera frame is x right, y down, z forward (optical axis).
* Depth is the Euclidean ray length from the camera centre, not the z value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

ORTHO_TOL = 1e-9


@dataclass
class CameraIntrinsics:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    near: float = 0.05
    far: float = 8.0

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not 0 < self.near < self.far:
            raise ValueError("need 0 < near < far")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point outside the image")

    @classmethod
    def from_fov(cls, width=96, height=72, hfov_deg=90.0, vfov_deg=60.0,
                 near=0.05, far=8.0):
        fx = 0.5 * width / math.tan(math.radians(hfov_deg) / 2)
        fy = 0.5 * height / math.tan(math.radians(vfov_deg) / 2)
        return cls(width, height, fx, fy, width / 2.0, height / 2.0, near, far)

    @property
    def shape(self):
        return (self.height, self.width)

    @property
    def focal(self):
        return 0.5 * (self.fx + self.fy)

    def to_dict(self):
        return dict(width=self.width, height=self.height, fx=self.fx, fy=self.fy,
                    cx=self.cx, cy=self.cy, near=self.near, far=self.far)

    def pixel_dirs_cam(self, stride=1):
        """Unit ray directions in the camera frame through pixel centres.

        Returns an array of shape (H', W', 3) for every ``stride``-th pixel.
        """
        us = np.arange(0, self.width, stride) + 0.5
        vs = np.arange(0, self.height, stride) + 0.5
        uu, vv = np.meshgrid(us, vs)
        d = np.stack([(uu - self.cx) / self.fx, (vv - self.cy) / self.fy,
                      np.ones_like(uu)], axis=-1)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)


@dataclass
class Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    def is_valid(self, tol=ORTHO_TOL):
        r = self.rotation
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(self.translation))):
            return False
        if np.max(np.abs(r @ r.T - np.eye(3))) > tol:
            return False
        return abs(np.linalg.det(r) - 1.0) <= tol

    def validate(self):
        if not self.is_valid():
            raise ValueError("pose rotation is not a proper orthonormal matrix")
        return self

    @property
    def forward(self):
        return self.rotation[:, 2].copy()

    def world_to_cam(self, points):
        return (np.asarray(points) - self.translation) @ self.rotation

    def cam_to_world(self, points):
        return np.asarray(points) @ self.rotation.T + self.translation

    def quaternion(self):
        """(x, y, z, w) quaternion of the camera-to-world rotation."""
        return Rotation.from_matrix(self.rotation).as_quat()

    def to_dict(self):
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["rotation"]), np.array(d["translation"]))


def look_at(eye, target, up=(0.0, 0.0, 1.0)):
    """Pose at ``eye`` whose optical axis points at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise ValueError("eye and target coincide")
    fwd = fwd / n
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-6:
        # looking straight up/down: any horizontal right axis will do
        right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
        if np.linalg.norm(right) < 1e-6:
            right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd], axis=1)
    # re-orthonormalise to keep det/orthogonality at machine precision
    u, _, vt = np.linalg.svd(rot)
    rot = u @ vt
    return Pose(rot, eye)


def yaw_rotate(pose, angle):
    """Rotate a pose about the world z axis through its own centre."""
    c, s = math.cos(angle), math.sin(angle)
    rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return Pose(rz @ pose.rotation, pose.translation)


def camera_rays(pose, intr, stride=1):
    """World-space ray origins and unit directions, shape (H', W', 3) each."""
    d_cam = intr.pixel_dirs_cam(stride)
    d_world = d_cam @ pose.rotation.T
    origins = np.broadcast_to(pose.translation, d_world.shape).copy()
    return origins, d_world


def project(points, pose, intr):
    """Project world points. Returns pixel coords (N,2), camera z (N,), ray length (N,)."""
    pc = pose.world_to_cam(points)
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * pc[:, 0] / z + intr.cx
        v = intr.fy * pc[:, 1] / z + intr.cy
    dist = np.linalg.norm(np.asarray(points) - pose.translation, axis=1)
    return np.stack([u, v], axis=1), z, dist


def bilinear_sample(img, uv, valid=None):
    """Sample ``img`` (H,W[,C]) at continuous pixel coords ``uv`` (pixel centres at +0.5).

    Returns (values, ok) where ``ok`` flags samples whose four taps lie inside
    the image and, if ``valid`` is given, are all valid.
    """
    h, w = img.shape[:2]
    x = uv[:, 0] - 0.5
    y = uv[:, 1] - 0.5
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    ok = (x0 >= 0) & (y0 >= 0) & (x0 + 1 < w) & (y0 + 1 < h)
    x0c = np.clip(x0, 0, w - 2)
    y0c = np.clip(y0, 0, h - 2)
    fx = (x - x0c)[:, None] if img.ndim == 3 else (x - x0c)
    fy = (y - y0c)[:, None] if img.ndim == 3 else (y - y0c)
    a = img[y0c, x0c]
    b = img[y0c, x0c + 1]
    c = img[y0c + 1, x0c]
    d = img[y0c + 1, x0c + 1]
    out = (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy
    if valid is not None:
        ok &= valid[y0c, x0c] & valid[y0c, x0c + 1] & valid[y0c + 1, x0c] & valid[y0c + 1, x0c + 1]
    return out, ok
