"""Zero-level-set extraction and small file writers (PLY meshes, PPM images)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from skimage.measure import marching_cubes


@dataclass
class Mesh:
    vertices: np.ndarray
    faces: np.ndarray
    empty: bool = False
    cell_size: float = 0.0

    def euler_characteristic(self):
        if self.empty:
            return 0
        edges = np.sort(np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]],
                                        self.faces[:, [2, 0]]]), axis=1)
        n_edges = len(np.unique(edges, axis=0))
        n_verts = len(np.unique(self.faces))
        return n_verts - n_edges + len(self.faces)


def sample_sdf_grid(sdf_fn, bounds, resolution, chunk=262144):
    lo, hi = np.asarray(bounds, dtype=np.float64).reshape(2, 3)
    axes = [np.linspace(lo[i], hi[i], resolution) for i in range(3)]
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    vals = np.concatenate([sdf_fn(pts[i:i + chunk]) for i in range(0, len(pts), chunk)])
    spacing = (hi - lo) / (resolution - 1)
    return vals.reshape((resolution,) * 3), lo, spacing


def export_mesh(sdf_fn, bounds, resolution):
    """Marching cubes of the zero level set sampled on a ``resolution``^3 lattice."""
    if resolution < 8:
        raise ValueError("resolution must be >= 8")
    f = sdf_fn.sdf if hasattr(sdf_fn, "sdf") else sdf_fn
    vol, lo, spacing = sample_sdf_grid(f, bounds, resolution)
    cell = float(np.max(spacing))
    if not (vol.min() < 0 < vol.max()):
        return Mesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), True, cell)
    v, faces, _, _ = marching_cubes(vol, level=0.0, spacing=tuple(spacing), allow_degenerate=False)
    return Mesh(v + lo, faces.astype(np.int64), False, cell)


def cull_unobserved(mesh, frames, band):
    """Keep faces whose vertices all lie in front of (or within ``band`` behind) an observed depth.

    Interiors of solids are never supervised, so zero crossings there are
    unconstrained; evaluation-time culling by camera visibility removes them.
    """
    from .geometry import bilinear_sample, project

    if mesh.empty:
        return mesh
    seen = np.zeros(len(mesh.vertices), dtype=bool)
    for fr in frames:
        uv, z, dist = project(mesh.vertices, fr.pose, fr.intrinsics)
        intr = fr.intrinsics
        ok = (z > intr.near) & (uv[:, 0] >= 0) & (uv[:, 0] <= intr.width)
        ok &= (uv[:, 1] >= 0) & (uv[:, 1] <= intr.height)
        idx = np.nonzero(ok & ~seen)[0]
        d, inb = bilinear_sample(fr.depth, uv[idx], fr.valid)
        seen[idx[inb & (dist[idx] <= d + band)]] = True
    keep = np.all(seen[mesh.faces], axis=1)
    used, faces = np.unique(mesh.faces[keep], return_inverse=True)
    faces = faces.reshape(-1, 3)
    return Mesh(mesh.vertices[used], faces, len(faces) == 0, mesh.cell_size)


def write_ply_mesh(path, mesh):
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(mesh.vertices)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write(f"element face {len(mesh.faces)}\nproperty list uchar int vertex_indices\n")
        fh.write("end_header\n")
        np.savetxt(fh, mesh.vertices, fmt="%.7g")
        if len(mesh.faces):
            np.savetxt(fh, np.column_stack([np.full(len(mesh.faces), 3), mesh.faces]), fmt="%d")


def read_ply_mesh(path):
    with open(path) as fh:
        nv = nf = 0
        for line in fh:
            if line.startswith("element vertex"):
                nv = int(line.split()[-1])
            elif line.startswith("element face"):
                nf = int(line.split()[-1])
            elif line.strip() == "end_header":
                break
        rest = fh.read().split("\n")
    v = np.array([list(map(float, r.split())) for r in rest[:nv]]).reshape(-1, 3)
    f = np.array([list(map(int, r.split()))[1:] for r in rest[nv:nv + nf]], dtype=np.int64).reshape(-1, 3)
    return Mesh(v, f, nv == 0)


def write_ppm(path, image):
    """Binary P6 image from floats in [0, 1]."""
    img = (np.clip(np.asarray(image), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes())


def read_ppm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0
