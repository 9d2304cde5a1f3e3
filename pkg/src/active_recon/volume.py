"""Regular voxel grid geometry shared by the uncertainty, risk and fusion layers."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


@dataclass
class VoxelGrid:
    origin: np.ndarray
    voxel_size: float
    shape: tuple
    _centers: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.shape = tuple(int(s) for s in self.shape)
        if self.voxel_size <= 0 or min(self.shape) < 1:
            raise ValueError("voxel size and grid shape must be positive")

    @classmethod
    def covering(cls, bounds, voxel_size):
        lo, hi = np.asarray(bounds, dtype=np.float64).reshape(2, 3)
        shape = np.maximum(np.round((hi - lo) / voxel_size).astype(int), 1)
        return cls(lo, float(voxel_size), tuple(shape))

    @property
    def n(self):
        return int(np.prod(self.shape))

    @property
    def upper(self):
        return self.origin + np.asarray(self.shape) * self.voxel_size

    @property
    def centers(self):
        if self._centers is None:
            idx = np.indices(self.shape).reshape(3, -1).T
            self._centers = self.origin + (idx + 0.5) * self.voxel_size
        return self._centers

    def ijk(self, points):
        return np.floor((np.asarray(points) - self.origin) / self.voxel_size).astype(np.int64)

    def inside(self, ijk):
        return np.all((ijk >= 0) & (ijk < np.asarray(self.shape)), axis=-1)

    def flat_index(self, points):
        """Flat voxel index of each point, -1 outside the grid."""
        ijk = self.ijk(points)
        ok = self.inside(ijk)
        flat = np.ravel_multi_index(tuple(np.clip(ijk, 0, np.asarray(self.shape) - 1).T), self.shape)
        return np.where(ok, flat, -1)

    def to_dict(self):
        return {"origin": self.origin.tolist(), "voxel_size": self.voxel_size,
                "shape": list(self.shape)}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["origin"]), float(d["voxel_size"]), tuple(d["shape"]))


def dump_layer(grid, values, path, name, frame_id=-1):
    """Raw little-endian float32 grid (x-major, C order) plus a JSON header next to it."""
    arr = np.asarray(values, dtype="<f4").reshape(grid.shape)
    arr.tofile(path)
    header = dict(grid.to_dict(), layer=name, frame_id=int(frame_id), dtype="float32-le",
                  order="C (i, j, k)")
    with open(str(path) + ".json", "w") as fh:
        json.dump(header, fh, indent=1)


def load_layer(path):
    with open(str(path) + ".json") as fh:
        header = json.load(fh)
    vals = np.fromfile(path, dtype="<f4").reshape(header["shape"])
    return VoxelGrid.from_dict(header), vals, header
