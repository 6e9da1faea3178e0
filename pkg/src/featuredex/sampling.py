"""Mesh to point-cloud conversion and voxel-grid density normalisation."""

from dataclasses import dataclass

import numpy as np

from .errors import ZeroAreaError
from .mesh_io import TriangleMesh
from .rng import SplitMix64

DEFAULT_N_POINTS = 2048


@dataclass
class PointCloud:
    points: np.ndarray

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64).reshape(-1, 3)

    def __len__(self):
        return len(self.points)

    @property
    def n(self) -> int:
        return len(self.points)


def sample_surface(mesh: TriangleMesh, n_points: int = DEFAULT_N_POINTS, seed: int = 0) -> PointCloud:
    """Draw ``n_points`` uniformly distributed surface samples.

    Triangles are picked by inverse sampling of the cumulative area, then a
    point is placed with barycentric weights ``(u, v)`` folded back into the
    triangle when ``u + v > 1``. The stream is consumed as ``n`` triangle
    draws, then ``n`` values of ``u``, then ``n`` values of ``v``.
    """
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    if len(mesh) == 0:
        raise ZeroAreaError("mesh has no triangles")
    areas = mesh.areas()
    cum = np.cumsum(areas)
    total = cum[-1]
    if not total > 0:
        raise ZeroAreaError("all triangles are degenerate")

    rng = SplitMix64(seed)
    pick = rng.random(n_points) * total
    u = rng.random(n_points)
    v = rng.random(n_points)

    # side="right" never selects a zero-area triangle
    tri = np.minimum(np.searchsorted(cum, pick, side="right"), len(cum) - 1)
    fold = u + v > 1.0
    u[fold] = 1.0 - u[fold]
    v[fold] = 1.0 - v[fold]

    t = mesh.vertices[tri].astype(np.float64)
    pts = t[:, 0] + u[:, None] * (t[:, 1] - t[:, 0]) + v[:, None] * (t[:, 2] - t[:, 0])
    return PointCloud(pts)


def voxel_downsample(cloud: PointCloud, voxel_size: float) -> PointCloud:
    """Replace every occupied voxel by the centroid of its points.

    Output is ordered by lexicographic voxel key ``floor(p / voxel_size)``.
    Centroids are clipped to their members' extent so rounding cannot push
    a centroid into a neighbouring voxel.
    """
    if not voxel_size > 0:
        raise ValueError("voxel_size must be > 0")
    pts = cloud.points
    keys = np.floor(pts / voxel_size).astype(np.int64)
    uniq, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    # sum in a fixed (input-sorted) order so results are permutation invariant
    order = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0], inverse))
    sorted_inv = inverse[order]
    sorted_pts = pts[order]
    starts = np.flatnonzero(np.r_[True, sorted_inv[1:] != sorted_inv[:-1]])
    sums = np.add.reduceat(sorted_pts, starts, axis=0)
    lo = np.minimum.reduceat(sorted_pts, starts, axis=0)
    hi = np.maximum.reduceat(sorted_pts, starts, axis=0)
    centroids = np.clip(sums / counts[:, None], lo, hi)
    return PointCloud(centroids)
