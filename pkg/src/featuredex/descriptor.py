"""Hand-crafted 32-D per-point geometric descriptors and the FMAT exchange format.

Column layout (radius ``r``, cube centre ``c = (5, 5, 5)``):

====== ==============================================================
0-2    eigenvalues l1 >= l2 >= l3 of the r-neighbourhood covariance,
       divided by their sum
3      linearity (l1 - l2) / l1
4      planarity (l2 - l3) / l1
5      sphericity l3 / l1
6      omnivariance, cube root of the product of normalised eigenvalues
7      anisotropy (l1 - l3) / l1
8      eigenentropy, -sum e ln e over normalised eigenvalues
9      surface variation l3 / (l1 + l2 + l3)
10-12  normal (eigenvector of l3), oriented towards c
13     height z / 10
14     distance to c, / 10
15     neighbour count (self included) / N
16-25  columns 0-9 recomputed with radius 2r
26-31  zero padding
====== ==============================================================

Neighbourhoods with fewer than three points, or with a vanishing
covariance, get zeros for the eigen-features and the normal.
"""

from dataclasses import dataclass, asdict
import hashlib
import json
import struct

import numpy as np

from .errors import BadMagicError, IoFailure, MalformedError, MismatchedRowsError, TruncatedError, VersionUnsupportedError
from .sampling import PointCloud
from ._fileio import atomic_write_bytes

FEATURE_DIM = 32
DEFAULT_RADIUS = 0.8
CUBE_CENTER = np.array([5.0, 5.0, 5.0])
N_EIGEN = 10

FMAT_MAGIC = b"FMAT"
FMAT_VERSION = 1
FMAT_HEADER = struct.Struct("<4sHHIIQ")


@dataclass
class FeatureMatrix:
    features: np.ndarray  # (N, D) float32
    points: np.ndarray    # (N, 3)

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.points = np.ascontiguousarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.features.ndim != 2:
            raise MismatchedRowsError("feature matrix must be 2-D")
        if len(self.features) != len(self.points):
            raise MismatchedRowsError(
                f"{len(self.features)} feature rows for {len(self.points)} points")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def cloud(self) -> PointCloud:
        return PointCloud(self.points)


@dataclass(frozen=True)
class DescriptorConfig:
    n_points: int = 2048
    voxel_size: float = 0.0  # 0 keeps all n_points samples
    radius: float = DEFAULT_RADIUS
    seed: int = 42

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()


# -- neighbour search ----------------------------------------------------------

def radius_pairs(points: np.ndarray, radius: float):
    """All ordered pairs ``(i, j)`` with ``|p_i - p_j| <= radius``, self pairs included.

    Uses a uniform hash grid with cell edge ``radius``; pairs are returned
    sorted by ``(i, j)`` so downstream sums have a fixed order.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    cells = np.floor(pts / radius).astype(np.int64)
    cells -= cells.min(axis=0) - 1
    dims = cells.max(axis=0) + 2
    key = (cells[:, 0] * dims[1] + cells[:, 1]) * dims[2] + cells[:, 2]
    order = np.argsort(key, kind="stable")
    sorted_key = key[order]

    ii, jj = [], []
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dz in (-1, 0, 1):
                nk = key + (dx * dims[1] + dy) * dims[2] + dz
                lo = np.searchsorted(sorted_key, nk, side="left")
                hi = np.searchsorted(sorted_key, nk, side="right")
                counts = hi - lo
                total = counts.sum()
                if total == 0:
                    continue
                i = np.repeat(np.arange(n), counts)
                offsets = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
                j = order[np.repeat(lo, counts) + offsets]
                ii.append(i)
                jj.append(j)
    i = np.concatenate(ii)
    j = np.concatenate(jj)
    d2 = np.sum((pts[j] - pts[i]) ** 2, axis=1)
    keep = d2 <= radius * radius
    i, j = i[keep], j[keep]
    srt = np.lexsort((j, i))
    return i[srt], j[srt]


# -- eigen features ----------------------------------------------------------------

def neighbourhood_covariance(points, i, j, n):
    """Per-point 3x3 covariance of neighbour offsets, and neighbour counts."""
    d = points[j] - points[i]
    count = np.bincount(i, minlength=n).astype(np.float64)
    safe = np.maximum(count, 1.0)
    mean = np.stack([np.bincount(i, weights=d[:, a], minlength=n) for a in range(3)], axis=1) / safe[:, None]
    cov = np.empty((n, 3, 3))
    for a in range(3):
        for b in range(a, 3):
            s = np.bincount(i, weights=d[:, a] * d[:, b], minlength=n) / safe
            cov[:, a, b] = cov[:, b, a] = s - mean[:, a] * mean[:, b]
    return cov, count


def eigen_features(cov: np.ndarray, count: np.ndarray):
    """Returns the 10 eigen columns and oriented-later normals (unsigned)."""
    w, v = np.linalg.eigh(cov)
    lam = np.clip(w[:, ::-1], 0.0, None)  # l1 >= l2 >= l3
    normal = v[:, :, 0]
    l1, l2, l3 = lam[:, 0], lam[:, 1], lam[:, 2]
    total = lam.sum(axis=1)
    valid = (count >= 3) & (l1 > 1e-12)

    out = np.zeros((len(cov), N_EIGEN))
    if valid.any():
        L1, L2, L3, S = l1[valid], l2[valid], l3[valid], total[valid]
        e = lam[valid] / S[:, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            ent = -np.sum(np.where(e > 0, e * np.log(np.where(e > 0, e, 1.0)), 0.0), axis=1)
        out[valid] = np.column_stack([
            e,
            (L1 - L2) / L1,
            (L2 - L3) / L1,
            L3 / L1,
            np.cbrt(e[:, 0] * e[:, 1] * e[:, 2]),
            (L1 - L3) / L1,
            ent,
            L3 / S,
        ])
    normal = np.where(valid[:, None], normal, 0.0)
    return out, normal, valid


def _orient_normals(normal, points):
    to_center = CUBE_CENTER - points
    dot = np.sum(normal * to_center, axis=1)
    flip = dot < 0
    # exactly tangential: make the first non-zero component positive
    tie = dot == 0
    if tie.any():
        nz = normal[tie]
        first = nz[np.arange(len(nz)), np.argmax(nz != 0, axis=1)]
        flip[tie] = first < 0
    normal = normal.copy()
    normal[flip] *= -1.0
    return normal + 0.0  # normalise -0.0


def compute_descriptors(cloud: PointCloud, radius: float = DEFAULT_RADIUS) -> FeatureMatrix:
    """Per-point covariance descriptors at ``radius`` and ``2 * radius``."""
    if not radius > 0:
        raise ValueError("radius must be > 0")
    pts = cloud.points
    n = len(pts)
    i2, j2 = radius_pairs(pts, 2.0 * radius)
    d2 = np.sum((pts[j2] - pts[i2]) ** 2, axis=1)
    near = d2 <= radius * radius
    i1, j1 = i2[near], j2[near]

    cov1, count1 = neighbourhood_covariance(pts, i1, j1, n)
    eig1, normal, _ = eigen_features(cov1, count1)
    cov2, count2 = neighbourhood_covariance(pts, i2, j2, n)
    eig2, _, _ = eigen_features(cov2, count2)
    normal = _orient_normals(normal, pts)

    feats = np.zeros((n, FEATURE_DIM))
    feats[:, 0:10] = eig1
    feats[:, 10:13] = normal
    feats[:, 13] = pts[:, 2] / 10.0
    feats[:, 14] = np.linalg.norm(pts - CUBE_CENTER, axis=1) / 10.0
    feats[:, 15] = count1 / n
    feats[:, 16:26] = eig2
    return FeatureMatrix(feats.astype(np.float32), pts)


def rotate_quarter_turns(points, features, k: int):
    """Descriptors of the model turned ``k`` quarter-turns about the cube's vertical axis.

    Every column except the normal's x/y components is invariant under
    such a turn, so the rotated matrix is exact without recomputation
    (up to the orientation of normals lying exactly tangent to the centre
    direction). Used for training-time augmentation.
    """
    k = int(k) % 4
    pts = np.array(points, dtype=np.float64)
    X = np.array(features, dtype=np.float64)
    for _ in range(k):
        x, y = pts[:, 0].copy(), pts[:, 1].copy()
        pts[:, 0], pts[:, 1] = 10.0 - y, x
        if X.shape[1] >= 13:
            nx, ny = X[:, 10].copy(), X[:, 11].copy()
            X[:, 10], X[:, 11] = -ny, nx
    return pts, X


# -- FMAT I/O ------------------------------------------------------------------------

def encode_fmat(fm: FeatureMatrix) -> bytes:
    if fm.dim == 0 or fm.n == 0:
        raise MalformedError("feature matrix must have N >= 1 rows and D >= 1 columns")
    if not np.all(np.isfinite(fm.features)):
        raise MalformedError("feature matrix contains non-finite entries")
    header = FMAT_HEADER.pack(FMAT_MAGIC, FMAT_VERSION, 0, fm.n, fm.dim, 0)
    return (header + fm.points.astype("<f4").tobytes()
            + fm.features.astype("<f4").tobytes())


def decode_fmat(data: bytes) -> FeatureMatrix:
    if len(data) < 4 or data[:4] != FMAT_MAGIC:
        raise BadMagicError("not an FMAT file")
    if len(data) < FMAT_HEADER.size:
        raise TruncatedError("FMAT header truncated")
    _, version, _flags, n, d, _ = FMAT_HEADER.unpack_from(data)
    if version != FMAT_VERSION:
        raise VersionUnsupportedError(f"FMAT version {version} not supported")
    if n == 0 or d == 0:
        raise MalformedError(f"FMAT declares N={n}, D={d}")
    expected = FMAT_HEADER.size + 4 * n * (3 + d)
    if len(data) != expected:
        raise TruncatedError(f"FMAT declares {expected} bytes, got {len(data)}")
    off = FMAT_HEADER.size
    pts = np.frombuffer(data, dtype="<f4", count=3 * n, offset=off).reshape(n, 3)
    feats = np.frombuffer(data, dtype="<f4", count=n * d, offset=off + 12 * n).reshape(n, d)
    return FeatureMatrix(feats.astype(np.float32), pts.astype(np.float64))


def write_fmat(fm: FeatureMatrix, path) -> None:
    atomic_write_bytes(path, encode_fmat(fm))


def read_fmat(path):
    """Returns ``(PointCloud, FeatureMatrix)``."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise IoFailure(str(e)) from e
    fm = decode_fmat(data)
    return fm.cloud, fm
