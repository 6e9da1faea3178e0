"""Spatial pyramid max-pooling over point features.

Level ``L`` splits the domain into ``L**3`` axis-aligned bins. A point's bin
along an axis is ``min(floor(L * (x - lo) / (hi - lo)), L - 1)``, so points on
an interior boundary land in the higher bin and the domain maximum clamps
into the last one. The embedding concatenates levels in order, bins in
lexicographic ``(x, y, z)`` order, channels contiguous within a bin.
"""

from dataclasses import dataclass

import numpy as np

from .errors import EmptyDomainError, MismatchedRowsError

CUBE_DOMAIN = (np.zeros(3), np.full(3, 10.0))


@dataclass(frozen=True)
class SppConfig:
    levels: tuple = (1, 2, 4)
    domain: str = "cube"  # "cube" or "bbox"
    empty_fill: float = 0.0

    def __post_init__(self):
        if not self.levels or any(int(l) < 1 for l in self.levels):
            raise ValueError("levels must be non-empty and each >= 1")
        if self.domain not in ("cube", "bbox"):
            raise ValueError(f"unknown SPP domain {self.domain!r}")
        object.__setattr__(self, "levels", tuple(int(l) for l in self.levels))

    @property
    def n_bins(self) -> int:
        return sum(l ** 3 for l in self.levels)

    def output_dim(self, channels: int) -> int:
        return channels * self.n_bins


def _domain(points, cfg):
    if cfg.domain == "cube":
        return CUBE_DOMAIN
    lo, hi = points.min(axis=0), points.max(axis=0)
    if np.any(hi - lo <= 0):
        raise EmptyDomainError("degenerate bounding box for per-model SPP domain")
    return lo, hi


def bin_indices(points: np.ndarray, cfg: SppConfig) -> np.ndarray:
    """``(N, n_levels)`` global bin ids (level offsets included)."""
    pts = np.asarray(points, dtype=np.float64)
    lo, hi = _domain(pts, cfg)
    rel = (pts - lo) / (hi - lo)
    out = np.empty((len(pts), len(cfg.levels)), dtype=np.int64)
    offset = 0
    for n, L in enumerate(cfg.levels):
        b = np.clip(np.floor(L * rel).astype(np.int64), 0, L - 1)
        out[:, n] = offset + (b[:, 0] * L + b[:, 1]) * L + b[:, 2]
        offset += L ** 3
    return out


def pool_with_argmax(bins: np.ndarray, features: np.ndarray, n_bins: int, empty_fill: float = 0.0):
    """Per-bin, per-channel max and the index of the first point attaining it.

    Args:
        bins: ``(N, n_levels)`` output of :func:`bin_indices`.
        features: ``(N, C)``.

    Returns:
        ``(pooled, argmax)``, both ``(n_bins, C)``; empty bins hold
        ``empty_fill`` and argmax ``-1``.
    """
    n, c = features.shape
    flat_bins = bins.reshape(-1)
    point = np.repeat(np.arange(n), bins.shape[1])
    order = np.lexsort((point, flat_bins))
    sb, sp = flat_bins[order], point[order]
    rows = features[sp]
    starts = np.flatnonzero(np.r_[True, sb[1:] != sb[:-1]])
    seg_max = np.maximum.reduceat(rows, starts, axis=0)
    seg_id = np.cumsum(np.r_[False, sb[1:] != sb[:-1]])
    cand = np.where(rows == seg_max[seg_id], sp[:, None], n)
    seg_arg = np.minimum.reduceat(cand, starts, axis=0)

    pooled = np.full((n_bins, c), empty_fill, dtype=features.dtype)
    argmax = np.full((n_bins, c), -1, dtype=np.int64)
    occupied = sb[starts]
    pooled[occupied] = seg_max
    argmax[occupied] = seg_arg
    return pooled, argmax


def spp_pool(cloud, features, cfg: SppConfig = SppConfig()) -> np.ndarray:
    """Fixed-length embedding of variable-size point features.

    ``cloud`` may be a PointCloud or an ``(N, 3)`` array; ``features`` a
    FeatureMatrix or an ``(N, C)`` array. Length is ``C * sum(L**3)``.
    """
    points = getattr(cloud, "points", cloud)
    feats = getattr(features, "features", features)
    points = np.asarray(points)
    feats = np.asarray(feats)
    if feats.ndim != 2 or len(points) != len(feats):
        raise MismatchedRowsError(f"{len(points)} points but {len(feats)} feature rows")
    if len(points) == 0:
        raise MismatchedRowsError("cannot pool an empty point set")
    bins = bin_indices(points, cfg)
    pooled, _ = pool_with_argmax(bins, feats, cfg.n_bins, cfg.empty_fill)
    return pooled.reshape(-1)
