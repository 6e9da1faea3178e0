"""Independent reference computations shared by the tests."""

import numpy as np


def edge_counts(vertices):
    """Triangle count per undirected edge, keyed on exact vertex coordinates."""
    v = np.ascontiguousarray(np.asarray(vertices, dtype=np.float32).reshape(-1, 3)) + np.float32(0)
    # identical coordinates <=> identical 12-byte rows (-0.0 folded into +0.0 above)
    _, vid = np.unique(v.view("V12").ravel(), return_inverse=True)
    vid = vid.reshape(-1, 3).astype(np.int64)
    edges = np.concatenate([vid[:, [0, 1]], vid[:, [1, 2]], vid[:, [2, 0]]])
    edges.sort(axis=1)
    _, counts = np.unique(edges[:, 0] * (vid.max() + 1) + edges[:, 1], return_counts=True)
    return counts


def is_closed_manifold(vertices) -> bool:
    return bool(np.all(edge_counts(vertices) == 2))


def signed_volume(vertices) -> float:
    """Divergence-theorem volume of a closed, outward-oriented triangle mesh."""
    v = np.asarray(vertices, dtype=np.float64)
    return float(np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum() / 6.0)
