"""Synthetic machining-feature dataset: a 10 cm stock cube minus one feature.

Each feature is a prism cut from the top face (z = 10) downwards: a 2-D
cross-section inside-test extruded over ``[10 - depth, 10]``. The solid is
voxelised on an occupancy grid and the boundary faces of occupied cells are
emitted as triangles.
"""

from dataclasses import dataclass, field
import json
import math
import os
from pathlib import Path
import shutil
import tempfile
from typing import Callable

import numpy as np

from .errors import DegenerateError, InvalidParamsError, IoFailure
from .mesh_io import TriangleMesh, write_stl
from .rng import SplitMix64, derive_seed

CUBE = 10.0
WALL = 0.5
SPLIT_FRACTIONS = (0.70, 0.15, 0.15)
_SPLIT_TAG = 0x5B117


@dataclass
class FeatureParams:
    dims: dict
    cx: float = 5.0
    cy: float = 5.0
    depth: float = CUBE
    rotation: int = 0

    def as_list(self) -> list:
        items = [["cx", self.cx], ["cy", self.cy], ["depth", self.depth], ["rotation", self.rotation]]
        return items + [[k, self.dims[k]] for k in sorted(self.dims)]

    @classmethod
    def from_list(cls, items) -> "FeatureParams":
        d = dict(items)
        core = {k: d.pop(k) for k in ("cx", "cy", "depth", "rotation")}
        return cls(dims=d, cx=core["cx"], cy=core["cy"], depth=core["depth"],
                   rotation=int(core["rotation"]))


@dataclass(frozen=True)
class FeatureFamily:
    """One catalog entry.

    ``profile(x, y, p)`` is the cross-section inside-test in the unrotated
    frame; ``extent(p)`` its XY bounding box ``(x0, x1, y0, y1)``.
    ``open_sides`` lists box sides allowed to touch the cube wall.
    """
    name: str
    id: int
    group: str
    through: bool
    ranges: dict
    profile: Callable
    extent: Callable
    open_sides: frozenset = field(default_factory=frozenset)
    depth_range: tuple = (2.0, 8.0)


# -- cross-section inside-tests -------------------------------------------------

def _disc(x, y, p):
    return (x - p.cx) ** 2 + (y - p.cy) ** 2 <= p.dims["radius"] ** 2


def _disc_extent(p):
    r = p.dims["radius"]
    return p.cx - r, p.cx + r, p.cy - r, p.cy + r


def _rect(x, y, p):
    return (np.abs(x - p.cx) <= p.dims["width"] / 2) & (np.abs(y - p.cy) <= p.dims["length"] / 2)


def _rect_extent(p):
    w, l = p.dims["width"] / 2, p.dims["length"] / 2
    return p.cx - w, p.cx + w, p.cy - l, p.cy + l


def _step(x, y, p):
    return x <= p.dims["width"] + 0 * y


def _step_extent(p):
    return 0.0, p.dims["width"], 0.0, CUBE


def _segment_dist2(x, y, x0, x1, yc):
    dx = np.maximum(np.maximum(x0 - x, x - x1), 0.0)
    return dx ** 2 + (y - yc) ** 2


def _stadium(x, y, p):
    a, r = p.dims["half_length"], p.dims["radius"]
    return _segment_dist2(x, y, p.cx - a, p.cx + a, p.cy) <= r ** 2


def _stadium_extent(p):
    a, r = p.dims["half_length"], p.dims["radius"]
    return p.cx - a - r, p.cx + a + r, p.cy - r, p.cy + r


def _slot(x, y, p):
    r = p.dims["radius"]
    return _segment_dist2(x, y, -CUBE, p.dims["length"] - r, p.cy) <= r ** 2


def _slot_extent(p):
    r = p.dims["radius"]
    return 0.0, p.dims["length"], p.cy - r, p.cy + r


def _polygon(sides, first_normal_deg):
    angles = np.deg2rad(first_normal_deg + 360.0 / sides * np.arange(sides))
    normals = np.stack([np.cos(angles), np.sin(angles)], axis=1)

    def inside(x, y, p):
        apothem = p.dims["circumradius"] * math.cos(math.pi / sides)
        ok = np.ones(np.broadcast(x, y).shape, dtype=bool)
        for nx, ny in normals:
            ok &= (x - p.cx) * nx + (y - p.cy) * ny <= apothem
        return ok

    def extent(p):
        R = p.dims["circumradius"]
        vert = np.deg2rad(first_normal_deg + 180.0 / sides + 360.0 / sides * np.arange(sides))
        vx, vy = p.cx + R * np.cos(vert), p.cy + R * np.sin(vert)
        return vx.min(), vx.max(), vy.min(), vy.max()

    return inside, extent


def _ring(x, y, p):
    ri = p.dims["inner_radius"]
    ro = ri + p.dims["width"]
    d2 = (x - p.cx) ** 2 + (y - p.cy) ** 2
    return (d2 >= ri ** 2) & (d2 <= ro ** 2)


def _ring_extent(p):
    ro = p.dims["inner_radius"] + p.dims["width"]
    return p.cx - ro, p.cx + ro, p.cy - ro, p.cy + ro


_tri, _tri_extent = _polygon(3, -90.0)
_hex, _hex_extent = _polygon(6, 30.0)

_CATALOG_SPEC = [
    # name, group, through, ranges, profile, extent, open sides
    ("through_hole", "circular", True, {"radius": (1.0, 3.0)}, _disc, _disc_extent, ()),
    ("blind_hole", "circular", False, {"radius": (1.0, 3.0)}, _disc, _disc_extent, ()),
    ("rectangular_passage", "rectangular", True,
     {"width": (2.0, 6.0), "length": (2.0, 6.0)}, _rect, _rect_extent, ()),
    ("rectangular_pocket", "rectangular", False,
     {"width": (2.0, 6.0), "length": (2.0, 6.0)}, _rect, _rect_extent, ()),
    ("rectangular_blind_step", "rectangular", False,
     {"width": (1.5, 4.5)}, _step, _step_extent, ("x0", "y0", "y1")),
    ("circular_end_pocket", "circular", False,
     {"half_length": (0.75, 2.5), "radius": (0.8, 2.0)}, _stadium, _stadium_extent, ()),
    ("circular_end_blind_slot", "circular", False,
     {"length": (3.0, 7.0), "radius": (0.8, 2.0)}, _slot, _slot_extent, ("x0",)),
    ("triangular_passage", "triangular", True,
     {"circumradius": (1.5, 3.5)}, _tri, _tri_extent, ()),
    ("triangular_pocket", "triangular", False,
     {"circumradius": (1.5, 3.5)}, _tri, _tri_extent, ()),
    ("six_sides_passage", "six_sided", True,
     {"circumradius": (1.5, 3.5)}, _hex, _hex_extent, ()),
    ("six_sides_pocket", "six_sided", False,
     {"circumradius": (1.5, 3.5)}, _hex, _hex_extent, ()),
    ("o_ring", "circular", False,
     {"inner_radius": (1.5, 3.0), "width": (0.6, 1.2)}, _ring, _ring_extent, ()),
]

FAMILIES: dict[str, FeatureFamily] = {}
ALIASES = {"circular_end_blind_spot": "circular_end_blind_slot"}


def register_family(name, group, through, ranges, profile, extent, open_sides=(),
                    depth_range=(2.0, 8.0)) -> FeatureFamily:
    """Add a family to the catalog; ids are assigned in registration order."""
    if name in FAMILIES:
        raise ValueError(f"family {name!r} already registered")
    fam = FeatureFamily(name, len(FAMILIES), group, through, dict(ranges), profile, extent,
                        frozenset(open_sides), depth_range)
    FAMILIES[name] = fam
    return fam


for _spec in _CATALOG_SPEC:
    register_family(*_spec, depth_range=(1.0, 4.0) if _spec[0] == "o_ring" else (2.0, 8.0))

DEFAULT_FAMILIES = (
    "blind_hole", "o_ring", "circular_end_pocket", "circular_end_blind_slot",
    "rectangular_passage", "rectangular_pocket", "triangular_pocket", "six_sides_passage",
)


def get_family(name_or_id) -> FeatureFamily:
    if isinstance(name_or_id, (int, np.integer)):
        for fam in FAMILIES.values():
            if fam.id == name_or_id:
                return fam
        raise KeyError(f"unknown family id {name_or_id}")
    name = ALIASES.get(name_or_id, name_or_id)
    if name not in FAMILIES:
        raise KeyError(f"unknown family {name_or_id!r}")
    return FAMILIES[name]


def family_name(family_id: int) -> str:
    return get_family(int(family_id)).name


# -- parameters -------------------------------------------------------------------

def validate_params(family: FeatureFamily, params: FeatureParams) -> None:
    """Raise InvalidParamsError unless ``params`` describe a valid feature."""
    for key in family.ranges:
        if key not in params.dims:
            raise InvalidParamsError(f"{family.name}: missing parameter {key!r}")
        if not params.dims[key] > 0:
            raise InvalidParamsError(f"{family.name}: {key} must be > 0")
    if params.rotation not in (0, 1, 2, 3):
        raise InvalidParamsError("rotation must be a quarter-turn index 0..3")
    if family.through:
        if params.depth != CUBE:
            raise InvalidParamsError(f"{family.name}: passages run the full depth {CUBE}")
    elif not 0 < params.depth <= CUBE:
        raise InvalidParamsError(f"{family.name}: depth must be in (0, {CUBE}]")
    vals = [params.cx, params.cy, params.depth, *params.dims.values()]
    if not all(math.isfinite(v) for v in vals):
        raise InvalidParamsError("non-finite parameter")

    x0, x1, y0, y1 = family.extent(params)
    checks = {"x0": x0 >= WALL, "x1": x1 <= CUBE - WALL, "y0": y0 >= WALL, "y1": y1 <= CUBE - WALL}
    for side, ok in checks.items():
        if side not in family.open_sides and not ok:
            raise InvalidParamsError(f"{family.name}: feature leaves less than {WALL} cm wall ({side})")


def sample_params(family: FeatureFamily, rng: SplitMix64) -> FeatureParams:
    """Draw sizes, depth, rotation, then a centre uniformly from the valid placements."""
    dims = {k: rng.uniform(lo, hi) for k, (lo, hi) in sorted(family.ranges.items())}
    depth = CUBE if family.through else rng.uniform(*family.depth_range)
    rotation = rng.integers(4)
    probe = FeatureParams(dims=dims, cx=0.0, cy=0.0, depth=depth, rotation=rotation)
    x0, x1, y0, y1 = family.extent(probe)
    # extent is translation-covariant in (cx, cy) for centred profiles
    cx = rng.uniform(WALL - x0, CUBE - WALL - x1) if "x0" not in family.open_sides else 0.0
    cy = rng.uniform(WALL - y0, CUBE - WALL - y1) if "y0" not in family.open_sides else 0.0
    params = FeatureParams(dims=dims, cx=cx, cy=cy, depth=depth, rotation=rotation)
    validate_params(family, params)
    return params


# -- occupancy grid -----------------------------------------------------------------

@dataclass
class OccupancyGrid:
    occupied: np.ndarray  # bool, index order (x, y, z)
    cell_size: float | None = None

    def __post_init__(self):
        self.occupied = np.asarray(self.occupied, dtype=bool)
        if self.cell_size is None:
            self.cell_size = CUBE / self.occupied.shape[0]

    @property
    def resolution(self) -> int:
        return self.occupied.shape[0]

    def cell_centers(self) -> np.ndarray:
        return (np.arange(self.resolution) + 0.5) * self.cell_size


def _remove_diagonal_pinches(mask: np.ndarray) -> np.ndarray:
    """Grow a 2-D removal mask until no 2x2 window is a checkerboard.

    Checkerboards extrude into edges shared by four triangles. Cells outside
    the grid count as removed.
    """
    m = np.pad(mask, 1, constant_values=True)
    while True:
        a, b = m[:-1, :-1], m[1:, :-1]
        c, d = m[:-1, 1:], m[1:, 1:]
        checker = (a == d) & (b == c) & (a != b)
        if not checker.any():
            return m[1:-1, 1:-1]
        i, j = np.nonzero(checker)
        m[i, j] = m[i + 1, j] = m[i, j + 1] = m[i + 1, j + 1] = True


def occupancy_grid(family: FeatureFamily | str, params: FeatureParams, resolution: int = 64) -> OccupancyGrid:
    """Voxelise cube minus feature; a cell is occupied iff its centre is outside the feature."""
    if isinstance(family, str):
        family = get_family(family)
    if not 16 <= resolution <= 256:
        raise InvalidParamsError("resolution must be in [16, 256]")
    validate_params(family, params)

    centers = (np.arange(resolution) + 0.5) * (CUBE / resolution)
    x, y = np.meshgrid(centers, centers, indexing="ij")
    profile = np.asarray(family.profile(x, y, params), dtype=bool)
    profile = np.rot90(profile, params.rotation)
    profile = _remove_diagonal_pinches(profile)
    in_depth = centers >= CUBE - params.depth
    removed = profile[:, :, None] & in_depth[None, None, :]
    grid = OccupancyGrid(~removed)
    if grid.occupied.all() or not grid.occupied.any():
        raise InvalidParamsError(f"{family.name}: feature not resolvable at resolution {resolution}")
    return grid


# -- surface extraction ---------------------------------------------------------------

def extract_surface(grid: OccupancyGrid, name: str = "") -> TriangleMesh:
    """Two outward-facing triangles per exposed cell face.

    A face is exposed when the neighbouring cell is empty or outside the
    grid. Vertices are integer lattice points scaled by the cell size, so
    shared corners are bit-identical and the mesh is closed.
    """
    occ = np.asarray(grid.occupied, dtype=bool)
    if occ.ndim != 3 or not occ.any():
        raise DegenerateError("grid has no occupied cells")
    padded = np.pad(occ, 1, constant_values=False)
    quads = []
    for axis in range(3):
        b, c = (axis + 1) % 3, (axis + 2) % 3
        for direction in (1, -1):
            faces = padded & ~np.roll(padded, -direction, axis=axis)
            idx = np.argwhere(faces[1:-1, 1:-1, 1:-1])
            if direction == 1:
                idx[:, axis] += 1
                corners = [(0, 0), (1, 0), (1, 1), (0, 1)]
            else:
                corners = [(0, 0), (0, 1), (1, 1), (1, 0)]
            quad = np.repeat(idx[:, None, :], 4, axis=1)
            for n, (db, dc) in enumerate(corners):
                quad[:, n, b] += db
                quad[:, n, c] += dc
            quads.append(quad)
    quads = np.concatenate(quads)
    tris = np.stack([quads[:, [0, 1, 2]], quads[:, [0, 2, 3]]], axis=1).reshape(-1, 3, 3)
    verts = tris.astype(np.float64) * grid.cell_size
    return TriangleMesh(verts.astype(np.float32), source_name=name)


def edge_incidence(mesh: TriangleMesh) -> dict:
    """Map each undirected edge (pair of vertex tuples) to its triangle count."""
    counts = {}
    for tri in mesh.vertices:
        pts = [tuple(p) for p in tri.tolist()]
        for a, b in ((0, 1), (1, 2), (2, 0)):
            key = (pts[a], pts[b]) if pts[a] < pts[b] else (pts[b], pts[a])
            counts[key] = counts.get(key, 0) + 1
    return counts


def is_watertight(mesh: TriangleMesh) -> bool:
    return all(c == 2 for c in edge_incidence(mesh).values())


# -- dataset ------------------------------------------------------------------------

@dataclass
class ModelRecord:
    id: int
    family: str
    family_id: int
    split: str
    seed: int
    params: FeatureParams
    path: str

    def to_json(self) -> str:
        return json.dumps({
            "id": self.id, "family": self.family, "family_id": self.family_id,
            "split": self.split, "seed": self.seed, "params": self.params.as_list(),
            "path": self.path,
        })

    @classmethod
    def from_json(cls, line: str) -> "ModelRecord":
        d = json.loads(line)
        return cls(d["id"], d["family"], d["family_id"], d["split"], d["seed"],
                   FeatureParams.from_list(d["params"]), d["path"])


def split_sizes(n: int, fractions=SPLIT_FRACTIONS) -> tuple:
    n_train = int(math.floor(n * fractions[0] + 0.5))
    n_val = int(math.floor(n * fractions[1] + 0.5))
    n_val = min(n_val, n - n_train)
    return n_train, n_val, n - n_train - n_val


def assign_splits(n: int, seed: int, fractions=SPLIT_FRACTIONS) -> list:
    """Seeded shuffle of ids; first block train, then val, rest test."""
    n_train, n_val, _ = split_sizes(n, fractions)
    perm = SplitMix64(derive_seed(seed ^ _SPLIT_TAG)).permutation(n)
    tags = [""] * n
    for rank, model_id in enumerate(perm):
        tags[model_id] = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")
    return tags


def build_model(family: FeatureFamily, model_seed: int, resolution: int):
    params = sample_params(family, SplitMix64(model_seed))
    grid = occupancy_grid(family, params, resolution)
    return params, extract_surface(grid)


def generate_dataset(out_dir, families=DEFAULT_FAMILIES, per_family: int = 50,
                     resolution: int = 64, seed: int = 42, log=None) -> list:
    """Write ``models/NNNNN.stl`` and ``manifest.jsonl`` under ``out_dir``.

    Ids are assigned family-major in the order given. Files are staged in a
    temporary directory and moved into place only after every model built.
    """
    if per_family < 1:
        raise InvalidParamsError("per_family must be >= 1")
    fams = [get_family(f) for f in families]
    if len({f.name for f in fams}) != len(fams):
        raise InvalidParamsError("duplicate family in list")
    if not 16 <= resolution <= 256:
        raise InvalidParamsError("resolution must be in [16, 256]")

    out = Path(out_dir)
    n = len(fams) * per_family
    splits = assign_splits(n, seed)
    records = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        stage = Path(tempfile.mkdtemp(prefix=".stage-", dir=out))
    except OSError as e:
        raise IoFailure(str(e)) from e
    try:
        (stage / "models").mkdir()
        model_id = 0
        for fam in fams:
            for _ in range(per_family):
                mseed = derive_seed(seed, model_id)
                params, mesh = build_model(fam, mseed, resolution)
                mesh.source_name = f"{fam.name} {model_id}"
                rel = f"models/{model_id:05d}.stl"
                (stage / rel).write_bytes(write_stl(mesh, "binary"))
                records.append(ModelRecord(model_id, fam.name, fam.id, splits[model_id],
                                           mseed, params, rel))
                if log:
                    log(f"generated {rel} ({fam.name}, {len(mesh)} triangles)")
                model_id += 1
        (stage / "manifest.jsonl").write_text("".join(r.to_json() + "\n" for r in records))

        (out / "models").mkdir(exist_ok=True)
        for r in records:
            os.replace(stage / r.path, out / r.path)
        os.replace(stage / "manifest.jsonl", out / "manifest.jsonl")
    except OSError as e:
        raise IoFailure(str(e)) from e
    finally:
        shutil.rmtree(stage, ignore_errors=True)
    return records


def read_manifest(path) -> list:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.jsonl"
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        raise IoFailure(str(e)) from e
    return [ModelRecord.from_json(ln) for ln in lines if ln.strip()]
