"""STL parsing and emission (binary and ASCII).

A mesh is held as a float32 ``(T, 3, 3)`` vertex array plus ``(T, 3)``
normals and the per-triangle u16 attribute words. Units are centimetres.
"""

from dataclasses import dataclass
import re
import struct

import numpy as np

from .errors import EmptyMeshError, MalformedError, NonFiniteError, TruncatedError

HEADER_SIZE = 80
RECORD_DTYPE = np.dtype([
    ("normal", "<f4", (3,)),
    ("vertices", "<f4", (3, 3)),
    ("attr", "<u2"),
])
assert RECORD_DTYPE.itemsize == 50


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    normals: np.ndarray | None = None
    attributes: np.ndarray | None = None
    source_name: str = ""

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float32).reshape(-1, 3, 3)
        t = len(self.vertices)
        if self.normals is None:
            self.normals = face_normals(self.vertices)
        else:
            self.normals = np.asarray(self.normals, dtype=np.float32).reshape(t, 3)
        if self.attributes is None:
            self.attributes = np.zeros(t, dtype=np.uint16)
        else:
            self.attributes = np.asarray(self.attributes, dtype=np.uint16).reshape(t)

    def __len__(self):
        return len(self.vertices)

    @property
    def bounds(self) -> np.ndarray:
        """Axis-aligned bounding box as ``[[xmin, ymin, zmin], [xmax, ymax, zmax]]``."""
        flat = self.vertices.reshape(-1, 3)
        return np.stack([flat.min(axis=0), flat.max(axis=0)])

    def areas(self) -> np.ndarray:
        v = self.vertices.astype(np.float64)
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)


def face_normals(vertices: np.ndarray) -> np.ndarray:
    """Unit normals ``cross(v1 - v0, v2 - v0)``; zero vector for degenerate faces."""
    v = np.asarray(vertices, dtype=np.float64).reshape(-1, 3, 3)
    with np.errstate(invalid="ignore", over="ignore"):  # non-finite input is rejected elsewhere
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        length = np.linalg.norm(n, axis=1)
    out = np.zeros_like(n)
    ok = length > 0
    out[ok] = n[ok] / length[ok, None]
    return out.astype(np.float32)


def _unit_or_zero(normals):
    """Stored normals are either unit length or the zero vector."""
    n = np.asarray(normals, dtype=np.float64)
    length = np.linalg.norm(n, axis=1)
    out = np.zeros_like(n)
    fix = length > 1e-12
    out[fix] = n[fix] / length[fix, None]
    keep = np.abs(length - 1.0) <= 1e-5
    out[keep] = n[keep]
    return out.astype(np.float32)


def _check_finite(mesh_vertices, normals=None):
    if not np.all(np.isfinite(mesh_vertices)):
        raise NonFiniteError("non-finite vertex coordinate")
    if normals is not None and not np.all(np.isfinite(normals)):
        raise NonFiniteError("non-finite normal component")


# ---------------------------------------------------------------------------
# parsing

_FLOAT = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?|[-+]?(?:nan|inf|infinity)"


def _parse_float(token, lineno):
    if not re.fullmatch(_FLOAT, token, flags=re.IGNORECASE):
        raise MalformedError(f"expected a number, got {token!r}", lineno)
    return float(token)


def _parse_ascii(text: str, name: str) -> TriangleMesh:
    lines = [(i + 1, ln.split()) for i, ln in enumerate(text.splitlines())]
    lines = [(n, toks) for n, toks in lines if toks]
    if not lines or lines[0][1][0] != "solid":
        raise MalformedError("missing 'solid' header", 1)

    normals, verts = [], []
    pos = 1

    def expect(words):
        nonlocal pos
        if pos >= len(lines):
            raise MalformedError(f"unexpected end of file, expected {' '.join(words)!r}",
                                 lines[-1][0])
        lineno, toks = lines[pos]
        if toks != words:
            raise MalformedError(f"expected {' '.join(words)!r}, got {' '.join(toks)!r}", lineno)
        pos += 1

    while True:
        if pos >= len(lines):
            raise MalformedError("missing 'endsolid'", lines[-1][0])
        lineno, toks = lines[pos]
        if toks[0] == "endsolid":
            pos += 1
            break
        if len(toks) != 5 or toks[:2] != ["facet", "normal"]:
            raise MalformedError(f"expected 'facet normal nx ny nz', got {' '.join(toks)!r}", lineno)
        normals.append([_parse_float(t, lineno) for t in toks[2:]])
        pos += 1
        expect(["outer", "loop"])
        for _ in range(3):
            if pos >= len(lines):
                raise MalformedError("unexpected end of file in facet", lines[-1][0])
            lineno, toks = lines[pos]
            if len(toks) != 4 or toks[0] != "vertex":
                raise MalformedError(f"expected 'vertex x y z', got {' '.join(toks)!r}", lineno)
            verts.append([_parse_float(t, lineno) for t in toks[1:]])
            pos += 1
        expect(["endloop"])
        expect(["endfacet"])

    if pos != len(lines):
        raise MalformedError("trailing content after 'endsolid'", lines[pos][0])
    if not normals:
        raise EmptyMeshError("ASCII STL contains no facets")

    v = np.array(verts, dtype=np.float64)
    n = np.array(normals, dtype=np.float64)
    _check_finite(v, n)
    return TriangleMesh(v.astype(np.float32).reshape(-1, 3, 3),
                        _unit_or_zero(n), source_name=name)


def _parse_binary(data: bytes, name: str) -> TriangleMesh:
    if len(data) < HEADER_SIZE + 4:
        raise TruncatedError(f"binary STL needs at least 84 bytes, got {len(data)}")
    (count,) = struct.unpack_from("<I", data, HEADER_SIZE)
    expected = HEADER_SIZE + 4 + 50 * count
    if len(data) != expected:
        raise TruncatedError(
            f"binary STL declares {count} triangles ({expected} bytes), file has {len(data)} bytes")
    if count == 0:
        raise EmptyMeshError("binary STL declares zero triangles")
    rec = np.frombuffer(data, dtype=RECORD_DTYPE, count=count, offset=HEADER_SIZE + 4)
    _check_finite(rec["vertices"], rec["normal"])
    return TriangleMesh(rec["vertices"].copy(), _unit_or_zero(rec["normal"]), rec["attr"].copy(),
                        source_name=name)


def _looks_ascii(data: bytes) -> bool:
    head = data[:5]
    return head == b"solid" and (len(data) == 5 or data[5:6].isspace())


def parse_stl(data: bytes, name: str = "") -> TriangleMesh:
    """Parse an STL payload, auto-detecting ASCII vs binary.

    Payloads that open with ``solid`` but do not follow the facet grammar
    are re-read as binary, since plenty of binary exporters write ``solid``
    into the 80-byte header.

    Raises:
        TruncatedError: binary length disagrees with the declared count.
        MalformedError: ASCII grammar violation (carries the line number).
        NonFiniteError: NaN or Inf anywhere in the geometry.
    """
    if not data:
        raise TruncatedError("empty STL payload")
    if _looks_ascii(data):
        try:
            text = data.decode("ascii")
        except UnicodeDecodeError:
            text = None
        if text is not None:
            try:
                return _parse_ascii(text, name)
            except (MalformedError, EmptyMeshError) as ascii_error:
                try:
                    return _parse_binary(data, name)
                except TruncatedError:
                    raise ascii_error from None
        return _parse_binary(data, name)
    return _parse_binary(data, name)


def read_stl(path) -> TriangleMesh:
    with open(path, "rb") as f:
        return parse_stl(f.read(), name=str(path))


# ---------------------------------------------------------------------------
# writing

def write_stl(mesh: TriangleMesh, fmt: str = "binary") -> bytes:
    """Serialise ``mesh``; normals are always recomputed from the winding."""
    if len(mesh) == 0:
        raise EmptyMeshError("cannot write a mesh with zero triangles")
    _check_finite(mesh.vertices)
    normals = face_normals(mesh.vertices)
    if fmt == "binary":
        rec = np.zeros(len(mesh), dtype=RECORD_DTYPE)
        rec["normal"] = normals
        rec["vertices"] = mesh.vertices
        header = mesh.source_name.encode("ascii", "replace")[:HEADER_SIZE]
        # keep binary headers from masquerading as ASCII
        if header.startswith(b"solid"):
            header = b"binary " + header
        header = header[:HEADER_SIZE].ljust(HEADER_SIZE, b"\0")
        return header + struct.pack("<I", len(mesh)) + rec.tobytes()
    if fmt == "ascii":
        name = re.sub(r"\s+", "_", mesh.source_name) or "mesh"
        out = [f"solid {name}"]
        for n, tri in zip(normals.astype(np.float64), mesh.vertices.astype(np.float64)):
            out.append("  facet normal {:.8e} {:.8e} {:.8e}".format(*n))
            out.append("    outer loop")
            for v in tri:
                out.append("      vertex {:.8e} {:.8e} {:.8e}".format(*v))
            out.append("    endloop")
            out.append("  endfacet")
        out.append(f"endsolid {name}")
        return ("\n".join(out) + "\n").encode("ascii")
    raise ValueError(f"unknown STL format {fmt!r}")
