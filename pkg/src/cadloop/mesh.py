"""Triangle meshes: STL parsing/writing and exact geometric properties.

STL binary layout: 80-byte header, little-endian uint32 facet count, then one
50-byte record per facet (normal + 3 vertices as float32 triples, plus a
2-byte attribute). ASCII layout: ``solid`` / ``facet normal`` / ``outer
loop`` / ``vertex`` / ``endsolid`` keywords, whitespace-tolerant. File
normals are ignored; they are recomputable from the vertices.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyMesh, MalformedStl

# Absolute vertex-merge tolerance in model units. STL stores 32-bit floats,
# so exact-equality dedup would miss quantization noise.
DEDUP_TOLERANCE = 1e-6

_RECORD = struct.Struct("<12fH")


@dataclass(frozen=True)
class Mesh:
    """An indexed triangle mesh with deduplicated vertices.

    ``vertices`` is (V, 3) float64, ``triangles`` is (T, 3) int indices into
    it. Instances are immutable and safe to share across threads.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    source_name: str = ""

    def __post_init__(self):
        verts = np.ascontiguousarray(np.asarray(self.vertices, dtype=np.float64))
        tris = np.ascontiguousarray(np.asarray(self.triangles, dtype=np.int64))
        if tris.size == 0:
            raise EmptyMesh("mesh has no triangles")
        if verts.ndim != 2 or verts.shape[1] != 3 or tris.ndim != 2 or tris.shape[1] != 3:
            raise ValueError("vertices must be (V, 3) and triangles (T, 3)")
        if not np.isfinite(verts).all():
            raise ValueError("vertex coordinates must be finite")
        if tris.min() < 0 or tris.max() >= len(verts):
            raise ValueError("triangle index out of range")
        _check_separation(verts, DEDUP_TOLERANCE)
        verts.flags.writeable = False
        tris.flags.writeable = False
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "triangles", tris)

    @classmethod
    def from_triangle_soup(cls, corners, source_name=""):
        """Build a mesh from (T, 3, 3) corner coordinates, merging vertices
        that fall within DEDUP_TOLERANCE of each other."""
        corners = np.asarray(corners, dtype=np.float64)
        if corners.size == 0:
            raise EmptyMesh("triangle soup is empty")
        flat = corners.reshape(-1, 3)
        verts, index = _dedup_vertices(flat, DEDUP_TOLERANCE)
        return cls(verts, index.reshape(-1, 3), source_name)

    @property
    def triangle_count(self):
        return len(self.triangles)

    @property
    def vertex_count(self):
        return len(self.vertices)

    def corners(self):
        """(T, 3, 3) corner coordinates of every triangle."""
        return self.vertices[self.triangles]

    def transformed(self, rotation=None, translation=None):
        """A copy with vertices mapped through ``R @ v + t``."""
        verts = self.vertices
        if rotation is not None:
            verts = verts @ np.asarray(rotation, dtype=np.float64).T
        if translation is not None:
            verts = verts + np.asarray(translation, dtype=np.float64)
        return Mesh(verts, self.triangles.copy(), self.source_name)


@dataclass(frozen=True)
class GeometricProperties:
    """The thirteen-category numeric summary of a mesh."""

    width: float
    height: float
    depth: float
    bbox_diagonal: float
    bbox_volume: float
    enclosed_volume: float
    surface_area: float
    triangle_count: int
    vertex_count: int
    edge_count: int
    centroid_x: float
    centroid_y: float
    centroid_z: float

    CATEGORY_NAMES = (
        "width", "height", "depth", "bbox_diagonal", "bbox_volume",
        "enclosed_volume", "surface_area", "triangle_count", "vertex_count",
        "edge_count", "centroid_x", "centroid_y", "centroid_z",
    )

    def as_pairs(self):
        """Ordered (category, value) pairs for all thirteen categories."""
        return tuple((name, getattr(self, name)) for name in self.CATEGORY_NAMES)


@dataclass(frozen=True)
class ComplexityScore:
    vertex_count: int
    face_count: int
    score: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "score", self.vertex_count + self.face_count)


def _check_separation(verts, tol):
    """Reject vertex sets with two points within ``tol`` of each other."""
    _, index = _dedup_vertices(verts, tol)
    if len(np.unique(index)) != len(verts):
        raise ValueError(f"two vertices closer than the {tol} dedup tolerance")


def _dedup_vertices(points, tol):
    """Merge points within ``tol`` (Euclidean); returns (reps, index_map).

    Points are bucketed on a grid of cell size ``tol``; any two points within
    ``tol`` land in the same or adjacent cells, so scanning the 27-cell
    neighborhood of each insertion is exact.
    """
    points = np.asarray(points, dtype=np.float64)
    # Fast path: collapse exact duplicates first.
    uniq, inverse = np.unique(points, axis=0, return_inverse=True)
    cells = np.floor(uniq / tol).astype(np.int64)
    buckets: dict[tuple[int, int, int], list[int]] = {}
    reps: list[np.ndarray] = []
    uniq_to_rep = np.empty(len(uniq), dtype=np.int64)
    tol_sq = tol * tol
    offsets = [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)]
    for i, (p, c) in enumerate(zip(uniq, cells)):
        key = (int(c[0]), int(c[1]), int(c[2]))
        found = -1
        for off in offsets:
            neighbor = (key[0] + off[0], key[1] + off[1], key[2] + off[2])
            for rep_idx in buckets.get(neighbor, ()):
                d = reps[rep_idx] - p
                if d[0] * d[0] + d[1] * d[1] + d[2] * d[2] <= tol_sq:
                    found = rep_idx
                    break
            if found >= 0:
                break
        if found < 0:
            found = len(reps)
            reps.append(p)
            buckets.setdefault(key, []).append(found)
        uniq_to_rep[i] = found
    return np.array(reps, dtype=np.float64), uniq_to_rep[inverse]


# -- STL parsing -------------------------------------------------------------

def parse_stl(data: bytes, source_name: str = "") -> Mesh:
    """Parse binary or ASCII STL bytes into a deduplicated Mesh.

    The variant is detected automatically: an exact binary length match wins,
    otherwise a leading ``solid`` with a ``facet`` keyword selects ASCII.
    """
    if not data:
        raise MalformedStl("empty input")
    if _binary_length_matches(data):
        corners = _parse_binary(data)
    elif data.lstrip()[:5] == b"solid" and b"facet" in data[:4096]:
        corners = _parse_ascii(data)
    elif len(data) >= 84:
        corners = _parse_binary(data)
    else:
        raise MalformedStl("input too short for binary STL and not ASCII")
    if len(corners) == 0:
        raise EmptyMesh("STL declares zero facets")
    return Mesh.from_triangle_soup(corners, source_name)


def _binary_length_matches(data):
    if len(data) < 84:
        return False
    (count,) = struct.unpack_from("<I", data, 80)
    return len(data) == 84 + 50 * count


def _parse_binary(data):
    if len(data) < 84:
        raise MalformedStl("binary STL shorter than its 84-byte preamble")
    (count,) = struct.unpack_from("<I", data, 80)
    expected = 84 + 50 * count
    if len(data) < expected:
        raise MalformedStl(
            f"binary STL truncated: header declares {count} facets, "
            f"payload holds {(len(data) - 84) // 50}")
    if len(data) > expected:
        raise MalformedStl("binary STL facet count mismatch: trailing bytes")
    corners = np.empty((count, 3, 3), dtype=np.float64)
    offset = 84
    for i in range(count):
        values = _RECORD.unpack_from(data, offset)
        corners[i] = np.array(values[3:12], dtype=np.float64).reshape(3, 3)
        offset += 50
    return corners


def _parse_ascii(data):
    try:
        text = data.decode("utf-8", errors="replace")
    except Exception as exc:  # pragma: no cover - decode with replace cannot fail
        raise MalformedStl(f"undecodable ASCII STL: {exc}")
    tokens = text.split()
    pos = 0

    def peek():
        return tokens[pos] if pos < len(tokens) else None

    def take(expected=None):
        nonlocal pos
        if pos >= len(tokens):
            raise MalformedStl(f"unterminated ASCII solid: expected {expected or 'token'}")
        tok = tokens[pos]
        pos += 1
        if expected is not None and tok.lower() != expected:
            raise MalformedStl(f"expected '{expected}', found '{tok}'")
        return tok

    def take_float():
        tok = take()
        try:
            return float(tok)
        except ValueError:
            raise MalformedStl(f"bad coordinate '{tok}'")

    take("solid")
    # Optional solid name: everything until the first keyword.
    while peek() is not None and peek().lower() not in ("facet", "endsolid"):
        pos += 1
    corners = []
    while True:
        tok = peek()
        if tok is None:
            raise MalformedStl("unterminated ASCII solid: missing 'endsolid'")
        if tok.lower() == "endsolid":
            break
        take("facet")
        take("normal")
        for _ in range(3):
            take_float()
        take("outer")
        take("loop")
        tri = []
        for _ in range(3):
            take("vertex")
            tri.append([take_float(), take_float(), take_float()])
        take("endloop")
        take("endfacet")
        corners.append(tri)
    return np.asarray(corners, dtype=np.float64)


# -- STL writing -------------------------------------------------------------

def write_stl(mesh: Mesh, ascii_format: bool = False) -> bytes:
    """Serialize a mesh to STL bytes (binary by default).

    Normals are recomputed from the winding; degenerate triangles get a zero
    normal, which readers tolerate.
    """
    corners = mesh.corners()
    normals = np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0])
    lengths = np.linalg.norm(normals, axis=1)
    safe = np.where(lengths > 0, lengths, 1.0)
    normals = normals / safe[:, None]
    normals[lengths == 0] = 0.0
    if ascii_format:
        name = mesh.source_name or "mesh"
        lines = [f"solid {name}"]
        for n, tri in zip(normals, corners):
            lines.append(f"  facet normal {n[0]:.9g} {n[1]:.9g} {n[2]:.9g}")
            lines.append("    outer loop")
            for v in tri:
                lines.append(f"      vertex {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}")
            lines.append("    endloop")
            lines.append("  endfacet")
        lines.append(f"endsolid {name}")
        return ("\n".join(lines) + "\n").encode("utf-8")
    header = b"cadloop binary stl".ljust(80, b"\0")
    out = bytearray(header)
    out += struct.pack("<I", len(corners))
    for n, tri in zip(normals.astype(np.float32), corners.astype(np.float32)):
        out += _RECORD.pack(*n, *tri.reshape(9), 0)
    return bytes(out)


# -- geometric properties ----------------------------------------------------

def geometric_properties(mesh: Mesh) -> GeometricProperties:
    """Compute the thirteen-category summary of a mesh.

    Enclosed volume is the absolute value of the signed-tetrahedron sum over
    all facets, so it is insensitive to winding. Degenerate (zero-area)
    triangles are kept in the counts but excluded from the surface area and
    the area-weighted centroid.
    """
    corners = mesh.corners()
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    extent = hi - lo
    cross = np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0])
    areas = 0.5 * np.linalg.norm(cross, axis=1)
    signed = np.einsum("ij,ij->i", corners[:, 0], np.cross(corners[:, 1], corners[:, 2]))
    volume = abs(signed.sum()) / 6.0
    live = areas > 0.0
    total_area = float(areas[live].sum())
    if total_area > 0.0:
        tri_centroids = corners[live].mean(axis=1)
        centroid = (tri_centroids * areas[live, None]).sum(axis=0) / total_area
    else:
        centroid = mesh.vertices.mean(axis=0)
    edges = np.concatenate([
        mesh.triangles[:, [0, 1]],
        mesh.triangles[:, [1, 2]],
        mesh.triangles[:, [2, 0]],
    ])
    edges = np.sort(edges, axis=1)
    edges = edges[edges[:, 0] != edges[:, 1]]
    edge_count = len(np.unique(edges, axis=0))
    return GeometricProperties(
        width=float(extent[0]),
        height=float(extent[1]),
        depth=float(extent[2]),
        bbox_diagonal=float(np.linalg.norm(extent)),
        bbox_volume=float(extent[0] * extent[1] * extent[2]),
        enclosed_volume=float(volume),
        surface_area=total_area,
        triangle_count=mesh.triangle_count,
        vertex_count=mesh.vertex_count,
        edge_count=int(edge_count),
        centroid_x=float(centroid[0]),
        centroid_y=float(centroid[1]),
        centroid_z=float(centroid[2]),
    )


def mesh_complexity(mesh: Mesh) -> ComplexityScore:
    """Deduplicated vertex count plus face count."""
    return ComplexityScore(vertex_count=mesh.vertex_count, face_count=mesh.triangle_count)


# -- primitive builders --------------------------------------------------------

_BOX_FACES = (
    ((0, 0, 0), (1, 1, 0), (1, 0, 0)), ((0, 0, 0), (0, 1, 0), (1, 1, 0)),
    ((0, 0, 1), (1, 0, 1), (1, 1, 1)), ((0, 0, 1), (1, 1, 1), (0, 1, 1)),
    ((0, 0, 0), (1, 0, 0), (1, 0, 1)), ((0, 0, 0), (1, 0, 1), (0, 0, 1)),
    ((0, 1, 0), (1, 1, 1), (1, 1, 0)), ((0, 1, 0), (0, 1, 1), (1, 1, 1)),
    ((0, 0, 0), (0, 1, 1), (0, 1, 0)), ((0, 0, 0), (0, 0, 1), (0, 1, 1)),
    ((1, 0, 0), (1, 1, 0), (1, 1, 1)), ((1, 0, 0), (1, 1, 1), (1, 0, 1)),
)


def box_mesh(size=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0), source_name="box") -> Mesh:
    """An axis-aligned box as 12 outward-wound triangles over 8 vertices."""
    size = np.asarray(size, dtype=np.float64)
    origin = np.asarray(origin, dtype=np.float64)
    soup = np.array(
        [[origin + size * np.asarray(c, dtype=np.float64) for c in face]
         for face in _BOX_FACES])
    return Mesh.from_triangle_soup(soup, source_name=source_name)


def cylinder_mesh(radius=1.0, height=1.0, segments=64, origin=(0.0, 0.0, 0.0),
                  source_name="cylinder") -> Mesh:
    """A closed z-axis cylinder with triangle-fan caps, base at ``origin``."""
    if segments < 3:
        raise ValueError("a cylinder needs at least 3 segments")
    origin = np.asarray(origin, dtype=np.float64)
    angles = 2.0 * np.pi * np.arange(segments) / segments
    ring = np.stack([radius * np.cos(angles), radius * np.sin(angles),
                     np.zeros(segments)], axis=1)
    soup = []
    for i in range(segments):
        a = ring[i]
        b = ring[(i + 1) % segments]
        top = np.array([0.0, 0.0, height])
        soup.append([a, b, b + top])
        soup.append([a, b + top, a + top])
        soup.append([np.zeros(3), b, a])
        soup.append([top, a + top, b + top])
    return Mesh.from_triangle_soup(np.asarray(soup) + origin, source_name=source_name)
