"""Fallback CAD kernel with a cadquery-compatible surface.

Loaded by the harness only when the real cadquery is not installed. It
covers the primitive subset simple generated scripts rely on — box,
cylinder, translate, union, and STL export — by tessellating directly to
triangles. Anything else raises with a message naming the supported
operations, which surfaces as an ordinary compile error.
"""

import math
import struct

_SUPPORTED = "box, cylinder, translate, union, val, vals, exportStl"

_BOX_FACES = (
    ((0, 0, 0), (1, 1, 0), (1, 0, 0)), ((0, 0, 0), (0, 1, 0), (1, 1, 0)),
    ((0, 0, 1), (1, 0, 1), (1, 1, 1)), ((0, 0, 1), (1, 1, 1), (0, 1, 1)),
    ((0, 0, 0), (1, 0, 0), (1, 0, 1)), ((0, 0, 0), (1, 0, 1), (0, 0, 1)),
    ((0, 1, 0), (1, 1, 1), (1, 1, 0)), ((0, 1, 0), (0, 1, 1), (1, 1, 1)),
    ((0, 0, 0), (0, 1, 1), (0, 1, 0)), ((0, 0, 0), (0, 0, 1), (0, 1, 1)),
    ((1, 0, 0), (1, 1, 0), (1, 1, 1)), ((1, 0, 0), (1, 1, 1), (1, 0, 1)),
)


def _box_triangles(length, width, height, centered):
    if isinstance(centered, (tuple, list)):
        offsets = [-0.5 * s if c else 0.0
                   for s, c in zip((length, width, height), centered)]
    elif centered:
        offsets = [-0.5 * length, -0.5 * width, -0.5 * height]
    else:
        offsets = [0.0, 0.0, 0.0]
    size = (length, width, height)
    triangles = []
    for face in _BOX_FACES:
        triangles.append(tuple(
            tuple(offsets[i] + size[i] * corner[i] for i in range(3))
            for corner in face))
    return triangles


def _cylinder_triangles(height, radius, centered, segments=64):
    z0 = -0.5 * height if centered else 0.0
    z1 = z0 + height
    ring = [(radius * math.cos(2 * math.pi * k / segments),
             radius * math.sin(2 * math.pi * k / segments)) for k in range(segments)]
    triangles = []
    for k in range(segments):
        (xa, ya) = ring[k]
        (xb, yb) = ring[(k + 1) % segments]
        triangles.append(((xa, ya, z0), (xb, yb, z0), (xb, yb, z1)))
        triangles.append(((xa, ya, z0), (xb, yb, z1), (xa, ya, z1)))
        triangles.append(((0.0, 0.0, z0), (xb, yb, z0), (xa, ya, z0)))
        triangles.append(((0.0, 0.0, z1), (xa, ya, z1), (xb, yb, z1)))
    return triangles


def _write_binary_stl(triangles, path):
    if not triangles:
        raise ValueError("nothing to export: the model holds no geometry")
    header = b"cad-script-runner fallback kernel".ljust(80, b"\0")
    out = bytearray(header)
    out += struct.pack("<I", len(triangles))
    for tri in triangles:
        (ax, ay, az), (bx, by, bz), (cx, cy, cz) = tri
        ux, uy, uz = bx - ax, by - ay, bz - az
        vx, vy, vz = cx - ax, cy - ay, cz - az
        nx, ny, nz = uy * vz - uz * vy, uz * vx - ux * vz, ux * vy - uy * vx
        norm = math.sqrt(nx * nx + ny * ny + nz * nz) or 1.0
        out += struct.pack("<3f", nx / norm, ny / norm, nz / norm)
        for vertex in tri:
            out += struct.pack("<3f", *vertex)
        out += struct.pack("<H", 0)
    with open(path, "wb") as handle:
        handle.write(bytes(out))


class _Solid:
    def __init__(self, triangles):
        self._triangles = list(triangles)

    def exportStl(self, path, *args, **kwargs):
        _write_binary_stl(self._triangles, path)


class Workplane:
    def __init__(self, inPlane="XY", origin=(0, 0, 0), obj=None):
        self.plane = inPlane
        self._triangles = []

    def _derive(self, triangles):
        derived = Workplane(self.plane)
        derived._triangles = triangles
        return derived

    def box(self, length, width, height, centered=True, **kwargs):
        return self._derive(self._triangles + _box_triangles(length, width, height, centered))

    def cylinder(self, height, radius, centered=True, **kwargs):
        return self._derive(self._triangles + _cylinder_triangles(height, radius, centered))

    def translate(self, vec):
        dx, dy, dz = tuple(vec)
        moved = [tuple((x + dx, y + dy, z + dz) for (x, y, z) in tri)
                 for tri in self._triangles]
        return self._derive(moved)

    def union(self, other, **kwargs):
        return self._derive(self._triangles + list(other._triangles))

    def val(self):
        return _Solid(self._triangles)

    def vals(self):
        return [self.val()]

    def exportStl(self, path, *args, **kwargs):
        self.val().exportStl(path)
        return self

    def __getattr__(self, name):
        raise AttributeError(
            f"fallback kernel: Workplane.{name} is not supported "
            f"(available: {_SUPPORTED}); install cadquery for the full API")


class exporters:
    @staticmethod
    def export(shape, fname, exportType=None, **kwargs):
        solid = shape.val() if isinstance(shape, Workplane) else shape
        solid.exportStl(fname)


__all__ = ["Workplane", "exporters"]
