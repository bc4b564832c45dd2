"""Shared fixtures: independent STL oracle writer and reference solids.

The STL writer here is deliberately independent of cadloop.mesh.write_stl so
parser tests check against bytes produced by a second implementation.
"""

import struct

import numpy as np
import pytest

from cadloop.mesh import Mesh

# Unit-cube triangulation: 12 facets, 8 distinct corners, outward winding.
_CUBE_FACES = [
    ((0, 0, 0), (1, 1, 0), (1, 0, 0)), ((0, 0, 0), (0, 1, 0), (1, 1, 0)),
    ((0, 0, 1), (1, 0, 1), (1, 1, 1)), ((0, 0, 1), (1, 1, 1), (0, 1, 1)),
    ((0, 0, 0), (1, 0, 0), (1, 0, 1)), ((0, 0, 0), (1, 0, 1), (0, 0, 1)),
    ((0, 1, 0), (1, 1, 1), (1, 1, 0)), ((0, 1, 0), (0, 1, 1), (1, 1, 1)),
    ((0, 0, 0), (0, 1, 1), (0, 1, 0)), ((0, 0, 0), (0, 0, 1), (0, 1, 1)),
    ((1, 0, 0), (1, 1, 0), (1, 1, 1)), ((1, 0, 0), (1, 1, 1), (1, 0, 1)),
]


def box_corners(size=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
    """(12, 3, 3) triangle-corner array for an axis-aligned box."""
    size = np.asarray(size, dtype=np.float64)
    origin = np.asarray(origin, dtype=np.float64)
    return np.array(
        [[origin + size * np.asarray(c) for c in face] for face in _CUBE_FACES],
        dtype=np.float64)


def box_mesh(size=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0), name="box"):
    return Mesh.from_triangle_soup(box_corners(size, origin), source_name=name)


def oracle_write_binary_stl(corners, header=b"oracle"):
    """Independent binary STL writer: 80-byte header, uint32 count, 50-byte
    records of 12 little-endian float32 plus a 2-byte attribute."""
    out = bytearray(header.ljust(80, b"\0"))
    out += struct.pack("<I", len(corners))
    for tri in corners:
        out += struct.pack("<3f", 0.0, 0.0, 0.0)
        for vertex in tri:
            out += struct.pack("<3f", *[float(c) for c in vertex])
        out += struct.pack("<H", 0)
    return bytes(out)


def pytest_runtest_logreport(report):
    # one PASS/FAIL line per acceptance criterion
    if report.when != "call":
        return
    if "test_acceptance.py" in report.nodeid:
        name = report.nodeid.split("::")[-1].replace("test_", "", 1)
        print(f"\nACCEPTANCE {name}: {'PASS' if report.passed else 'FAIL'}")
    elif "test_runner_integration.py" in report.nodeid:
        name = report.nodeid.split("::")[-1].replace("test_", "", 1)
        print(f"\nACCEPTANCE [runner] {name}: {'PASS' if report.passed else 'FAIL'}")


@pytest.fixture
def unit_cube():
    return box_mesh()


@pytest.fixture
def unit_cube_stl_bytes():
    return oracle_write_binary_stl(box_corners())
