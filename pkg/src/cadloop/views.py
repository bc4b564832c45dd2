"""Deterministic offscreen rendering of a mesh from four reference yaws.

Camera model: perspective projection, elevation 30 degrees above the
horizontal, distance 2.5x the bounding-sphere radius, look-at at the bbox
center, up = +z, yaw measured about +z at 0/90/180/270 degrees. The field of
view is widened by a 10% margin over the bounding sphere's tangent cone so
the whole object stays in frame. Shading is flat per-triangle Lambert with
the light at the camera (two-sided, since STL winding is unreliable) over a
solid white background. Rasterization is a plain z-buffer over pixel
centers, so identical inputs produce byte-identical images.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .mesh import Mesh

VIEW_ANGLES = (0, 90, 180, 270)

ELEVATION_DEG = 30.0
DISTANCE_FACTOR = 2.5
FRAME_MARGIN = 0.10
BASE_COLOR = np.array([70.0, 130.0, 180.0])
BACKGROUND = 255


@dataclass(frozen=True)
class RenderedView:
    """One rasterized view: 8-bit RGB pixels plus the per-pixel depth
    (distance along the camera forward axis, +inf for background)."""

    angle: int
    pixels: np.ndarray
    depth: np.ndarray

    def png_bytes(self) -> bytes:
        return encode_png(self.pixels)

    def silhouette(self) -> np.ndarray:
        """Boolean mask of pixels covered by the object."""
        return np.isfinite(self.depth)


@dataclass(frozen=True)
class ViewSet:
    """The four reference views of one object, all at the same resolution."""

    views: tuple[RenderedView, ...]
    resolution: int
    mesh_label: str = ""

    def __post_init__(self):
        if len(self.views) != 4:
            raise ValueError("a view set holds exactly four views")
        if tuple(v.angle for v in self.views) != VIEW_ANGLES:
            raise ValueError(f"view angles must be {VIEW_ANGLES}")
        if any(v.pixels.shape[0] != self.resolution for v in self.views):
            raise ValueError("all views must match the stated resolution")

    def __iter__(self):
        return iter(self.views)

    def view(self, angle: int) -> RenderedView:
        return self.views[VIEW_ANGLES.index(angle)]

    def png_images(self) -> list[bytes]:
        return [v.png_bytes() for v in self.views]

    def save(self, directory, label=None) -> list[str]:
        """Write the four PNGs as <label>_view<angle>.png; returns paths."""
        from pathlib import Path

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        label = label if label is not None else (self.mesh_label or "mesh")
        paths = []
        for v in self.views:
            path = directory / f"{label}_view{v.angle}.png"
            path.write_bytes(v.png_bytes())
            paths.append(str(path))
        return paths


def render_views(mesh: Mesh, resolution: int = 512) -> ViewSet:
    """Render the four reference views of a mesh."""
    if resolution < 64:
        raise ValueError("resolution must be at least 64 pixels")
    views = tuple(
        _render_single(mesh, angle, resolution) for angle in VIEW_ANGLES
    )
    return ViewSet(views=views, resolution=resolution, mesh_label=mesh.source_name)


def _camera(mesh, angle_deg):
    center = 0.5 * (mesh.vertices.min(axis=0) + mesh.vertices.max(axis=0))
    radius = 0.5 * float(np.linalg.norm(mesh.vertices.max(axis=0) - mesh.vertices.min(axis=0)))
    radius = max(radius, 1e-9)
    distance = DISTANCE_FACTOR * radius
    yaw = np.deg2rad(angle_deg)
    elev = np.deg2rad(ELEVATION_DEG)
    eye = center + distance * np.array([
        np.cos(elev) * np.cos(yaw), np.cos(elev) * np.sin(yaw), np.sin(elev),
    ])
    forward = (center - eye) / np.linalg.norm(center - eye)
    right = np.cross(forward, np.array([0.0, 0.0, 1.0]))
    right /= np.linalg.norm(right)
    up = np.cross(right, forward)
    # Tangent cone of the bounding sphere, widened by the frame margin.
    half_fov = np.arctan(np.tan(np.arcsin(min(0.999, radius / distance))) / (1.0 - FRAME_MARGIN))
    focal = 1.0 / np.tan(half_fov)
    return eye, right, up, forward, focal


def _render_single(mesh, angle_deg, resolution):
    eye, right, up, forward, focal = _camera(mesh, angle_deg)
    rel = mesh.vertices - eye
    cam = np.stack([rel @ right, rel @ up, rel @ forward], axis=1)
    depth_v = cam[:, 2]
    # Screen positions in continuous pixel coordinates (y down).
    sx = (focal * cam[:, 0] / depth_v * 0.5 + 0.5) * resolution
    sy = (0.5 - focal * cam[:, 1] / depth_v * 0.5) * resolution
    inv_depth_v = 1.0 / depth_v

    corners = mesh.corners()
    normals = np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0])
    lengths = np.linalg.norm(normals, axis=1)

    pixels = np.full((resolution, resolution, 3), BACKGROUND, dtype=np.uint8)
    zbuffer = np.zeros((resolution, resolution))  # stores 1/depth; larger = nearer

    for t, tri in enumerate(mesh.triangles):
        if lengths[t] == 0.0:
            continue
        xs, ys = sx[tri], sy[tri]
        x0 = max(int(np.floor(xs.min() - 0.5)), 0)
        x1 = min(int(np.ceil(xs.max() + 0.5)), resolution - 1)
        y0 = max(int(np.floor(ys.min() - 0.5)), 0)
        y1 = min(int(np.ceil(ys.max() + 0.5)), resolution - 1)
        if x1 < x0 or y1 < y0:
            continue
        area = (xs[1] - xs[0]) * (ys[2] - ys[0]) - (xs[2] - xs[0]) * (ys[1] - ys[0])
        if area == 0.0:
            continue
        px, py = np.meshgrid(
            np.arange(x0, x1 + 1) + 0.5, np.arange(y0, y1 + 1) + 0.5)
        w0 = ((xs[1] - px) * (ys[2] - py) - (xs[2] - px) * (ys[1] - py)) / area
        w1 = ((xs[2] - px) * (ys[0] - py) - (xs[0] - px) * (ys[2] - py)) / area
        w2 = 1.0 - w0 - w1
        inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
        if not inside.any():
            continue
        # 1/depth interpolates linearly in screen space for a planar triangle.
        inv_z = (w0 * inv_depth_v[tri[0]] + w1 * inv_depth_v[tri[1]]
                 + w2 * inv_depth_v[tri[2]])
        window = zbuffer[y0:y1 + 1, x0:x1 + 1]
        win = inside & (inv_z > window)
        if not win.any():
            continue
        # Two-sided headlight Lambert with an ambient floor.
        lambert = abs(float(normals[t] @ forward)) / lengths[t]
        shade = np.clip(0.25 + 0.75 * lambert, 0.0, 1.0)
        color = np.clip(np.round(BASE_COLOR * shade), 0, 255).astype(np.uint8)
        window[win] = inv_z[win]
        pixels[y0:y1 + 1, x0:x1 + 1][win] = color

    depth = np.full_like(zbuffer, np.inf)
    covered = zbuffer > 0.0
    depth[covered] = 1.0 / zbuffer[covered]
    depth.flags.writeable = False
    pixels.flags.writeable = False
    return RenderedView(angle=angle_deg, pixels=pixels, depth=depth)


def encode_png(pixels: np.ndarray) -> bytes:
    """Minimal 8-bit RGB PNG encoder (filter 0, fixed zlib level)."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    height, width, channels = pixels.shape
    if channels != 3:
        raise ValueError("expected an RGB image")
    raw = b"".join(b"\x00" + pixels[row].tobytes() for row in range(height))

    def chunk(tag, payload):
        block = tag + payload
        return struct.pack(">I", len(payload)) + block + struct.pack(">I", zlib.crc32(block))

    header = struct.pack(">IIBBBBB", width, height, 8, 2, 0, 0, 0)
    return (b"\x89PNG\r\n\x1a\n"
            + chunk(b"IHDR", header)
            + chunk(b"IDAT", zlib.compress(raw, 6))
            + chunk(b"IEND", b""))
