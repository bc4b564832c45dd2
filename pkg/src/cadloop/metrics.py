"""Point-cloud similarity scoring between generated and ground-truth meshes.

The scoring pipeline for one pair is: sample both surfaces in model units,
rigidly align the generated cloud onto the ground truth with point-to-point
ICP, normalize each cloud independently into the unit cube, then compute the
three metrics (symmetric chamfer mean, Hausdorff, bounding-box intersection
over the ground-truth box). A pair whose script never compiled is scored
with the maximal penalties instead: distance sqrt(3), overlap 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateCloud, EmptyCloud, EvaluationFailed, ZeroAreaMesh
from .mesh import Mesh

# Penalty for a stage that produced no object: the largest distance between
# two points in the unit cube, stored as the nearest double.
FAILURE_DISTANCE = math.sqrt(3.0)

ICP_MAX_ITERATIONS = 50
ICP_CONVERGENCE_TOL = 1e-6

STAGE_GENERATED = "generated"
STAGE_BEST_REFINE = "best_refine"


def refine_stage(round_index: int) -> str:
    return f"refine{round_index}"


@dataclass(frozen=True)
class PointCloud:
    """A fixed-size 3D point set sampled from a mesh surface."""

    points: np.ndarray
    seed: int | None = None
    source: str = ""

    def __post_init__(self):
        pts = np.ascontiguousarray(np.asarray(self.points, dtype=np.float64))
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError("points must be (N, 3)")
        if len(pts) == 0:
            raise EmptyCloud("point cloud has no points")
        if not np.isfinite(pts).all():
            raise ValueError("point coordinates must be finite")
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class RigidTransform:
    """Rotation plus translation: maps p to R @ p + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.abs(r.T @ r - np.eye(3)).max() > 1e-9:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise ValueError("rotation determinant must be +1")
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points):
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation


@dataclass(frozen=True)
class MetricRecord:
    """One (example, stage) scoring."""

    iogt: float
    pcd: float
    hausdorff: float
    compiled: bool
    stage: str = STAGE_GENERATED

    def __post_init__(self):
        if not self.compiled:
            if (self.pcd, self.hausdorff, self.iogt) != (FAILURE_DISTANCE, FAILURE_DISTANCE, 0.0):
                raise ValueError("uncompiled records must carry the exact penalty values")
        if not (0.0 <= self.iogt <= 1.0):
            raise ValueError("iogt must lie in [0, 1]")
        if self.pcd < 0.0 or self.hausdorff < 0.0:
            raise ValueError("distances must be non-negative")
        if self.pcd > self.hausdorff + 1e-12:
            raise ValueError("chamfer mean cannot exceed the Hausdorff distance")

    def retagged(self, stage):
        return replace(self, stage=stage)


def penalty_record(stage: str = STAGE_GENERATED) -> MetricRecord:
    """The score assigned to a stage whose script never produced an object."""
    return MetricRecord(iogt=0.0, pcd=FAILURE_DISTANCE, hausdorff=FAILURE_DISTANCE,
                        compiled=False, stage=stage)


# -- deterministic sampling ---------------------------------------------------

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _mix64(x):
    """splitmix64 finalizer, vectorized over uint64 arrays."""
    x = (x + _GAMMA).astype(np.uint64)
    x ^= x >> np.uint64(30)
    x = (x * _MIX1).astype(np.uint64)
    x ^= x >> np.uint64(27)
    x = (x * _MIX2).astype(np.uint64)
    x ^= x >> np.uint64(31)
    return x


def _uniforms(seed, a, b, stream):
    """Uniform [0, 1) doubles from the counters (seed, a, b, stream).

    Counter-based so draws are reproducible across platforms and independent
    of evaluation order.
    """
    h = _mix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) ^ np.asarray(a, dtype=np.uint64))
    h = _mix64(h ^ np.asarray(b, dtype=np.uint64))
    h = _mix64(h ^ np.uint64(stream))
    return (h >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)


def sample_surface(mesh: Mesh, n: int, seed: int) -> PointCloud:
    """Draw ``n`` points, triangle-proportional to area, uniform within each
    triangle. Deterministic given (mesh, n, seed)."""
    if n < 1:
        raise ValueError("sample size must be >= 1")
    corners = mesh.corners()
    e1 = corners[:, 1] - corners[:, 0]
    e2 = corners[:, 2] - corners[:, 0]
    areas = 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)
    total = areas.sum()
    if total <= 0.0:
        raise ZeroAreaMesh("mesh has zero total surface area")
    cdf = np.cumsum(areas) / total
    sample_ids = np.arange(n, dtype=np.uint64)
    u = _uniforms(seed, sample_ids, 0, stream=0)
    tri = np.searchsorted(cdf, u, side="right")
    tri = np.minimum(tri, len(areas) - 1)
    a = _uniforms(seed, tri, sample_ids, stream=1)
    b = _uniforms(seed, tri, sample_ids, stream=2)
    outside = a + b > 1.0
    a[outside] = 1.0 - a[outside]
    b[outside] = 1.0 - b[outside]
    points = corners[tri, 0] + a[:, None] * e1[tri] + b[:, None] * e2[tri]
    return PointCloud(points, seed=seed, source=mesh.source_name)


# -- normalization and alignment ----------------------------------------------

def normalize_unit_cube(cloud: PointCloud) -> PointCloud:
    """Translate the minimum corner to the origin and divide by the largest
    axis extent; the result lies in [0, 1]^3 with aspect ratios preserved."""
    lo = cloud.points.min(axis=0)
    extent = float((cloud.points.max(axis=0) - lo).max())
    if extent == 0.0:
        raise DegenerateCloud("all points coincide; no extent to normalize")
    return PointCloud((cloud.points - lo) / extent, seed=cloud.seed, source=cloud.source)


def _best_rigid_fit(source, target):
    """Least-squares rotation/translation taking source points onto target
    points with known correspondences (SVD closed form)."""
    sc = source.mean(axis=0)
    tc = target.mean(axis=0)
    h = (source - sc).T @ (target - tc)
    u, _, vt = np.linalg.svd(h)
    r = vt.T @ u.T
    if np.linalg.det(r) < 0:
        vt[2, :] *= -1.0
        r = vt.T @ u.T
    t = tc - r @ sc
    return r, t


def icp_align(moving: PointCloud, fixed: PointCloud,
              max_iterations: int = ICP_MAX_ITERATIONS,
              tol: float = ICP_CONVERGENCE_TOL):
    """Point-to-point ICP aligning ``moving`` onto ``fixed``.

    Initialization is centroid alignment with identity rotation; each
    iteration takes exact nearest neighbors from a k-d tree and applies the
    closed-form SVD update. Stops when the RMS residual changes by less than
    ``tol`` or after ``max_iterations``.

    Returns (transform, aligned_cloud, rms_history); the history of RMS
    nearest-neighbor residuals is non-increasing.
    """
    if len(moving) == 0 or len(fixed) == 0:  # pragma: no cover - PointCloud forbids
        raise EmptyCloud("ICP needs nonempty clouds")
    tree = cKDTree(fixed.points)
    r_total = np.eye(3)
    t_total = fixed.points.mean(axis=0) - moving.points.mean(axis=0)
    current = moving.points + t_total
    history = []
    prev_rms = None
    for _ in range(max_iterations):
        dist, idx = tree.query(current)
        rms = float(np.sqrt(np.mean(dist ** 2)))
        history.append(rms)
        if rms == 0.0:
            break
        if prev_rms is not None and abs(prev_rms - rms) < tol:
            break
        prev_rms = rms
        r, t = _best_rigid_fit(current, fixed.points[idx])
        current = current @ r.T + t
        r_total = r @ r_total
        t_total = r @ t_total + t
    transform = RigidTransform(r_total, t_total)
    aligned = PointCloud(current, seed=moving.seed, source=moving.source)
    return transform, aligned, history


# -- the three metrics ---------------------------------------------------------

def point_cloud_distance(p: PointCloud, q: PointCloud) -> float:
    """Symmetric chamfer mean: half the mean nearest-neighbor distance from
    each cloud to the other."""
    d_pq, _ = cKDTree(q.points).query(p.points)
    d_qp, _ = cKDTree(p.points).query(q.points)
    return float(0.5 * d_pq.mean() + 0.5 * d_qp.mean())


def hausdorff_distance(p: PointCloud, q: PointCloud) -> float:
    """Max of the two directed nearest-neighbor maxima."""
    d_pq, _ = cKDTree(q.points).query(p.points)
    d_qp, _ = cKDTree(p.points).query(q.points)
    return float(max(d_pq.max(), d_qp.max()))


def iogt(generated: PointCloud, ground_truth: PointCloud) -> float:
    """Axis-aligned bounding-box intersection volume over the ground-truth
    box volume, clamped to [0, 1]. Not symmetric."""
    g_lo, g_hi = generated.points.min(axis=0), generated.points.max(axis=0)
    t_lo, t_hi = ground_truth.points.min(axis=0), ground_truth.points.max(axis=0)
    gt_volume = float(np.prod(t_hi - t_lo))
    if gt_volume == 0.0:
        raise DegenerateCloud("ground-truth bounding box has zero volume")
    overlap = np.minimum(g_hi, t_hi) - np.maximum(g_lo, t_lo)
    if (overlap <= 0.0).any():
        return 0.0
    return float(min(1.0, np.prod(overlap) / gt_volume))


def evaluate_pair(generated: Mesh | None, ground_truth: Mesh,
                  n: int = 1000, seed: int = 0,
                  stage: str = STAGE_GENERATED) -> MetricRecord:
    """Score one generated object against its ground truth.

    ``generated`` may be None for a stage that never compiled, which yields
    the exact penalty record instead of geometry.
    """
    if generated is None:
        return penalty_record(stage)
    try:
        gen_cloud = sample_surface(generated, n, seed)
        gt_cloud = sample_surface(ground_truth, n, seed)
        _, aligned, _ = icp_align(gen_cloud, gt_cloud)
        gen_norm = normalize_unit_cube(aligned)
        gt_norm = normalize_unit_cube(gt_cloud)
        return MetricRecord(
            iogt=iogt(gen_norm, gt_norm),
            pcd=point_cloud_distance(gen_norm, gt_norm),
            hausdorff=hausdorff_distance(gen_norm, gt_norm),
            compiled=True,
            stage=stage,
        )
    except (ZeroAreaMesh, DegenerateCloud) as exc:
        raise EvaluationFailed(str(exc)) from exc


def dump_xyz(cloud: PointCloud, path) -> None:
    """Write a debug dump, one ``x y z`` line per point."""
    with open(path, "w", encoding="utf-8") as handle:
        for x, y, z in cloud.points:
            handle.write(f"{x:.17g} {y:.17g} {z:.17g}\n")
