"""Ego-motion compensation, multi-scan aggregation and voxelization."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import LengthMismatch, MissingVoxel, NonRigidPose
from .kitti_io import RawScan, check_rigid

__all__ = [
    "SpatioTemporalCloud",
    "VoxelGrid",
    "relative_pose",
    "transform_scan",
    "aggregate_scans",
    "voxelize",
    "devoxelize",
    "augment_random",
]


@dataclass
class SpatioTemporalCloud:
    """Aggregated 4D cloud.

    ``points`` is ``(N, 4)`` with columns x, y, z, t where t is the integer scan
    index (0 = current scan). Points of one scan are contiguous, current scan first.
    ``batch`` optionally tags points with a batch element id.
    """

    points: np.ndarray
    counts_per_scan: list[int]
    batch: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)
        self.counts_per_scan = [int(c) for c in self.counts_per_scan]
        if sum(self.counts_per_scan) != len(self.points):
            raise LengthMismatch("counts_per_scan does not sum to the number of points")
        if self.batch is None:
            self.batch = np.zeros(len(self.points), dtype=np.int64)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def t(self) -> np.ndarray:
        return self.points[:, 3].astype(np.int64)

    @property
    def num_scans(self) -> int:
        return len(self.counts_per_scan)


@dataclass
class VoxelGrid:
    """Bookkeeping that ties voxel representatives back to the original points."""

    grid_size: float
    coords: np.ndarray            # (V, 3) integer voxel index per representative
    point_to_voxel: np.ndarray    # (N,) representative index of each original point
    counts: np.ndarray = field(repr=False)  # (V,) member count per representative

    @property
    def num_voxels(self) -> int:
        return self.coords.shape[0]


def relative_pose(pose_current: np.ndarray, pose_past: np.ndarray) -> np.ndarray:
    """Transform taking points of a past scan into the current scan's frame."""
    return np.linalg.inv(pose_current) @ pose_past


def transform_scan(scan: RawScan, pose_rel: np.ndarray) -> RawScan:
    pose_rel = np.asarray(pose_rel, dtype=np.float64)
    if not check_rigid(pose_rel):
        raise NonRigidPose("relative pose is not a rigid transform")
    pts = scan.points.copy()
    pts[:, :3] = scan.xyz @ pose_rel[:3, :3].T + pose_rel[:3, 3]
    return RawScan(pts)


def aggregate_scans(scans, poses, F: int | None = None) -> SpatioTemporalCloud:
    """Stack ``F`` scans into the current scan's frame.

    ``scans`` and ``poses`` are ordered current scan first; ``poses`` are the
    absolute (world-from-sensor) poses of each scan.
    """
    F = len(scans) if F is None else F
    if len(scans) != F or len(poses) != F:
        raise LengthMismatch(f"expected {F} scans and poses, got {len(scans)} and {len(poses)}")
    if F == 0:
        return SpatioTemporalCloud(np.zeros((0, 4)), [])
    blocks, counts = [], []
    for t, (scan, pose) in enumerate(zip(scans, poses)):
        moved = scan if t == 0 else transform_scan(scan, relative_pose(poses[0], pose))
        block = np.empty((len(moved), 4))
        block[:, :3] = moved.xyz
        block[:, 3] = t
        blocks.append(block)
        counts.append(len(moved))
    return SpatioTemporalCloud(np.concatenate(blocks), counts)


def voxel_keys(coords: np.ndarray, t: np.ndarray, batch: np.ndarray) -> np.ndarray:
    return np.column_stack([batch, coords, t]).astype(np.int64)


def voxelize(cloud: SpatioTemporalCloud, grid_size: float):
    """Collapse points sharing (batch, voxel, t) into their mean position.

    Representatives come out sorted by (batch, voxel index, t), which makes the
    result independent of input point order.
    """
    if grid_size <= 0:
        raise ValueError("grid_size must be positive")
    n = len(cloud)
    coords = np.floor(cloud.xyz / grid_size).astype(np.int64)
    keys = voxel_keys(coords, cloud.t, cloud.batch)
    if n == 0:
        grid = VoxelGrid(grid_size, np.zeros((0, 3), np.int64), np.zeros(0, np.int64), np.zeros(0, np.int64))
        return SpatioTemporalCloud(np.zeros((0, 4)), [0] * cloud.num_scans), grid
    uniq, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    v = len(uniq)
    means = np.empty((v, 4))
    for d in range(3):
        means[:, d] = np.bincount(inverse, weights=cloud.xyz[:, d], minlength=v) / counts
    means[:, 3] = uniq[:, 4]
    # keep scans contiguous: stable reorder by t within each batch element
    order = np.lexsort((np.arange(v), uniq[:, 4], uniq[:, 0]))
    rank = np.empty(v, dtype=np.int64)
    rank[order] = np.arange(v)
    reps = means[order]
    t_rep = uniq[order, 4]
    num_scans = max(cloud.num_scans, int(t_rep.max()) + 1 if v else 0)
    reduced = SpatioTemporalCloud(
        reps,
        np.bincount(t_rep, minlength=num_scans).tolist(),
        batch=uniq[order, 0].copy(),
    )
    grid = VoxelGrid(grid_size, uniq[order, 1:4].copy(), rank[inverse], counts[order])
    return reduced, grid


def devoxelize(voxel_predictions, grid: VoxelGrid) -> np.ndarray:
    pred = np.asarray(voxel_predictions)
    if pred.shape[0] < grid.num_voxels:
        raise MissingVoxel(f"{grid.num_voxels - pred.shape[0]} voxel(s) have no prediction")
    if pred.shape[0] > grid.num_voxels:
        raise LengthMismatch("more predictions than voxels")
    return pred[grid.point_to_voxel]


def vote_labels(point_labels: np.ndarray, grid: VoxelGrid, num_classes: int) -> np.ndarray:
    """Majority label per voxel (ties go to the lower class id)."""
    hist = np.zeros((grid.num_voxels, num_classes), dtype=np.int64)
    np.add.at(hist, (grid.point_to_voxel, np.asarray(point_labels, dtype=np.int64)), 1)
    return hist.argmax(axis=1)


def random_isometry(rng_seed) -> np.ndarray:
    """Rotation about z by U[0, 2pi) composed with independent x/y mirror flips."""
    rng = np.random.default_rng(rng_seed)
    theta = rng.uniform(0.0, 2.0 * np.pi)
    flip_x, flip_y = rng.random(2) < 0.5
    c, s = np.cos(theta), np.sin(theta)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    mirror = np.diag([-1.0 if flip_x else 1.0, -1.0 if flip_y else 1.0, 1.0])
    return mirror @ rot


def augment_random(cloud: SpatioTemporalCloud, rng_seed, matrix: np.ndarray | None = None) -> SpatioTemporalCloud:
    """Apply the same random rotation/flip to every scan; t is left alone."""
    m = random_isometry(rng_seed) if matrix is None else np.asarray(matrix, dtype=np.float64)
    pts = cloud.points.copy()
    pts[:, :3] = cloud.xyz @ m.T
    return SpatioTemporalCloud(pts, list(cloud.counts_per_scan), batch=cloud.batch.copy())
