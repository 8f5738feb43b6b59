"""Deterministic synthetic LiDAR sequences with oracle motion labels.

Objects are boxes resting on a ground plane. Surface points are sampled once
per object in its own frame, so a static surface produces the same points in
every scan up to the injected noise. Beams and occlusion are not simulated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import UnknownSuite
from .kitti_io import (MOVING, STATIC, RawScan, classes_to_raw, label_path, scan_path,
                       write_calib, write_poses, write_predictions, write_scan)

__all__ = [
    "Box",
    "SceneSpec",
    "Sequence",
    "generate_sequence",
    "scene_suite",
    "SUITES",
    "write_sequence",
    "SENSOR_HEIGHT",
]

SENSOR_HEIGHT = 1.73


@dataclass(frozen=True)
class Box:
    center: tuple          # world position at scan 0; z is the box center height
    size: tuple            # extents along x, y, z
    velocity: tuple = (0.0, 0.0, 0.0)   # m per scan

    def __post_init__(self):
        if len(self.center) != 3 or len(self.size) != 3 or len(self.velocity) != 3:
            raise ValueError("box center, size and velocity need 3 components")
        if min(self.size) <= 0:
            raise ValueError("box extents must be positive")

    @property
    def moving(self) -> bool:
        return any(v != 0 for v in self.velocity)


@dataclass(frozen=True)
class SceneSpec:
    ground_extent: float = 30.0               # half-width of the square ground patch
    static_boxes: tuple = ()
    moving_boxes: tuple = ()
    ego_velocity: tuple = (0.0, 0.0, 0.0)     # m per scan, world frame
    density: float = 10.0                     # surface points per m^2 at range_ref
    ground_density: float = 1.0
    noise: float = 0.01                       # Gaussian sigma per axis, m
    seed: int = 0
    range_ref: float | None = 15.0            # beyond this, density falls off as (range_ref/r)^2
    name: str = "scene"

    def __post_init__(self):
        if self.density <= 0 or self.ground_density <= 0:
            raise ValueError("densities must be positive")
        if self.ground_extent <= 0:
            raise ValueError("ground_extent must be positive")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        object.__setattr__(self, "static_boxes", tuple(self.static_boxes))
        object.__setattr__(self, "moving_boxes", tuple(self.moving_boxes))


@dataclass
class Sequence:
    """Chronological scans (index 0 is the oldest), world-from-sensor poses, class labels."""

    scans: list
    poses: list
    labels: list
    spec: SceneSpec = field(repr=False, default=None)

    def __len__(self):
        return len(self.scans)

    def window(self, frame: int, F: int):
        """Scans, poses and labels for an F-scan window ending at ``frame``, current first."""
        if frame + 1 < F:
            raise ValueError(f"frame {frame} has fewer than {F} scans of history")
        idx = list(range(frame, frame - F, -1))
        return [self.scans[i] for i in idx], [self.poses[i] for i in idx], [self.labels[i] for i in idx]


def _keep_mask(points: np.ndarray, spec: SceneSpec, rng) -> np.ndarray:
    if spec.range_ref is None:
        return np.ones(len(points), dtype=bool)
    r = np.linalg.norm(points[:, :2], axis=1)
    keep_p = np.minimum(1.0, (spec.range_ref / np.maximum(r, 1e-9)) ** 2)
    return rng.random(len(points)) < keep_p


def _sample_box(box: Box, density: float, rng) -> np.ndarray:
    """Points on the four sides and the top, relative to the box center."""
    hx, hy, hz = (s / 2.0 for s in box.size)
    faces = [  # (axis fixed, value, free axes with half-extents)
        (0, hx, (1, hy), (2, hz)), (0, -hx, (1, hy), (2, hz)),
        (1, hy, (0, hx), (2, hz)), (1, -hy, (0, hx), (2, hz)),
        (2, hz, (0, hx), (1, hy)),
    ]
    parts = []
    for axis, value, (a1, h1), (a2, h2) in faces:
        n = rng.poisson(density * 4.0 * h1 * h2)
        pts = np.empty((n, 3))
        pts[:, axis] = value
        pts[:, a1] = rng.uniform(-h1, h1, n)
        pts[:, a2] = rng.uniform(-h2, h2, n)
        parts.append(pts)
    return np.concatenate(parts)


def _sample_world(spec: SceneSpec, rng):
    """Object-fixed samples: list of (local points, box or None)."""
    e = spec.ground_extent
    n_ground = rng.poisson(spec.ground_density * (2 * e) ** 2)
    ground = np.column_stack([rng.uniform(-e, e, n_ground), rng.uniform(-e, e, n_ground),
                              np.full(n_ground, -SENSOR_HEIGHT)])
    ground = ground[_keep_mask(ground, spec, rng)]
    objects = [(ground, None)]
    for box in spec.static_boxes + spec.moving_boxes:
        local = _sample_box(box, spec.density, rng)
        keep = _keep_mask(local + np.asarray(box.center, dtype=np.float64), spec, rng)
        objects.append((local[keep], box))
    return objects


def _pose(translation) -> np.ndarray:
    p = np.eye(4)
    p[:3, 3] = translation
    return p


def generate_sequence(spec: SceneSpec, F: int) -> Sequence:
    """Render ``F`` chronological scans of ``spec``.

    Scan k sees each box displaced by k*velocity, from a sensor at k*ego_velocity.
    Labels are class ids (STATIC/MOVING); poses are world-from-sensor.
    """
    if F < 1:
        raise ValueError("F must be at least 1")
    rng = np.random.default_rng(spec.seed)
    objects = _sample_world(spec, rng)
    ego = np.asarray(spec.ego_velocity, dtype=np.float64)
    scans, poses, labels = [], [], []
    for k in range(F):
        pose = _pose(k * ego)
        pts, lab = [], []
        for local, box in objects:
            if box is None:
                world = local
            else:
                world = local + np.asarray(box.center) + k * np.asarray(box.velocity, dtype=np.float64)
            pts.append(world - pose[:3, 3])
            lab.append(np.full(len(local), MOVING if box is not None and box.moving else STATIC, np.int64))
        xyz = np.concatenate(pts)
        xyz = xyz + rng.normal(0.0, spec.noise, xyz.shape) if spec.noise > 0 else xyz
        points = np.column_stack([xyz, np.zeros(len(xyz))]).astype(np.float32).astype(np.float64)
        scans.append(RawScan(points))
        poses.append(pose)
        labels.append(np.concatenate(lab))
    return Sequence(scans, poses, labels, spec)


def _heading(rng):
    a = rng.uniform(0.0, 2.0 * math.pi)
    return math.cos(a), math.sin(a)


def _car(rng, r_lo, r_hi, speed=0.0):
    r = rng.uniform(r_lo, r_hi)
    cx, cy = _heading(rng)
    size = (rng.uniform(3.5, 4.8), rng.uniform(1.6, 2.0), rng.uniform(1.4, 1.8))
    vx, vy = _heading(rng)
    vel = (speed * vx, speed * vy, 0.0) if speed else (0.0, 0.0, 0.0)
    return Box((r * cx, r * cy, -SENSOR_HEIGHT + size[2] / 2.0), size, vel)


def _easy(rng, seed):
    ego = rng.uniform(0.3, 1.0)
    ex, ey = _heading(rng)
    return SceneSpec(
        ground_extent=30.0,
        static_boxes=(_car(rng, 5, 20), _car(rng, 5, 20)),
        moving_boxes=(_car(rng, 5, 20, speed=rng.uniform(0.5, 1.5)),),
        ego_velocity=(ego * ex, ego * ey, 0.0),
        seed=seed, name="easy")


def _ranges(rng, seed):
    ego = rng.uniform(0.3, 1.0)
    ex, ey = _heading(rng)
    moving = tuple(_car(rng, r - 2, r + 2, speed=rng.uniform(0.5, 1.5)) for r in (10.0, 30.0, 60.0))
    static = tuple(_car(rng, r - 5, r + 5) for r in (10.0, 30.0, 60.0))
    return SceneSpec(
        ground_extent=70.0, static_boxes=static, moving_boxes=moving,
        ego_velocity=(ego * ex, ego * ey, 0.0), seed=seed, name="ranges")


def _crowded(rng, seed):
    ego = rng.uniform(0.3, 1.0)
    ex, ey = _heading(rng)
    return SceneSpec(
        ground_extent=40.0,
        static_boxes=tuple(_car(rng, 4, 35) for _ in range(10)),
        moving_boxes=tuple(_car(rng, 4, 35, speed=rng.uniform(0.3, 1.5)) for _ in range(6)),
        ego_velocity=(ego * ex, ego * ey, 0.0), seed=seed, name="crowded")


SUITES = {"easy": _easy, "ranges": _ranges, "crowded": _crowded}


def scene_suite(name: str, count: int = 1, seed: int = 0) -> list[SceneSpec]:
    """``count`` curated scenes of the named family; ``seed`` picks the draw."""
    if name not in SUITES:
        raise UnknownSuite(f"unknown suite {name!r}; choose from {sorted(SUITES)}")
    rng = np.random.default_rng([seed, sorted(SUITES).index(name)])
    out = []
    for i in range(count):
        spec = SUITES[name](rng, seed * 100003 + i)
        out.append(replace(spec, name=f"{name}-{seed}-{i}"))
    return out


def write_sequence(seq: Sequence, root, scheme: str = "mos2") -> Path:
    """Write the KITTI layout: velodyne/, labels/, poses.txt, calib.txt (identity Tr)."""
    root = Path(root)
    (root / "velodyne").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    for k, (scan, lab) in enumerate(zip(seq.scans, seq.labels)):
        write_scan(scan_path(root, k), scan)
        write_predictions(label_path(root, k), classes_to_raw(lab, scheme))
    write_calib(root / "calib.txt", np.eye(4))
    write_poses(root / "poses.txt", seq.poses)
    return root
