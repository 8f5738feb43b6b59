"""Readers and writers for KITTI-odometry style files.

Layout handled here::

    <seq>/velodyne/NNNNNN.bin   float32 LE (x, y, z, intensity) per point
    <seq>/labels/NNNNNN.label   uint32 LE per point, semantic id in the low 16 bits
    <seq>/poses.txt             12 decimals per line, row-major 3x4, camera frame
    <seq>/calib.txt             line ``Tr:`` with 12 decimals (LiDAR -> camera)

Poses are conjugated into the LiDAR frame at read time, so everything downstream
works in sensor coordinates.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .errors import NonFiniteValue, NonOrthonormalRotation, ParseError, TruncatedRecord

__all__ = [
    "RawScan",
    "UNLABELED",
    "STATIC",
    "MOVING",
    "MOVABLE",
    "check_rigid",
    "read_scan",
    "write_scan",
    "read_calib",
    "write_calib",
    "read_poses",
    "write_poses",
    "read_labels",
    "write_predictions",
    "load_label_scheme",
    "remap_mos_labels",
    "scan_path",
    "label_path",
]

UNLABELED, STATIC, MOVING, MOVABLE = 0, 1, 2, 3
_CLASS_NAMES = {"unlabeled": UNLABELED, "static": STATIC, "moving": MOVING, "movable": MOVABLE}

RIGID_TOL = 1e-5


@dataclass
class RawScan:
    """One LiDAR sweep: an ``(N, 4)`` array of x, y, z (meters) and intensity."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 4)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise ValueError(f"scan points must have shape (N, 4), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise NonFiniteValue("scan contains non-finite values")
        self.points = pts

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3]


def scan_path(seq_dir, frame: int) -> Path:
    return Path(seq_dir) / "velodyne" / f"{frame:06d}.bin"


def label_path(seq_dir, frame: int, folder: str = "labels") -> Path:
    return Path(seq_dir) / folder / f"{frame:06d}.label"


def read_scan(path) -> RawScan:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    raw = path.read_bytes()
    if len(raw) % 16:
        raise TruncatedRecord(f"{path}: {len(raw)} bytes is not a multiple of 16")
    pts = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    if not np.all(np.isfinite(pts)):
        raise NonFiniteValue(f"{path}: non-finite coordinate")
    return RawScan(pts.astype(np.float64))


def write_scan(path, scan: RawScan | np.ndarray) -> None:
    pts = scan.points if isinstance(scan, RawScan) else np.asarray(scan)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.ascontiguousarray(pts, dtype="<f4").tobytes())


def check_rigid(m: np.ndarray, tol: float = RIGID_TOL) -> bool:
    """True when ``m`` is a 4x4 proper rigid transform."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (4, 4) or not np.all(np.isfinite(m)):
        return False
    if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
        return False
    r = m[:3, :3]
    if np.abs(r.T @ r - np.eye(3)).max() > tol:
        return False
    return abs(np.linalg.det(r) - 1.0) <= tol


def _parse_row12(tokens, where: str) -> np.ndarray:
    if len(tokens) != 12:
        raise ParseError(f"{where}: expected 12 values, got {len(tokens)}")
    try:
        vals = np.array([float(tok) for tok in tokens], dtype=np.float64)
    except ValueError as exc:
        raise ParseError(f"{where}: {exc}") from None
    if not np.all(np.isfinite(vals)):
        raise ParseError(f"{where}: non-finite value")
    m = np.eye(4)
    m[:3, :4] = vals.reshape(3, 4)
    return m


def read_calib(path) -> np.ndarray:
    """Return the 4x4 ``Tr`` (LiDAR -> camera) transform from a calib.txt file."""
    path = Path(path)
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        key, _, rest = line.partition(":")
        if key.strip() == "Tr":
            return _parse_row12(rest.split(), f"{path}:{lineno}")
    raise ParseError(f"{path}: no 'Tr:' line")


def write_calib(path, tr: np.ndarray) -> None:
    tr = np.asarray(tr, dtype=np.float64)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("Tr: " + " ".join(f"{v:.12e}" for v in tr[:3, :4].ravel()) + "\n")


def read_poses(path, calib: np.ndarray | None = None) -> list[np.ndarray]:
    """Read poses.txt and conjugate each pose into the LiDAR frame (tr^-1 P tr)."""
    tr = np.eye(4) if calib is None else np.asarray(calib, dtype=np.float64)
    tr_inv = np.linalg.inv(tr)
    poses = []
    path = Path(path)
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        tokens = line.split()
        if not tokens:
            continue
        p = tr_inv @ _parse_row12(tokens, f"{path}:{lineno}") @ tr
        p[3] = [0.0, 0.0, 0.0, 1.0]
        if not check_rigid(p):
            raise NonOrthonormalRotation(f"{path}:{lineno}: rotation block is not orthonormal")
        poses.append(p)
    return poses


def write_poses(path, poses, calib: np.ndarray | None = None) -> None:
    """Write LiDAR-frame poses as camera-frame poses.txt (inverse of ``read_poses``)."""
    tr = np.eye(4) if calib is None else np.asarray(calib, dtype=np.float64)
    tr_inv = np.linalg.inv(tr)
    lines = []
    for p in poses:
        cam = tr @ np.asarray(p, dtype=np.float64) @ tr_inv
        lines.append(" ".join(f"{v:.12e}" for v in cam[:3, :4].ravel()))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + ("\n" if lines else ""))


def read_labels(path) -> np.ndarray:
    """Semantic ids (low 16 bits of each uint32 record)."""
    raw = Path(path).read_bytes()
    if len(raw) % 4:
        raise TruncatedRecord(f"{path}: {len(raw)} bytes is not a multiple of 4")
    return (np.frombuffer(raw, dtype="<u4") & 0xFFFF).astype(np.uint32)


def write_predictions(path, labels) -> None:
    labels = np.asarray(labels).ravel()
    if labels.size and (labels.min() < 0 or labels.max() > 0xFFFF):
        raise ValueError("label ids must fit in the 16-bit semantic field")
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(labels.astype("<u4").tobytes())
    except OSError as exc:
        raise OSError(f"cannot write predictions to {path}: {exc}") from exc


def load_label_scheme(name_or_path: str | os.PathLike = "mos2") -> dict:
    """Load a raw-id -> class table.

    Built-in tables: ``mos2`` (unlabeled/static/moving) and ``mos3`` (adds the
    movable class for parked vehicles and standing pedestrians). A path to a YAML
    file with the same layout is also accepted.
    """
    p = Path(name_or_path)
    if p.suffix in (".yaml", ".yml") and p.exists():
        text = p.read_text()
    else:
        text = resources.files("mossm.label_maps").joinpath(f"{name_or_path}.yaml").read_text()
    cfg = yaml.safe_load(text)
    table = {int(k): _CLASS_NAMES[v] for k, v in cfg["learning_map"].items()}
    return {
        "name": cfg.get("name", str(name_or_path)),
        "map": table,
        "default": _CLASS_NAMES[cfg.get("default", "static")],
        "inverse": {_CLASS_NAMES[k]: int(v) for k, v in cfg.get("inverse_map", {}).items()},
    }


def remap_mos_labels(labels, scheme: dict | str = "mos2") -> np.ndarray:
    """Map raw semantic ids to MOS classes; ids missing from the table become static."""
    if not isinstance(scheme, dict):
        scheme = load_label_scheme(scheme)
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if labels.size == 0:
        return np.zeros(0, dtype=np.int64)
    lut = np.full(max(int(labels.max()), max(scheme["map"])) + 1, scheme["default"], dtype=np.int64)
    for raw, cls in scheme["map"].items():
        lut[raw] = cls
    return lut[labels]


def classes_to_raw(classes, scheme: dict | str = "mos2") -> np.ndarray:
    """Inverse mapping used when writing predictions (e.g. moving -> 251)."""
    if not isinstance(scheme, dict):
        scheme = load_label_scheme(scheme)
    classes = np.asarray(classes, dtype=np.int64)
    out = np.zeros_like(classes)
    for cls, raw in scheme["inverse"].items():
        out[classes == cls] = raw
    return out
