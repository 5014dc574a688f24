"""Point cloud, label, calibration and pose I/O plus semantic partitioning.

File formats follow the KITTI odometry / SemanticKITTI layout::

    <root>/sequences/<seq>/velodyne/000000.bin   float32 x, y, z, intensity
    <root>/sequences/<seq>/labels/000000.label   uint32, low 16 bits class, high 16 instance
    <root>/sequences/<seq>/calib.txt             "Tr:" row = lidar -> camera, 3x4
    <root>/sequences/<seq>/poses.txt             12 floats per line (camera frame)
    <root>/sequences/<seq>/times.txt             one timestamp per line

Motion labels written by the classifier are one int8 per point.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .exceptions import LengthMismatch, MalformedFile
from .geometry import Pose, compose, invert

logger = logging.getLogger(__name__)

ROLES = ("road", "building", "sign", "pole", "terrain", "object", "other")
ROLE_CODE = {name: i for i, name in enumerate(ROLES)}

# HDL-64E vertical field of view used to rebuild ring ids when none are given
FOV_UP_DEG = 3.0
FOV_DOWN_DEG = -25.0


@dataclass(frozen=True)
class PointCloud:
    """Points as an ``(N, 4)`` array of x, y, z, intensity."""

    points: np.ndarray
    frame_index: int = 0
    timestamp: Optional[float] = None
    ring: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] not in (3, 4):
            raise ValueError(f"points must be (N, 3) or (N, 4), got {pts.shape}")
        if pts.shape[1] == 3:
            pts = np.column_stack([pts, np.zeros(len(pts))])
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.ring is not None:
            ring = np.asarray(self.ring, dtype=np.int32)
            if ring.shape != (len(pts),):
                raise LengthMismatch("ring ids must have one entry per point")
            ring.setflags(write=False)
            object.__setattr__(self, "ring", ring)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    def rings(self, n_rings: int = 64) -> np.ndarray:
        if self.ring is not None:
            return self.ring
        return estimate_rings(self.xyz, n_rings)


def estimate_rings(xyz: np.ndarray, n_rings: int = 64) -> np.ndarray:
    """Reconstruct scan-line ids by quantizing the elevation angle."""
    xyz = np.asarray(xyz, dtype=float)
    elev = np.degrees(np.arctan2(xyz[:, 2], np.hypot(xyz[:, 0], xyz[:, 1])))
    frac = (FOV_UP_DEG - elev) / (FOV_UP_DEG - FOV_DOWN_DEG)
    return np.clip(np.floor(frac * n_rings), 0, n_rings - 1).astype(np.int32)


@dataclass(frozen=True)
class TaxonomyMap:
    """class id -> (role, is_moving_class, name); unknown ids map to ``other``."""

    entries: dict = field(default_factory=dict)

    @classmethod
    def from_file(cls, path) -> "TaxonomyMap":
        return cls.from_text(Path(path).read_text())

    @classmethod
    def default(cls) -> "TaxonomyMap":
        text = resources.files("psflo").joinpath("data/semantic_kitti.cfg").read_text()
        return cls.from_text(text)

    @classmethod
    def from_text(cls, text: str) -> "TaxonomyMap":
        entries = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line, _, comment = raw.partition("#")
            if not line.strip():
                continue
            key, sep, value = line.partition("=")
            tokens = value.split()
            if not sep or not tokens:
                raise MalformedFile(f"taxonomy line {lineno}: expected 'id = role'")
            try:
                class_id = int(key)
            except ValueError:
                raise MalformedFile(f"taxonomy line {lineno}: bad class id {key.strip()!r}") from None
            role = tokens[0]
            if role not in ROLES:
                raise MalformedFile(f"taxonomy line {lineno}: unknown role {role!r}")
            moving = "moving" in tokens[1:]
            if moving and role != "object":
                raise MalformedFile(f"taxonomy line {lineno}: moving classes must have role object")
            entries[class_id] = (role, moving, comment.strip() or str(class_id))
        return cls(entries)

    def role_of(self, class_id: int) -> str:
        return self.entries.get(int(class_id), ("other", False, ""))[0]

    def is_moving(self, class_id: int) -> bool:
        return self.entries.get(int(class_id), ("other", False, ""))[1]

    def ids_for_role(self, role: str) -> list[int]:
        return sorted(k for k, v in self.entries.items() if v[0] == role)

    def role_codes(self, class_ids: np.ndarray) -> np.ndarray:
        class_ids = np.asarray(class_ids)
        codes = np.full(class_ids.shape, ROLE_CODE["other"], dtype=np.uint8)
        for cid, (role, _, _) in self.entries.items():
            codes[class_ids == cid] = ROLE_CODE[role]
        return codes

    def moving_mask(self, class_ids: np.ndarray) -> np.ndarray:
        moving = [cid for cid, v in self.entries.items() if v[1]]
        return np.isin(np.asarray(class_ids), moving)


@dataclass(frozen=True)
class SemanticCloud:
    """Point cloud with per-point class id, instance id and role code."""

    cloud: PointCloud
    class_id: np.ndarray
    instance_id: np.ndarray
    role: np.ndarray

    def __post_init__(self):
        n = len(self.cloud)
        for name in ("class_id", "instance_id", "role"):
            arr = np.asarray(getattr(self, name))
            if arr.shape != (n,):
                raise LengthMismatch(f"{name} has shape {arr.shape}, expected ({n},)")
            arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return len(self.cloud)

    @property
    def xyz(self) -> np.ndarray:
        return self.cloud.xyz

    @property
    def frame_index(self) -> int:
        return self.cloud.frame_index

    def mask(self, *roles: str) -> np.ndarray:
        return np.isin(self.role, [ROLE_CODE[r] for r in roles])

    def points_of(self, *roles: str) -> np.ndarray:
        return self.xyz[self.mask(*roles)]

    def role_histogram(self) -> dict:
        counts = np.bincount(self.role, minlength=len(ROLES))
        return {name: int(counts[i]) for i, name in enumerate(ROLES)}


def partition(cloud: PointCloud, labels, taxonomy: Optional[TaxonomyMap] = None) -> SemanticCloud:
    """Attach labels to ``cloud`` and assign each point its semantic role.

    ``labels`` is a ``(class_id, instance_id)`` pair as returned by
    :func:`read_labels_semantickitti`.
    """
    taxonomy = taxonomy or TaxonomyMap.default()
    class_id, instance_id = labels
    class_id = np.asarray(class_id, dtype=np.uint16)
    instance_id = np.asarray(instance_id, dtype=np.uint16)
    if len(class_id) != len(cloud) or len(instance_id) != len(cloud):
        raise LengthMismatch(f"{len(class_id)} labels for {len(cloud)} points")
    return SemanticCloud(cloud, class_id, instance_id, taxonomy.role_codes(class_id))


# --------------------------------------------------------------------------
# binary files


def read_cloud_kitti(path, frame_index: int = 0, timestamp: Optional[float] = None) -> PointCloud:
    data = Path(path).read_bytes()
    if len(data) == 0 or len(data) % 16:
        raise MalformedFile(f"{path}: {len(data)} bytes is not a positive multiple of 16")
    pts = np.frombuffer(data, dtype="<f4").reshape(-1, 4).astype(float)
    if not np.all(np.isfinite(pts)):
        raise MalformedFile(f"{path}: non-finite coordinates")
    return PointCloud(pts, frame_index=frame_index, timestamp=timestamp)


def write_cloud_kitti(cloud, path) -> None:
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float)
    if pts.shape[1] == 3:
        pts = np.column_stack([pts, np.zeros(len(pts))])
    Path(path).write_bytes(np.ascontiguousarray(pts, dtype="<f4").tobytes())


def read_labels_semantickitti(path, n_points: int) -> tuple[np.ndarray, np.ndarray]:
    data = Path(path).read_bytes()
    if len(data) % 4:
        raise MalformedFile(f"{path}: {len(data)} bytes is not a multiple of 4")
    words = np.frombuffer(data, dtype="<u4")
    if len(words) != n_points:
        raise LengthMismatch(f"{path}: {len(words)} labels for {n_points} points")
    return (words & 0xFFFF).astype(np.uint16), (words >> 16).astype(np.uint16)


def write_labels_semantickitti(class_id, instance_id, path) -> None:
    words = (np.asarray(instance_id, dtype=np.uint32) << 16) | np.asarray(class_id, dtype=np.uint32)
    Path(path).write_bytes(words.astype("<u4").tobytes())


def read_motion_labels(path, n_points: Optional[int] = None) -> np.ndarray:
    """Per-point int8 motion labels: -1 not object, 0 static, 1 dynamic."""
    labels = np.frombuffer(Path(path).read_bytes(), dtype=np.int8).copy()
    if n_points is not None and len(labels) != n_points:
        raise LengthMismatch(f"{path}: {len(labels)} labels for {n_points} points")
    if np.any((labels < -1) | (labels > 1)):
        raise MalformedFile(f"{path}: motion labels must be -1, 0 or 1")
    return labels


def write_motion_labels(labels, path) -> None:
    Path(path).write_bytes(np.asarray(labels, dtype=np.int8).tobytes())


# --------------------------------------------------------------------------
# text files


def _parse_pose_row(values: Sequence[str], where: str) -> Pose:
    if len(values) != 12:
        raise MalformedFile(f"{where}: expected 12 fields, got {len(values)}")
    try:
        m = np.array([float(v) for v in values]).reshape(3, 4)
    except ValueError as exc:
        raise MalformedFile(f"{where}: {exc}") from None
    return Pose.from_matrix(m)


def read_poses_kitti(path, calib: Optional[Pose] = None) -> list[Pose]:
    """Read a pose file; with ``calib`` the poses are mapped back to the lidar frame."""
    poses = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            pose = _parse_pose_row(line.split(), f"{path}:{lineno}")
            if calib is not None:
                pose = compose(invert(calib), compose(pose, calib))
            poses.append(pose)
    return poses


def write_poses_kitti(poses: Sequence[Pose], path, calib: Optional[Pose] = None) -> None:
    """Write poses; with ``calib`` (lidar -> camera) they are written as ``Tr T Tr^-1``."""
    lines = []
    for pose in poses:
        if calib is not None:
            pose = compose(calib, compose(pose, invert(calib)))
        row = pose.matrix[:3, :].reshape(-1)
        lines.append(" ".join(f"{v:.9e}" for v in row))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_calib_kitti(path) -> Pose:
    """Parse the ``Tr:`` row (lidar -> camera) of a KITTI ``calib.txt``."""
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            key, _, rest = line.partition(":")
            if key.strip() == "Tr":
                return _parse_pose_row(rest.split(), f"{path}:{lineno}")
    raise MalformedFile(f"{path}: no 'Tr:' row")


def write_calib_kitti(tr: Pose, path) -> None:
    row = " ".join(f"{v:.9e}" for v in tr.matrix[:3, :].reshape(-1))
    Path(path).write_text(f"Tr: {row}\n")


# --------------------------------------------------------------------------
# sequences


class KittiSequence:
    """Lazy access to one KITTI / SemanticKITTI sequence directory."""

    def __init__(self, root, sequence: str = "00", taxonomy: Optional[TaxonomyMap] = None):
        base = Path(root)
        seq_dir = base / "sequences" / sequence
        self.path = seq_dir if seq_dir.is_dir() else base
        self.taxonomy = taxonomy or TaxonomyMap.default()
        self.scans = sorted((self.path / "velodyne").glob("*.bin"))
        if not self.scans:
            raise FileNotFoundError(f"no velodyne scans under {self.path}")
        times = self.path / "times.txt"
        self.times = (
            [float(v) for v in times.read_text().split()] if times.exists() else None
        )
        calib = self.path / "calib.txt"
        self.calib = read_calib_kitti(calib) if calib.exists() else None

    def __len__(self) -> int:
        return len(self.scans)

    def has_labels(self) -> bool:
        return (self.path / "labels").is_dir()

    def label_path(self, index: int) -> Path:
        return self.path / "labels" / (self.scans[index].stem + ".label")

    def frame(self, index: int) -> SemanticCloud:
        ts = self.times[index] if self.times and index < len(self.times) else None
        cloud = read_cloud_kitti(self.scans[index], frame_index=index, timestamp=ts)
        label_file = self.label_path(index)
        if label_file.exists():
            labels = read_labels_semantickitti(label_file, len(cloud))
        else:
            logger.debug("no labels for frame %d; treating all points as unlabeled", index)
            zeros = np.zeros(len(cloud), dtype=np.uint16)
            labels = (zeros, zeros)
        return partition(cloud, labels, self.taxonomy)

    def __iter__(self) -> Iterator[SemanticCloud]:
        for i in range(len(self)):
            yield self.frame(i)

    def ground_truth(self) -> Optional[list[Pose]]:
        """Ground-truth poses in the lidar frame, if ``poses.txt`` is present."""
        candidates = [self.path / "poses.txt"]
        candidates.append(self.path.parent.parent / "poses" / f"{self.path.name}.txt")
        for p in candidates:
            if p.exists():
                return read_poses_kitti(p, calib=self.calib)
        return None


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
