"""Ray-cast synthetic lidar scenes with exact labels and poses.

Worlds are built from rectangles (``Quad``) and vertical cylinders; boxes
are six quads sharing an instance id. Moving primitives translate with a
constant velocity. The sensor is a spinning multi-ring lidar.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .geometry import Pose, compose, rot_z
from .io import (
    PointCloud,
    SemanticCloud,
    TaxonomyMap,
    ensure_dir,
    partition,
    write_calib_kitti,
    write_cloud_kitti,
    write_labels_semantickitti,
    write_poses_kitti,
)

ROAD_ID, BUILDING_ID, POLE_ID, SIGN_ID = 40, 50, 80, 81
CAR_ID, MOVING_CAR_ID, PERSON_ID, MOVING_PERSON_ID = 10, 252, 30, 254
SENSOR_HEIGHT = 1.73


@dataclass(frozen=True)
class Quad:
    """Rectangle ``center + a*u + b*v`` for ``|a|, |b| <= 1``."""

    center: tuple
    u: tuple
    v: tuple
    class_id: int
    instance_id: int = 0
    velocity: tuple = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class Cylinder:
    """Vertical cylinder standing on ``base`` (x, y, z of the bottom)."""

    base: tuple
    radius: float
    height: float
    class_id: int
    instance_id: int = 0
    velocity: tuple = (0.0, 0.0, 0.0)


def box(center, size, yaw=0.0, class_id=CAR_ID, instance_id=0, velocity=(0.0, 0.0, 0.0), bottom=False):
    """Quads of an oriented box; ``size`` is full length, width, height."""
    c = np.asarray(center, dtype=float)
    hx, hy, hz = 0.5 * np.asarray(size, dtype=float)
    ex = np.array([np.cos(yaw), np.sin(yaw), 0.0])
    ey = np.array([-np.sin(yaw), np.cos(yaw), 0.0])
    ez = np.array([0.0, 0.0, 1.0])
    faces = [
        (c + hx * ex, hy * ey, hz * ez),
        (c - hx * ex, hy * ey, hz * ez),
        (c + hy * ey, hx * ex, hz * ez),
        (c - hy * ey, hx * ex, hz * ez),
        (c + hz * ez, hx * ex, hy * ey),
    ]
    if bottom:
        faces.append((c - hz * ez, hx * ex, hy * ey))
    return [Quad(tuple(f), tuple(u), tuple(v), class_id, instance_id, tuple(velocity)) for f, u, v in faces]


@dataclass(frozen=True)
class SensorModel:
    n_rings: int = 64
    fov_up_deg: float = 2.0
    fov_down_deg: float = -24.8
    azimuth_step_deg: float = 0.5
    azimuth_range_deg: tuple = (-180.0, 180.0)
    min_range: float = 1.0
    max_range: float = 80.0
    range_noise: float = 0.02
    rate_hz: float = 10.0

    def rays(self) -> tuple[np.ndarray, np.ndarray]:
        """Unit directions ``(N, 3)`` in the sensor frame and their ring ids."""
        elev = np.radians(np.linspace(self.fov_up_deg, self.fov_down_deg, self.n_rings))
        lo, hi = self.azimuth_range_deg
        az = np.radians(np.arange(lo, hi, self.azimuth_step_deg))
        e, a = np.meshgrid(elev, az, indexing="ij")
        dirs = np.stack([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)], axis=-1)
        rings = np.repeat(np.arange(self.n_rings), len(az))
        return dirs.reshape(-1, 3), rings


@dataclass
class FrameTruth:
    pose: Pose
    objects: dict  # instance id -> (center, velocity, moving flag)


def _quad_hits(origin, dirs, quads, time):
    c = np.array([q.center for q in quads]) + time * np.array([q.velocity for q in quads])
    u = np.array([q.u for q in quads], dtype=float)
    v = np.array([q.v for q in quads], dtype=float)
    n = np.cross(u, v)
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    uu = (u**2).sum(1)
    vv = (v**2).sum(1)
    denom = dirs @ n.T
    oc = origin - c
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -(oc * n).sum(1) / denom
    a = ((oc * u).sum(1) + t * (dirs @ u.T)) / uu
    b = ((oc * v).sum(1) + t * (dirs @ v.T)) / vv
    ok = (np.abs(denom) > 1e-12) & (t > 0) & (np.abs(a) <= 1) & (np.abs(b) <= 1)
    return np.where(ok, t, np.inf)


def _cylinder_hits(origin, dirs, cylinders, time):
    base = np.array([c.base for c in cylinders]) + time * np.array([c.velocity for c in cylinders])
    r = np.array([c.radius for c in cylinders])
    h = np.array([c.height for c in cylinders])
    dx, dy = dirs[:, 0:1], dirs[:, 1:2]
    ox, oy = origin[0] - base[:, 0], origin[1] - base[:, 1]
    A = dx**2 + dy**2
    B = 2 * (dx * ox + dy * oy)
    C = ox**2 + oy**2 - r**2
    disc = B**2 - 4 * A * C
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (-B - np.sqrt(np.maximum(disc, 0))) / (2 * A)
    z = origin[2] + t * dirs[:, 2:3] - base[:, 2]
    ok = (disc >= 0) & (A > 1e-12) & (t > 0) & (z >= 0) & (z <= h)
    return np.where(ok, t, np.inf)


@dataclass
class SyntheticScene:
    quads: list
    cylinders: list
    poses: list
    sensor: SensorModel = field(default_factory=SensorModel)
    seed: int = 0
    chunk: int = 16384

    def __len__(self) -> int:
        return len(self.poses)

    def _primitives_near(self, position, time):
        reach = self.sensor.max_range
        quads = []
        for q in self.quads:
            c = np.asarray(q.center) + time * np.asarray(q.velocity)
            if np.linalg.norm(c - position) - np.linalg.norm(q.u) - np.linalg.norm(q.v) <= reach:
                quads.append(q)
        cyls = []
        for cy in self.cylinders:
            b = np.asarray(cy.base) + time * np.asarray(cy.velocity)
            if np.linalg.norm(b[:2] - position[:2]) - cy.radius <= reach:
                cyls.append(cy)
        return quads, cyls

    def object_states(self, time: float) -> dict:
        states: dict = {}
        for prim in [*self.quads, *self.cylinders]:
            if prim.instance_id == 0 or prim.class_id in (ROAD_ID, BUILDING_ID, POLE_ID, SIGN_ID):
                continue
            pos = np.asarray(getattr(prim, "center", None) if isinstance(prim, Quad) else prim.base, dtype=float)
            vel = np.asarray(prim.velocity, dtype=float)
            states.setdefault(prim.instance_id, []).append((pos + time * vel, vel))
        return {
            k: (np.mean([p for p, _ in v], axis=0), v[0][1], bool(np.linalg.norm(v[0][1]) > 0))
            for k, v in states.items()
        }

    def generate(self, frame: int, taxonomy: Optional[TaxonomyMap] = None):
        """Cloud in the sensor frame, ground-truth pose and object states."""
        pose = self.poses[frame]
        time = frame / self.sensor.rate_hz
        dirs_s, rings = self.sensor.rays()
        dirs_w = dirs_s @ pose.rotation.T
        origin = pose.translation
        quads, cyls = self._primitives_near(origin, time)
        prims = quads + cyls
        best_t = np.full(len(dirs_w), np.inf)
        best_p = np.full(len(dirs_w), -1)
        for lo in range(0, len(dirs_w), self.chunk):
            d = dirs_w[lo : lo + self.chunk]
            parts = []
            if quads:
                parts.append(_quad_hits(origin, d, quads, time))
            if cyls:
                parts.append(_cylinder_hits(origin, d, cyls, time))
            if not parts:
                continue
            t = np.hstack(parts)
            j = np.argmin(t, axis=1)
            best_t[lo : lo + len(d)] = t[np.arange(len(d)), j]
            best_p[lo : lo + len(d)] = j
        rng = np.random.default_rng([self.seed, frame])
        hit = np.isfinite(best_t)
        t = best_t[hit] + rng.normal(scale=self.sensor.range_noise, size=hit.sum()) if self.sensor.range_noise else best_t[hit]
        keep = (t >= self.sensor.min_range) & (t <= self.sensor.max_range)
        t = t[keep]
        hit_idx = np.flatnonzero(hit)[keep]
        prim_idx = best_p[hit_idx]
        xyz = dirs_s[hit_idx] * t[:, None]
        cls = np.array([prims[i].class_id for i in prim_idx], dtype=np.int64)
        inst = np.array([prims[i].instance_id for i in prim_idx], dtype=np.int64)
        cloud = PointCloud(
            np.column_stack([xyz, np.zeros(len(xyz))]), frame_index=frame,
            timestamp=time, ring=rings[hit_idx],
        )
        sem = partition(cloud, (cls, inst), taxonomy)
        return sem, FrameTruth(pose, self.object_states(time))

    def clouds(self, taxonomy: Optional[TaxonomyMap] = None) -> list:
        return [self.generate(i, taxonomy)[0] for i in range(len(self))]


# --------------------------------------------------------------------------
# presets


def straight_trajectory(n_frames: int, step: float, sway: float = 0.0, period: float = 60.0) -> list:
    """Poses along +x at ``step`` meters per frame with an optional lateral sway."""
    poses = []
    for i in range(n_frames):
        x = i * step
        y = sway * np.sin(2 * np.pi * x / period)
        dy = sway * 2 * np.pi / period * np.cos(2 * np.pi * x / period)
        yaw = np.arctan(dy) - np.arctan(sway * 2 * np.pi / period)
        # yaw is relative to the initial heading so that the first pose is the identity
        poses.append(compose(Pose(np.eye(3), (x, y, 0.0)), rot_z(yaw)))
    return poses


def corridor_scene(
    n_frames: int = 100,
    step: float = 1.05,
    sway: float = 0.5,
    range_noise: float = 0.02,
    seed: int = 0,
    parked_cars: int = 0,
    sensor: Optional[SensorModel] = None,
) -> SyntheticScene:
    """Street with road, building blocks on both sides, poles and signs."""
    rng = np.random.default_rng(seed)
    length = n_frames * step + 80.0
    ground = -SENSOR_HEIGHT
    quads = [
        Quad((length / 2 - 40, 0.0, ground), (length / 2 + 10, 0, 0), (0, 12.0, 0), ROAD_ID),
    ]
    cylinders = []
    for side in (-1, 1):
        x = -45.0
        while x < length - 40:
            block_len = rng.uniform(12, 24)
            depth = rng.uniform(6, 10)
            setback = rng.uniform(8.0, 10.0)
            height = rng.uniform(5, 12)
            cy = side * (setback + depth / 2)
            quads += box((x + block_len / 2, cy, ground + height / 2), (block_len, depth, height),
                         class_id=BUILDING_ID)
            x += block_len + rng.uniform(3, 7)
    inst = 1
    for side in (-1, 1):
        x = -30.0 + rng.uniform(0, 8)
        while x < length - 40:
            cylinders.append(Cylinder((x, side * 6.5, ground), 0.12, 6.0, POLE_ID, inst))
            inst += 1
            x += rng.uniform(12, 20)
    x = -20.0
    while x < length - 40:
        side = rng.choice([-1, 1])
        yaw = rng.uniform(-0.6, 0.6) + np.pi / 2
        n = np.array([np.cos(yaw), np.sin(yaw), 0.0])
        t = np.array([-n[1], n[0], 0.0])
        c = (x, side * 5.5, ground + 2.5)
        quads.append(Quad(c, tuple(0.5 * t), (0, 0, 0.4), SIGN_ID, inst))
        cylinders.append(Cylinder((x + 0.1 * n[0], side * 5.5 + 0.1 * n[1], ground), 0.05, 2.1, POLE_ID, inst + 1))
        inst += 2
        x += rng.uniform(15, 30)
    for _ in range(parked_cars):
        x = rng.uniform(0, length - 60)
        side = rng.choice([-1, 1])
        quads += box((x, side * 4.0, ground + 0.75), (4.5, 1.8, 1.5), class_id=CAR_ID, instance_id=1000 + inst)
        inst += 1
    sensor = sensor or SensorModel(range_noise=range_noise)
    if sensor.range_noise != range_noise:
        sensor = replace(sensor, range_noise=range_noise)
    poses = straight_trajectory(n_frames, step, sway)
    return SyntheticScene(quads, cylinders, poses, sensor, seed)


# --------------------------------------------------------------------------
# dataset export


def write_dataset(scene: SyntheticScene, root, sequence: str = "00", calib: Optional[Pose] = None) -> Path:
    """Write the scene as a KITTI / SemanticKITTI sequence directory."""
    seq = ensure_dir(Path(root) / "sequences" / sequence)
    ensure_dir(seq / "velodyne")
    ensure_dir(seq / "labels")
    calib = calib or Pose.identity()
    for i in range(len(scene)):
        sem, _ = scene.generate(i)
        write_cloud_kitti(sem.cloud, seq / "velodyne" / f"{i:06d}.bin")
        write_labels_semantickitti(sem.class_id, sem.instance_id, seq / "labels" / f"{i:06d}.label")
    write_calib_kitti(calib, seq / "calib.txt")
    write_poses_kitti(scene.poses, seq / "poses.txt", calib=calib)
    return seq


def scene_from_spec(spec: dict) -> SyntheticScene:
    """Build a scene from a parsed spec: a preset name plus overrides, or primitives."""
    spec = dict(spec)
    preset = spec.pop("preset", None)
    sensor = SensorModel(**spec.pop("sensor", {})) if "sensor" in spec else None
    if preset == "corridor":
        return corridor_scene(sensor=sensor, **spec)
    if preset is not None:
        raise ValueError(f"unknown scene preset {preset!r}")
    quads = [Quad(**q) for q in spec.pop("quads", [])]
    for b in spec.pop("boxes", []):
        quads += box(**b)
    cylinders = [Cylinder(**c) for c in spec.pop("cylinders", [])]
    n_frames = int(spec.pop("n_frames", 10))
    step = float(spec.pop("step", 1.0))
    seed = int(spec.pop("seed", 0))
    if spec:
        raise TypeError(f"unknown scene spec keys: {', '.join(sorted(spec))}")
    return SyntheticScene(quads, cylinders, straight_trajectory(n_frames, step), sensor or SensorModel(), seed)


# --------------------------------------------------------------------------
# classifier scenes


def wedge(center, size, low: float, yaw=0.0, class_id=CAR_ID, instance_id=0, velocity=(0.0, 0.0, 0.0)):
    """Box-like object whose roof slopes from height ``low`` (front, -x) to ``size[2]`` (back)."""
    c = np.asarray(center, dtype=float)
    length, width, high = size
    hx, hy = length / 2, width / 2
    ex = np.array([np.cos(yaw), np.sin(yaw), 0.0])
    ey = np.array([-np.sin(yaw), np.cos(yaw), 0.0])
    ez = np.array([0.0, 0.0, 1.0])
    vel = tuple(velocity)
    quads = [
        # front and back faces
        Quad(tuple(c - hx * ex + low / 2 * ez), tuple(hy * ey), tuple(low / 2 * ez), class_id, instance_id, vel),
        Quad(tuple(c + hx * ex + high / 2 * ez), tuple(hy * ey), tuple(high / 2 * ez), class_id, instance_id, vel),
        # sloped roof
        Quad(tuple(c + (low + high) / 2 * ez), tuple(hx * ex + (high - low) / 2 * ez), tuple(hy * ey),
             class_id, instance_id, vel),
    ]
    # side walls approximated by their lower rectangle (height ``low``)
    for s in (-1, 1):
        quads.append(Quad(tuple(c + s * hy * ey + low / 2 * ez), tuple(hx * ex), tuple(low / 2 * ez),
                          class_id, instance_id, vel))
    return quads


def sloped_roof_scene(
    n_frames: int = 6,
    ego_speed: float = 5.0,
    distance: float = 8.0,
    sensor: Optional[SensorModel] = None,
    seed: int = 0,
) -> SyntheticScene:
    """Static low object with a large sloped roof ahead of a sensor driving towards it."""
    sensor = sensor or SensorModel(azimuth_step_deg=0.2, range_noise=0.01)
    ground = -SENSOR_HEIGHT
    quads = wedge((distance + 2.0, 0.0, ground), (4.0, 2.0, 1.2), 0.4, class_id=CAR_ID, instance_id=1)
    step = ego_speed / sensor.rate_hz
    poses = [Pose(np.eye(3), (i * step, 0.0, 0.0)) for i in range(n_frames)]
    return SyntheticScene(quads, [], poses, sensor, seed)


def classifier_benchmark(
    n_scenes: int = 10,
    n_frames: int = 10,
    seed: int = 0,
    sensor: Optional[SensorModel] = None,
) -> list:
    """Scenes with two static and two moving objects each, seen from a moving sensor.

    Objects sit on separate lanes so tracks never merge. Every other scene has
    a pedestrian walking at 0.5 m/s; the first scene contains the sloped-roof
    static object.
    """
    sensor = sensor or SensorModel(azimuth_step_deg=0.2, range_noise=0.01)
    rng = np.random.default_rng(seed)
    ground = -SENSOR_HEIGHT
    ego_speeds = [0.0, 3.0, 6.0, 10.0]
    scenes = []
    for k in range(n_scenes):
        ego = ego_speeds[k % len(ego_speeds)]
        lanes = rng.permutation([-13.0, -9.5, -6.0, 6.0, 9.5, 13.0])[:4]
        quads = []
        for j, lane in enumerate(lanes):
            inst = 10 * k + j + 1
            x0 = rng.uniform(2.0, 14.0) + ego * n_frames / sensor.rate_hz / 2
            moving = j >= 2
            slow = moving and j == 3 and k % 2 == 0
            pedestrian = slow or rng.uniform() < 0.4
            if k == 0 and j == 0:
                quads += wedge((x0, lane, ground), (4.0, 2.0, 1.2), 0.4, class_id=CAR_ID, instance_id=inst)
                continue
            if pedestrian:
                size, z = (0.6, 0.6, 1.7), ground + 0.85
                speed = 0.5 if slow else rng.uniform(0.8, 1.6)
                heading = rng.uniform(-np.pi, np.pi)
                cls = MOVING_PERSON_ID if moving else PERSON_ID
            else:
                size, z = (4.5, 1.8, 1.5), ground + 0.75
                speed = rng.uniform(3.0, 12.0)
                heading = rng.choice([0.0, np.pi])
                cls = MOVING_CAR_ID if moving else CAR_ID
            vel = (speed * np.cos(heading), speed * np.sin(heading), 0.0) if moving else (0.0, 0.0, 0.0)
            yaw = heading if moving else rng.choice([0.0, np.pi / 2])
            quads += box((x0, lane, z), size, yaw, class_id=cls, instance_id=inst, velocity=vel)
        poses = [Pose(np.eye(3), (i * ego / sensor.rate_hz, 0.0, 0.0)) for i in range(n_frames)]
        scenes.append(SyntheticScene(quads, [], poses, sensor, seed * 1000 + k))
    return scenes
