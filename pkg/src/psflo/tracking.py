"""Instance-level dynamic/static object classification.

Object points are clustered per frame and tracked by greedy centroid
association. For every tracked pair of frames a planar velocity density is
computed from vertically sampled points; its spread, its value at zero and the
dispersion of its dominant headings are turned into a static probability that
is decoded along the track with a two-state HMM.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from itertools import product
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import distance_transform_edt
from scipy.signal import correlate
from sklearn.base import BaseEstimator

from .exceptions import EmptyAfterSampling
from .fitting import euclidean_clusters
from .geometry import Pose
from .io import SemanticCloud

logger = logging.getLogger(__name__)

STATIC, DYNAMIC, NOT_OBJECT = 0, 1, -1
STATE_NAMES = {STATIC: "static", DYNAMIC: "dynamic"}


# --------------------------------------------------------------------------
# data types


@dataclass
class ObjectInstance:
    points: np.ndarray  # world frame
    local: np.ndarray  # sensor frame
    rings: np.ndarray
    frame_index: int
    indices: np.ndarray  # into the frame's cloud

    @property
    def centroid(self) -> np.ndarray:
        return self.points.mean(axis=0)

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class VelocityDensity:
    velocities_x: np.ndarray
    velocities_y: np.ndarray
    density: np.ndarray  # (nx, ny), sums to 1

    @property
    def resolution(self) -> float:
        return float(self.velocities_x[1] - self.velocities_x[0])

    def grid(self) -> np.ndarray:
        vx, vy = np.meshgrid(self.velocities_x, self.velocities_y, indexing="ij")
        return np.stack([vx, vy], axis=-1)

    @property
    def mean(self) -> np.ndarray:
        return np.tensordot(self.density, self.grid(), axes=([0, 1], [0, 1]))

    @property
    def covariance(self) -> np.ndarray:
        dev = self.grid() - self.mean
        return np.einsum("ij,ija,ijb->ab", self.density, dev, dev)

    @property
    def argmax(self) -> np.ndarray:
        i, j = np.unravel_index(np.argmax(self.density), self.density.shape)
        return np.array([self.velocities_x[i], self.velocities_y[j]])

    def at_zero(self) -> float:
        i = int(np.argmin(np.abs(self.velocities_x)))
        j = int(np.argmin(np.abs(self.velocities_y)))
        return float(self.density[i, j])

    def top_headings(self, k: int) -> np.ndarray:
        """Headings of the ``k`` highest-density velocity cells."""
        flat = np.argsort(self.density, axis=None, kind="stable")[::-1][:k]
        i, j = np.unravel_index(flat, self.density.shape)
        return np.arctan2(self.velocities_y[j], self.velocities_x[i])


@dataclass(frozen=True)
class StateMeasurement:
    p_static: float
    p_uncertain: float = 0.0
    heading_spread: float = 0.0

    @property
    def p_dynamic(self) -> float:
        return 1.0 - self.p_static


@dataclass
class TrackState:
    track_id: int
    instances: list = field(default_factory=list)
    measurements: list = field(default_factory=list)
    densities: list = field(default_factory=list)
    headings: list = field(default_factory=list)
    states: list = field(default_factory=list)
    missed: int = 0

    @property
    def frames(self) -> list:
        return [inst.frame_index for inst in self.instances]

    @property
    def centroid(self) -> np.ndarray:
        return self.instances[-1].centroid

    def __len__(self) -> int:
        return len(self.instances)


# --------------------------------------------------------------------------
# clustering and association


def cluster_objects(
    local_points,
    rings=None,
    pose: Optional[Pose] = None,
    frame_index: int = 0,
    tolerance: float = 0.5,
    min_size: int = 30,
    indices=None,
) -> list:
    local = np.asarray(local_points, dtype=float).reshape(-1, 3)
    rings = np.zeros(len(local), dtype=np.int32) if rings is None else np.asarray(rings)
    indices = np.arange(len(local)) if indices is None else np.asarray(indices)
    pose = pose or Pose.identity()
    out = []
    for idx in euclidean_clusters(local, tolerance, min_size):
        out.append(ObjectInstance(pose.apply(local[idx]), local[idx], rings[idx], frame_index, indices[idx]))
    return out


@dataclass
class Assignment:
    matches: list
    unmatched_tracks: list
    unmatched_detections: list


def _centroids(items) -> np.ndarray:
    if isinstance(items, np.ndarray):
        return items.reshape(-1, 3)
    return np.array([np.asarray(getattr(x, "centroid", x), dtype=float) for x in items]).reshape(-1, 3)


def associate(tracks, detections, max_distance: float = 1.5) -> Assignment:
    """Globally greedy closest-first matching of centroids, gated at ``max_distance``."""
    tc, dc = _centroids(tracks), _centroids(detections)
    matches = []
    if len(tc) and len(dc):
        dist = np.linalg.norm(tc[:, None, :] - dc[None, :, :], axis=2)
        order = np.argsort(dist, axis=None, kind="stable")
        used_t, used_d = set(), set()
        for flat in order:
            t, d = np.unravel_index(flat, dist.shape)
            if dist[t, d] > max_distance:
                break
            if t in used_t or d in used_d:
                continue
            matches.append((int(t), int(d)))
            used_t.add(t)
            used_d.add(d)
    mt = {t for t, _ in matches}
    md = {d for _, d in matches}
    return Assignment(
        matches,
        [i for i in range(len(tc)) if i not in mt],
        [j for j in range(len(dc)) if j not in md],
    )


# --------------------------------------------------------------------------
# vertical-plane sampling


def _longest_run(masks: np.ndarray) -> np.ndarray:
    """Longest run of consecutive set bits in each uint64."""
    x = masks.astype(np.uint64).copy()
    run = np.zeros(len(x), dtype=np.int64)
    while np.any(x):
        run += x != 0
        x &= x >> np.uint64(1)
    return run


def sample_vertical_points(
    local_points,
    rings,
    angle_step_deg: float = 0.5,
    range_step: float = 0.025,
    neighborhood: int = 1,
    min_ring_run: int = 2,
) -> np.ndarray:
    """Indices of points in polar bins whose neighborhood is crossed by many consecutive rings."""
    pts = np.asarray(local_points, dtype=float).reshape(-1, 3)
    rings = np.asarray(rings, dtype=np.int64)
    if len(pts) == 0:
        return np.empty(0, dtype=np.int64)
    theta = np.degrees(np.arctan2(pts[:, 1], pts[:, 0]))
    rng = np.hypot(pts[:, 0], pts[:, 1])
    bi = np.floor(theta / angle_step_deg).astype(np.int64)
    bj = np.floor(rng / range_step).astype(np.int64)
    bins, inverse = np.unique(np.column_stack([bi, bj]), axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    bits = np.left_shift(np.uint64(1), (rings % 64).astype(np.uint64))
    masks = np.zeros(len(bins), dtype=np.uint64)
    np.bitwise_or.at(masks, inverse, bits)

    # linear keys over an offset grid so neighbor bins are found by search
    span = bins[:, 1].max() - bins[:, 1].min() + 2 * neighborhood + 1
    keys = (bins[:, 0] - bins[:, 0].min()) * span + (bins[:, 1] - bins[:, 1].min())
    merged = masks.copy()
    r = neighborhood
    for di, dj in product(range(-r, r + 1), repeat=2):
        if di == 0 and dj == 0:
            continue
        target = keys + di * span + dj
        pos = np.clip(np.searchsorted(keys, target), 0, len(keys) - 1)
        hit = keys[pos] == target
        merged[hit] |= masks[pos[hit]]
    keep_bin = _longest_run(merged) > min_ring_run
    return np.flatnonzero(keep_bin[inverse])


# --------------------------------------------------------------------------
# velocity density


def estimate_velocity(
    prev_points,
    cur_points,
    dt: float,
    extent: float = 15.0,
    resolution: float = 0.25,
    sigma: float = 0.3,
    floor: float = 1e-3,
) -> VelocityDensity:
    """Density over planar velocities from how well shifted ``prev`` points land on ``cur``.

    Each candidate velocity ``v`` scores ``sum_x log(floor + exp(-d(x + v dt)^2 / 2 sigma^2))``
    with ``d`` the ground-plane distance to the nearest current point; the density
    is the normalized exponential of the score.
    """
    prev = np.asarray(prev_points, dtype=float).reshape(-1, 3)[:, :2]
    cur = np.asarray(cur_points, dtype=float).reshape(-1, 3)[:, :2]
    if len(prev) == 0 or len(cur) == 0:
        raise EmptyAfterSampling("velocity estimation needs points in both frames")
    if dt <= 0:
        raise ValueError("dt must be positive")
    cell = resolution * dt
    nv = int(round(extent / resolution))
    pad = nv + int(np.ceil(4 * sigma / cell)) + 1
    lo = np.minimum(prev.min(0), cur.min(0)) - pad * cell
    shape = (np.ceil((np.maximum(prev.max(0), cur.max(0)) - lo) / cell).astype(int) + pad + 1)

    occ = np.ones(shape, dtype=bool)
    ci = np.floor((cur - lo) / cell).astype(int)
    occ[ci[:, 0], ci[:, 1]] = False
    dist = distance_transform_edt(occ) * cell
    field = np.log(floor + np.exp(-0.5 * (dist / sigma) ** 2))

    pi = np.floor((prev - lo) / cell).astype(int)
    i0, j0 = pi.min(0)
    i1, j1 = pi.max(0) + 1
    hist = np.zeros((i1 - i0, j1 - j0))
    np.add.at(hist, (pi[:, 0] - i0, pi[:, 1] - j0), 1.0)
    window = field[i0 - nv : i1 + nv, j0 - nv : j1 + nv]
    score = correlate(window, hist, mode="valid")
    score -= score.max()
    dens = np.exp(score)
    dens /= dens.sum()
    v = (np.arange(-nv, nv + 1)) * resolution
    return VelocityDensity(v, v.copy(), dens)


# --------------------------------------------------------------------------
# scores


def sigmoid(x, a: float, b: float):
    return 1.0 / (1.0 + np.exp(a * (b - np.asarray(x, dtype=float))))


def velocity_uncertainty(density: VelocityDensity, a: float = 2.0, b: float = 1.0) -> float:
    return float(sigmoid(np.linalg.norm(density.covariance, 2), a, b))


def static_score_velocity(density: VelocityDensity, a: float = 100.0, b: float = 0.05) -> float:
    peak = float(density.density.max())
    if peak <= 0:
        raise ValueError("density has no mass")
    return float(sigmoid(density.at_zero() / peak, a, b))


def heading_variance(headings, h_max: float = 3.0) -> float:
    """Circular dispersion ``sqrt(-ln R^2)`` of headings (radians), clamped to ``h_max``."""
    h = np.asarray(headings, dtype=float)
    if h.size == 0:
        raise ValueError("need at least one heading")
    r2 = np.mean(np.cos(h)) ** 2 + np.mean(np.sin(h)) ** 2
    if r2 < np.exp(-(h_max**2)):
        return float(h_max)
    return float(np.sqrt(max(-np.log(min(r2, 1.0)), 0.0)))


def _gauss(x, mu, sd):
    return np.exp(-0.5 * ((x - mu) / sd) ** 2) / sd


def static_score_heading(h_sigma: float, static=(2.06, 0.35), dynamic=(0.05, 0.53)) -> float:
    ns = _gauss(h_sigma, *static)
    nd = _gauss(h_sigma, *dynamic)
    return float(ns / (ns + nd))


def log_odds(p):
    p = np.asarray(p, dtype=float)
    return np.log(p / (1.0 - p))


def fuse_scores(p_heading: float, p_velocity: float, p_uncertain: float, eps: float = 1e-4,
                invert_gate: bool = False, heading_spread: float = 0.0) -> StateMeasurement:
    """Sum of log-odds; the velocity term is gated by ``p_uncertain`` (or by its complement)."""
    ph = float(np.clip(p_heading, eps, 1 - eps))
    pv = float(np.clip(p_velocity, eps, 1 - eps))
    gate = 1.0 - p_uncertain if invert_gate else p_uncertain
    odds = log_odds(ph) + gate * log_odds(pv)
    p = float(1.0 / (1.0 + np.exp(-odds)))
    return StateMeasurement(p, float(p_uncertain), float(heading_spread))


# --------------------------------------------------------------------------
# decoding


def viterbi_decode(measurements: Sequence, transition=((0.99, 0.01), (0.99, 0.01)), prior=(0.5, 0.5)) -> list:
    """Most probable static/dynamic path; emissions are ``(p_static, p_dynamic)``."""
    if len(measurements) == 0:
        return []
    M = np.asarray(transition, dtype=float)
    if M.shape != (2, 2) or not np.allclose(M.sum(axis=1), 1.0):
        raise ValueError("transition matrix must be 2x2 row-stochastic")
    emis = np.array([[m.p_static, m.p_dynamic] if isinstance(m, StateMeasurement) else [m[0], m[1]]
                     for m in measurements], dtype=float)
    with np.errstate(divide="ignore"):
        log_e = np.log(emis)
        log_m = np.log(M)
        score = np.log(np.asarray(prior, dtype=float)) + log_e[0]
    back = np.zeros((len(emis), 2), dtype=int)
    for t in range(1, len(emis)):
        cand = score[:, None] + log_m  # from (row) -> to (col)
        back[t] = np.argmax(cand, axis=0)
        score = cand[back[t], [0, 1]] + log_e[t]
    path = [int(np.argmax(score))]
    for t in range(len(emis) - 1, 0, -1):
        path.append(int(back[t, path[-1]]))
    return path[::-1]


def classify_track(track_or_measurements, min_length: int = 3, **decode_kwargs) -> list:
    """Per-frame states; tracks shorter than ``min_length`` are dynamic throughout."""
    ms = getattr(track_or_measurements, "measurements", track_or_measurements)
    if len(ms) < min_length:
        return [DYNAMIC] * len(ms)
    return viterbi_decode(ms, **decode_kwargs)


# --------------------------------------------------------------------------
# online classifier


@dataclass
class FrameClassification:
    frame_index: int
    labels: np.ndarray  # per point: NOT_OBJECT, STATIC or DYNAMIC
    rows: list  # CSV rows for this frame


class DynamicObjectClassifier(BaseEstimator):
    """Track objects across frames and label their points static or dynamic.

    ``update`` runs online and returns the decision available at the current
    frame; ``finalize`` re-decodes every track over its full length.
    """

    def __init__(
        self,
        angle_step_deg=0.5,
        range_step=0.025,
        neighborhood=1,
        min_ring_run=2,
        uncertainty_sigmoid=(2.0, 1.0),
        velocity_sigmoid=(100.0, 0.05),
        static_heading=(2.06, 0.35),
        dynamic_heading=(0.05, 0.53),
        top_k=5,
        transition=((0.99, 0.01), (0.99, 0.01)),
        prior=(0.5, 0.5),
        min_track_length=3,
        velocity_extent=15.0,
        velocity_resolution=0.25,
        kernel_sigma=0.3,
        kernel_floor=1e-3,
        cluster_tolerance=0.5,
        min_cluster_size=30,
        assoc_distance=1.5,
        max_missed=2,
        h_max=3.0,
        eps=1e-4,
        min_sampled_points=10,
        vertical_sampling=True,
        invert_uncertainty_gate=False,
        frame_dt=0.1,
    ):
        self.angle_step_deg = angle_step_deg
        self.range_step = range_step
        self.neighborhood = neighborhood
        self.min_ring_run = min_ring_run
        self.uncertainty_sigmoid = uncertainty_sigmoid
        self.velocity_sigmoid = velocity_sigmoid
        self.static_heading = static_heading
        self.dynamic_heading = dynamic_heading
        self.top_k = top_k
        self.transition = transition
        self.prior = prior
        self.min_track_length = min_track_length
        self.velocity_extent = velocity_extent
        self.velocity_resolution = velocity_resolution
        self.kernel_sigma = kernel_sigma
        self.kernel_floor = kernel_floor
        self.cluster_tolerance = cluster_tolerance
        self.min_cluster_size = min_cluster_size
        self.assoc_distance = assoc_distance
        self.max_missed = max_missed
        self.h_max = h_max
        self.eps = eps
        self.min_sampled_points = min_sampled_points
        self.vertical_sampling = vertical_sampling
        self.invert_uncertainty_gate = invert_uncertainty_gate
        self.frame_dt = frame_dt

    # ---------------------------------------------------------------- state

    def reset(self) -> "DynamicObjectClassifier":
        self.tracks_: list = []
        self.finished_: list = []
        self.frames_: dict = {}  # frame index -> (n_points, [(track, instance)])
        self.rows_: list = []
        self._next_id = 0
        self._times: dict = {}
        return self

    def fit(self, X: Sequence[SemanticCloud], y: Sequence[Pose]):
        self.reset()
        for sem, pose in zip(X, y):
            self.update(sem, pose)
        return self

    def predict(self, X: Sequence[SemanticCloud], y: Sequence[Pose]) -> list:
        """Offline per-point labels for every frame of ``X`` observed at poses ``y``."""
        return self.fit(X, y).finalize()

    # ---------------------------------------------------------------- helpers

    def _sampled(self, inst: ObjectInstance) -> tuple[np.ndarray, bool]:
        if not self.vertical_sampling:
            return inst.points, True
        keep = sample_vertical_points(
            inst.local, inst.rings, self.angle_step_deg, self.range_step, self.neighborhood, self.min_ring_run
        )
        if len(keep) < self.min_sampled_points:
            return inst.points, False
        return inst.points[keep], True

    def _density(self, prev: ObjectInstance, cur: ObjectInstance, dt: float):
        prev_pts, ok_prev = self._sampled(prev)
        cur_pts, ok_cur = self._sampled(cur)
        dens = estimate_velocity(
            prev_pts, cur_pts, dt, self.velocity_extent, self.velocity_resolution,
            self.kernel_sigma, self.kernel_floor,
        )
        return dens, ok_prev and ok_cur

    def _measure(self, track: TrackState, dens: VelocityDensity, sampled_ok: bool) -> StateMeasurement:
        p_v = static_score_velocity(dens, *self.velocity_sigmoid)
        if not sampled_ok:
            # sampling failed: fall back to the velocity term alone
            return fuse_scores(0.5, p_v, 1.0, self.eps, self.invert_uncertainty_gate, np.nan)
        p_u = velocity_uncertainty(dens, *self.uncertainty_sigmoid)
        heads = dens.top_headings(self.top_k)
        pooled = np.concatenate([track.headings[-1], heads]) if track.headings else heads
        track.headings.append(heads)
        h = heading_variance(pooled, self.h_max)
        p_h = static_score_heading(h, self.static_heading, self.dynamic_heading)
        return fuse_scores(p_h, p_v, p_u, self.eps, self.invert_uncertainty_gate, h)

    def _decode(self, track: TrackState) -> list:
        return classify_track(track, self.min_track_length, transition=self.transition, prior=self.prior)

    # ---------------------------------------------------------------- main loop

    def update(self, sem: SemanticCloud, pose: Pose) -> FrameClassification:
        if not hasattr(self, "tracks_"):
            self.reset()
        frame = sem.frame_index
        time = sem.cloud.timestamp
        obj = np.flatnonzero(sem.mask("object"))
        detections = cluster_objects(
            sem.xyz[obj], sem.cloud.rings()[obj], pose, frame,
            self.cluster_tolerance, self.min_cluster_size, obj,
        )
        assignment = associate(self.tracks_, detections, self.assoc_distance)
        for t, d in assignment.matches:
            track = self.tracks_[t]
            prev = track.instances[-1]
            inst = detections[d]
            prev_time = self._times.get(prev.frame_index)
            if time is not None and prev_time is not None and time > prev_time:
                dt = time - prev_time
            else:
                dt = self.frame_dt * max(frame - prev.frame_index, 1)
            dens, ok = self._density(prev, inst, dt)
            m = self._measure(track, dens, ok)
            if len(track.measurements) == 0:
                # the first observation inherits the first pair's measurement
                track.measurements.append(m)
                track.densities.append(dens)
            track.measurements.append(m)
            track.densities.append(dens)
            track.instances.append(inst)
            track.missed = 0
        for t in assignment.unmatched_tracks:
            self.tracks_[t].missed += 1
        for d in assignment.unmatched_detections:
            self.tracks_.append(TrackState(self._next_id, [detections[d]]))
            self._next_id += 1
        alive = []
        for track in self.tracks_:
            (alive if track.missed <= self.max_missed else self.finished_).append(track)
        self.tracks_ = alive
        self._times[frame] = time

        labels = np.full(len(sem), NOT_OBJECT, dtype=np.int8)
        labels[obj] = DYNAMIC
        observed = []
        rows = []
        for track in self.tracks_:
            inst = track.instances[-1]
            if inst.frame_index != frame:
                continue
            states = self._decode(track) if track.measurements else [DYNAMIC]
            track.states = states
            labels[inst.indices] = states[-1]
            observed.append((track, inst))
            m = track.measurements[-1] if track.measurements else None
            rows.append(dict(
                frame=frame, track=track.track_id,
                p_s="" if m is None else f"{m.p_static:.6f}",
                p_u="" if m is None else f"{m.p_uncertain:.6f}",
                h_sigma="" if m is None or np.isnan(m.heading_spread) else f"{m.heading_spread:.6f}",
                state=STATE_NAMES[states[-1]],
            ))
        self.frames_[frame] = (len(sem), obj, observed)
        self.rows_.extend(rows)
        return FrameClassification(frame, labels, rows)

    def finalize(self) -> list:
        """Per-frame point labels after decoding every track over its whole length."""
        final = {}
        for track in [*self.finished_, *self.tracks_]:
            states = self._decode(track) if track.measurements else [DYNAMIC] * len(track)
            for inst, s in zip(track.instances, states):
                final[(track.track_id, inst.frame_index)] = s
        out = []
        for frame in sorted(self.frames_):
            n, obj, observed = self.frames_[frame]
            labels = np.full(n, NOT_OBJECT, dtype=np.int8)
            labels[obj] = DYNAMIC
            for track, inst in observed:
                labels[inst.indices] = final[(track.track_id, frame)]
            out.append(labels)
        return out


def write_classification_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["frame", "track", "p_s", "p_u", "h_sigma", "state"])
        writer.writeheader()
        writer.writerows(rows)
