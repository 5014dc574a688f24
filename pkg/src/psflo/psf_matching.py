"""PSF submap, PSF correspondences and plane-to-plane / line-to-line residuals."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator

from .exceptions import DegenerateLine, DegeneratePlane, EmptySet
from .extraction import PSFFrame
from .geometry import (
    BUILDING,
    POLE,
    PSF,
    ROAD,
    SIGN,
    LineCPN,
    PlaneCP,
    Pose,
    cpn_to_cp,
    direction_sign,
    invert,
    transform_line_cpn,
    transform_plane_cp,
    transform_psf,
)
from .gef import skew_rows
from .solver import ResidualBlock, SolveResult, solve_with_reassociation

logger = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# submap


@dataclass(frozen=True)
class _SubmapFrame:
    origin: np.ndarray
    psfs: tuple


class PSFSubmap:
    """World-frame PSFs from recent frames; frames far from the current origin are evicted."""

    def __init__(self, frames: Sequence[_SubmapFrame] = (), window: float = 100.0):
        self.frames = tuple(frames)
        self.window = window

    @property
    def psfs(self) -> list:
        return [p for f in self.frames for p in f.psfs]

    def __len__(self) -> int:
        return sum(len(f.psfs) for f in self.frames)

    @cached_property
    def _index(self):
        psfs = self.psfs
        if not psfs:
            return None, np.empty(0, dtype=object)
        return cKDTree(np.array([p.center for p in psfs])), np.array([p.label for p in psfs])

    @property
    def index_size(self) -> int:
        tree, _ = self._index
        return 0 if tree is None else tree.n

    def query(self, center, radius: float) -> list:
        tree, _ = self._index
        if tree is None:
            return []
        psfs = self.psfs
        return [psfs[i] for i in sorted(tree.query_ball_point(center, radius))]


def update_psf_submap(submap: Optional[PSFSubmap], frame: PSFFrame, pose: Pose, window: Optional[float] = None) -> PSFSubmap:
    """Append ``frame`` transformed by ``pose``; evict frames beyond the window."""
    submap = submap or PSFSubmap()
    window = submap.window if window is None else window
    world = []
    for psf in frame.psfs:
        try:
            world.append(transform_psf(psf, pose))
        except (DegeneratePlane, DegenerateLine):
            continue
    origin = np.asarray(pose.translation, dtype=float)
    frames = [f for f in submap.frames if np.linalg.norm(f.origin - origin) <= window]
    frames.append(_SubmapFrame(origin, tuple(world)))
    return PSFSubmap(frames, window)


# --------------------------------------------------------------------------
# correspondences


@dataclass(frozen=True)
class PSFCorrespondence:
    source: PSF
    neighbors: tuple
    average: PSF


def _aligned_direction(d, ref):
    return d if d @ ref >= 0 else -d


def weighted_average_psf(neighbors: Sequence[PSF]) -> PSF:
    """Weight-averaged coefficients of same-label PSFs."""
    if not neighbors:
        raise EmptySet("no PSFs to average")
    label = neighbors[0].label
    if any(p.label != label for p in neighbors):
        raise ValueError("neighbors must share one label")
    w = np.array([p.weight for p in neighbors])
    if w.sum() <= 0:
        w = np.ones(len(neighbors))
    wn = w / w.sum()
    center = wn @ np.array([p.center for p in neighbors])
    outline = neighbors[int(np.argmax(w))].outline
    if label == POLE:
        ref = neighbors[0].coefficients.direction
        dirs = np.array([_aligned_direction(p.coefficients.direction, ref) for p in neighbors])
        point = wn @ np.array([p.coefficients.point for p in neighbors])
        coeffs = LineCPN.through(point, wn @ dirs)
    else:
        coeffs = PlaneCP(wn @ np.array([p.coefficients.coefficients for p in neighbors]))
    return PSF(coeffs, float(np.mean([p.weight for p in neighbors])), label, center, outline)


def _compatible(src: PSF, cand: PSF, max_angle: float, max_offset: float) -> bool:
    """Same surface or line up to ``max_angle`` (rad) and ``max_offset`` (m)."""
    if src.is_planar:
        n1, n2 = src.coefficients.normal, cand.coefficients.normal
        if np.arccos(np.clip(n1 @ n2, -1, 1)) > max_angle:
            return False
        return abs(src.coefficients.distance - cand.coefficients.distance) <= max_offset
    l1, l2 = src.coefficients, cand.coefficients
    if np.arccos(np.clip(abs(l1.direction @ l2.direction), -1, 1)) > max_angle:
        return False
    return float(l1.distance_to(l2.point[None])[0]) <= max_offset


DEFAULT_RADII = {ROAD: 3.0, BUILDING: 3.0, SIGN: 1.5, POLE: 1.5}


def find_correspondence(
    source: PSF,
    pose: Pose,
    submap: PSFSubmap,
    radii: Optional[dict] = None,
    max_angle_deg: float = 15.0,
    max_offset: float = 0.5,
) -> Optional[PSFCorrespondence]:
    """Same-label submap PSFs near the source center after moving it by ``pose``."""
    radii = radii or DEFAULT_RADII
    try:
        world = transform_psf(source, pose)
    except (DegeneratePlane, DegenerateLine):
        return None
    max_angle = np.radians(max_angle_deg)
    near = [
        p for p in submap.query(world.center, radii[source.label])
        if p.label == source.label and _compatible(world, p, max_angle, max_offset)
    ]
    if not near:
        return None
    return PSFCorrespondence(source, tuple(near), weighted_average_psf(near))


# --------------------------------------------------------------------------
# residual blocks


class PlaneErrorBlock(ResidualBlock):
    """``gain * w * (c_local - T^-1 (x) c_avg)`` per planar PSF, evaluated in the local frame."""

    kind = "psf_plane"
    robust = False

    def __init__(self, source_coeffs, avg_coeffs, weights, gain: float = 1.0):
        self.source = np.asarray(source_coeffs, dtype=float).reshape(-1, 3)
        avg = np.asarray(avg_coeffs, dtype=float).reshape(-1, 3)
        self.avg_distance = np.linalg.norm(avg, axis=1)
        self.avg_normal = avg / np.maximum(self.avg_distance, 1e-300)[:, None]
        self.weights = np.asarray(weights, dtype=float).reshape(-1) * gain

    def __len__(self) -> int:
        return len(self.source)

    def subset(self, keep) -> "PlaneErrorBlock":
        out = object.__new__(PlaneErrorBlock)
        out.source, out.avg_distance = self.source[keep], self.avg_distance[keep]
        out.avg_normal, out.weights = self.avg_normal[keep], self.weights[keep]
        return out

    def predicted(self, pose: Pose) -> np.ndarray:
        n_local = self.avg_normal @ pose.rotation
        s = self.avg_distance - self.avg_normal @ pose.translation
        return s[:, None] * n_local

    def evaluate(self, pose: Pose):
        R = pose.rotation
        n_bar = self.avg_normal
        n_local = n_bar @ R
        s = self.avg_distance - n_bar @ pose.translation
        r = self.weights[:, None] * (self.source - s[:, None] * n_local)
        d_rho = -n_local[:, :, None] * n_bar[:, None, :]
        d_phi = s[:, None, None] * (R.T @ skew_rows(n_bar))
        J = -self.weights[:, None, None] * np.concatenate([d_rho, d_phi], axis=2)
        return r, J


def _quat_mul_pure(q, w):
    """``q (x) (0, w)`` for rows of Hamilton quaternions ``q`` and 3-vectors ``w``."""
    a, v = q[..., :1], q[..., 1:]
    scalar = -(v * w).sum(-1, keepdims=True)
    vec = a * w + np.cross(v, w)
    return np.concatenate([scalar, vec], axis=-1)


def _quat_from_frames(F):
    """Hamilton quaternions (w, x, y, z) of rotation matrices ``F`` (M, 3, 3), w >= 0."""
    from .geometry import quaternion_from_matrix

    return np.array([quaternion_from_matrix(f) for f in F]).reshape(-1, 4)


def line_cp_vectors(points, directions):
    """Distance-scaled CP quaternions of lines in closest-point form, with their frames."""
    d = np.linalg.norm(points, axis=1)
    if np.any(d <= 1e-6):
        raise DegenerateLine("line passes through the origin")
    p_hat = points / d[:, None]
    a = np.cross(directions, p_hat)
    F = np.stack([a, directions, p_hat], axis=2)
    q = _quat_from_frames(F)
    return d, q, F


class LineErrorBlock(ResidualBlock):
    """``gain * w * (d_l q_l - d_p q_p)`` with the predicted line ``T^-1 (x) avg``."""

    kind = "psf_line"
    robust = False

    def __init__(self, source_lines: Sequence[LineCPN], avg_lines: Sequence[LineCPN], weights, gain: float = 1.0):
        self.source_point = np.array([l.point for l in source_lines], dtype=float).reshape(-1, 3)
        self.source_dir = np.array([l.direction for l in source_lines], dtype=float).reshape(-1, 3)
        self.avg_point = np.array([l.point for l in avg_lines], dtype=float).reshape(-1, 3)
        self.avg_dir = np.array([l.direction for l in avg_lines], dtype=float).reshape(-1, 3)
        self.weights = np.asarray(weights, dtype=float).reshape(-1) * gain
        if len(self):
            d, q, _ = line_cp_vectors(self.source_point, self.source_dir)
            self.source_q = q
            self.source_vec = d[:, None] * q
        else:
            self.source_q = self.source_vec = np.empty((0, 4))

    def __len__(self) -> int:
        return len(self.source_point)

    def subset(self, keep) -> "LineErrorBlock":
        out = object.__new__(LineErrorBlock)
        for name in ("source_point", "source_dir", "avg_point", "avg_dir", "weights", "source_q", "source_vec"):
            setattr(out, name, getattr(self, name)[keep])
        return out

    def _local_lines(self, pose: Pose):
        R = pose.rotation
        p_l = (self.avg_point - pose.translation) @ R
        n_l = self.avg_dir @ R
        sign = np.array([direction_sign(n) for n in n_l])
        n = sign[:, None] * n_l
        p_c = p_l - (p_l * n).sum(1, keepdims=True) * n
        return p_l, n_l, n, sign, p_c

    def predicted(self, pose: Pose) -> np.ndarray:
        _, _, n, _, p_c = self._local_lines(pose)
        d, q, _ = line_cp_vectors(p_c, n)
        q *= np.where((q * self.source_q).sum(1) < 0, -1.0, 1.0)[:, None]
        return d[:, None] * q

    def evaluate(self, pose: Pose):
        m = len(self)
        R = pose.rotation
        p_l, n_l, n, sign, p_c = self._local_lines(pose)
        d, q, F = line_cp_vectors(p_c, n)
        flip = np.where((q * self.source_q).sum(1) < 0, -1.0, 1.0)
        q = flip[:, None] * q
        r = self.weights[:, None] * (self.source_vec - d[:, None] * q)

        # derivatives of the local line w.r.t. the six increment directions
        dp_l = np.zeros((m, 6, 3))
        dn = np.zeros((m, 6, 3))
        dp_l[:, :3, :] = -R.T[None].transpose(0, 2, 1)  # column k of -R^T
        rel = self.avg_point - pose.translation
        dp_l[:, 3:, :] = np.transpose(R.T @ skew_rows(rel), (0, 2, 1))
        dn[:, 3:, :] = sign[:, None, None] * np.transpose(R.T @ skew_rows(self.avg_dir), (0, 2, 1))

        pn = (p_l * n).sum(1)
        dp_c = (
            dp_l
            - ((dp_l * n[:, None]).sum(2) + (p_l[:, None] * dn).sum(2))[:, :, None] * n[:, None]
            - pn[:, None, None] * dn
        )
        p_hat = p_c / d[:, None]
        dd = (dp_c * p_hat[:, None]).sum(2)
        dp_hat = (dp_c - dd[:, :, None] * p_hat[:, None]) / d[:, None, None]
        da = np.cross(dn, p_hat[:, None]) + np.cross(n[:, None], dp_hat)
        dF = np.stack([da, dn, dp_hat], axis=3)  # (m, 6, 3, 3) columns
        A = np.einsum("mij,mkil->mkjl", F, dF)  # F^T dF
        omega = 0.5 * np.stack(
            [A[..., 2, 1] - A[..., 1, 2], A[..., 0, 2] - A[..., 2, 0], A[..., 1, 0] - A[..., 0, 1]], axis=-1
        )
        dq = 0.5 * _quat_mul_pure(q[:, None, :], omega)
        dvec = dd[:, :, None] * q[:, None, :] + d[:, None, None] * dq  # (m, 6, 4)
        J = -self.weights[:, None, None] * np.transpose(dvec, (0, 2, 1))
        return r, J


def plane_error(source: PSF, avg: PSF, pose: Pose, gain: float = 1.0) -> PlaneErrorBlock:
    if not (source.is_planar and avg.is_planar):
        raise ValueError("plane_error needs planar PSFs")
    if source.coefficients.distance <= 1e-6 or avg.coefficients.distance <= 1e-6:
        raise DegeneratePlane("plane through the origin")
    return PlaneErrorBlock([source.coefficients.coefficients], [avg.coefficients.coefficients], [source.weight], gain)


def line_error(source: PSF, avg: PSF, pose: Pose, gain: float = 1.0) -> LineErrorBlock:
    if source.label != POLE or avg.label != POLE:
        raise ValueError("line_error needs pole PSFs")
    cpn_to_cp(source.coefficients)
    cpn_to_cp(transform_line_cpn(avg.coefficients, invert(pose)))
    return LineErrorBlock([source.coefficients], [avg.coefficients], [source.weight], gain)


# --------------------------------------------------------------------------
# matching and joint solve


class PSFMatcher(BaseEstimator):
    """PSF correspondence search and residual construction.

    Parameters
    ----------
    road_radius, building_radius, sign_radius, pole_radius : float
        Search radii around the transformed PSF center.
    window : float
        Submap window: frames whose origin is farther are evicted.
    psf_gain : float
        Global gain on PSF residuals; 0 disables them.
    max_angle_deg, max_offset : float
        Compatibility gate between a source PSF and submap candidates.
    max_residual : float
        Correspondences whose residual norm at the initial pose exceeds this
        (before weighting) are dropped. ``None`` keeps all.
    """

    def __init__(
        self,
        road_radius=3.0,
        building_radius=3.0,
        sign_radius=1.5,
        pole_radius=1.5,
        window=100.0,
        psf_gain=1.0,
        max_angle_deg=15.0,
        max_offset=0.5,
        max_residual=0.5,
    ):
        self.road_radius = road_radius
        self.building_radius = building_radius
        self.sign_radius = sign_radius
        self.pole_radius = pole_radius
        self.window = window
        self.psf_gain = psf_gain
        self.max_angle_deg = max_angle_deg
        self.max_offset = max_offset
        self.max_residual = max_residual

    @property
    def radii(self) -> dict:
        return {ROAD: self.road_radius, BUILDING: self.building_radius, SIGN: self.sign_radius, POLE: self.pole_radius}

    def update(self, submap: Optional[PSFSubmap], frame: PSFFrame, pose: Pose) -> PSFSubmap:
        return update_psf_submap(submap or PSFSubmap(window=self.window), frame, pose, self.window)

    def correspondences(self, frame: PSFFrame, submap: PSFSubmap, pose: Pose) -> list:
        out = []
        for psf in frame.psfs:
            c = find_correspondence(psf, pose, submap, self.radii, self.max_angle_deg, self.max_offset)
            if c is not None:
                out.append(c)
        return out

    def build_blocks(self, frame: PSFFrame, submap: Optional[PSFSubmap], pose: Pose) -> list:
        if not self.psf_gain or submap is None or len(submap) == 0:
            return []
        planes_src, planes_avg, planes_w = [], [], []
        lines_src, lines_avg, lines_w = [], [], []
        for c in self.correspondences(frame, submap, pose):
            if c.source.is_planar:
                planes_src.append(c.source.coefficients.coefficients)
                planes_avg.append(c.average.coefficients.coefficients)
                planes_w.append(c.source.weight)
            else:
                try:
                    cpn_to_cp(transform_line_cpn(c.average.coefficients, invert(pose)))
                    cpn_to_cp(c.source.coefficients)
                except DegenerateLine:
                    continue
                lines_src.append(c.source.coefficients)
                lines_avg.append(c.average.coefficients)
                lines_w.append(c.source.weight)
        blocks = []
        if planes_src:
            blocks.append(PlaneErrorBlock(planes_src, planes_avg, planes_w, self.psf_gain))
        if lines_src:
            blocks.append(LineErrorBlock(lines_src, lines_avg, lines_w, self.psf_gain))
        if self.max_residual is not None:
            blocks = [b for b in (_gate_block(b, pose, self.max_residual) for b in blocks) if b is not None]
        return blocks


def _gate_block(block, pose: Pose, max_residual: float):
    """Keep only rows whose unweighted residual at ``pose`` is within ``max_residual``."""
    keep = np.linalg.norm(_unweighted_residual(block, pose), axis=1) <= max_residual
    if keep.all():
        return block
    if not keep.any():
        return None
    return block.subset(keep)


def _unweighted_residual(block, pose: Pose) -> np.ndarray:
    if isinstance(block, LineErrorBlock):
        return block.source_vec - block.predicted(pose)
    return block.source - block.predicted(pose)


BlockSource = Union[Sequence[ResidualBlock], Callable[[Pose], Sequence[ResidualBlock]]]


def solve_map_pose(gef_blocks: BlockSource, psf_blocks: BlockSource, init: Pose, outer_iterations: int = 3, **lm_kwargs) -> SolveResult:
    """Joint LM over GeF and PSF residuals.

    Either argument may be a fixed list of blocks or a callable ``pose -> blocks``
    that re-establishes correspondences at every outer iteration.
    """

    def as_builder(src):
        return src if callable(src) else (lambda pose, _b=list(src): _b)

    gef, psf = as_builder(gef_blocks), as_builder(psf_blocks)
    return solve_with_reassociation(lambda pose: [*gef(pose), *psf(pose)], init, outer_iterations=outer_iterations, **lm_kwargs)
