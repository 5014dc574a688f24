"""LOAM-style geometric features (GeFs) and their registration residuals."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree
from sklearn.base import BaseEstimator, TransformerMixin

from .fitting import voxel_downsample
from .geometry import Pose
from .io import ROLE_CODE, SemanticCloud
from .solver import ResidualBlock, SolveResult, solve_with_reassociation

CORNER = "corner"
SURFACE = "surface"


@dataclass(frozen=True)
class GeF:
    position: np.ndarray
    kind: str
    curvature: float
    class_id: int
    weight: float = 1.0


@dataclass(frozen=True)
class GeFSet:
    """Features of one kind stored column-wise."""

    kind: str
    points: np.ndarray
    curvature: np.ndarray
    class_id: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "curvature", np.asarray(self.curvature, dtype=float).reshape(-1))
        object.__setattr__(self, "class_id", np.asarray(self.class_id, dtype=np.int64).reshape(-1))
        if not (len(self.curvature) == len(self.class_id) == len(pts)):
            raise ValueError("GeFSet columns must have equal length")

    @classmethod
    def empty(cls, kind: str) -> "GeFSet":
        return cls(kind, np.empty((0, 3)), np.empty(0), np.empty(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.points)

    def __getitem__(self, i: int) -> GeF:
        return GeF(self.points[i], self.kind, float(self.curvature[i]), int(self.class_id[i]))

    def subset(self, idx) -> "GeFSet":
        return GeFSet(self.kind, self.points[idx], self.curvature[idx], self.class_id[idx])

    def transformed(self, pose: Pose) -> "GeFSet":
        return GeFSet(self.kind, pose.apply(self.points), self.curvature, self.class_id)

    def concat(self, other: "GeFSet") -> "GeFSet":
        return GeFSet(
            self.kind,
            np.vstack([self.points, other.points]),
            np.concatenate([self.curvature, other.curvature]),
            np.concatenate([self.class_id, other.class_id]),
        )


def semantic_weight(w, n_same):
    """Down-weight a match whose neighbors rarely share its semantic class."""
    return np.asarray(w, dtype=float) / (1.0 + np.exp(-2.0 * np.asarray(n_same, dtype=float)))


# --------------------------------------------------------------------------
# extraction


def scan_curvature(points: np.ndarray, window: int) -> tuple[np.ndarray, np.ndarray]:
    """Curvature of an ordered scan line and a validity mask.

    Curvature is ``|sum_j (x_j - x_i)| / (n * mean_j |x_j - x_i|)`` over the
    ``n = 2 * window`` neighbors: 0 on a straight run, about 0.7 at a right
    angle corner, independent of point spacing.
    """
    n = len(points)
    curv = np.zeros(n)
    valid = np.zeros(n, dtype=bool)
    if n < 2 * window + 1:
        return curv, valid
    core = slice(window, n - window)
    x = points[core]
    total = np.zeros_like(x)
    dist = np.zeros(len(x))
    for off in range(-window, window + 1):
        if off == 0:
            continue
        d = points[window + off : n - window + off] - x
        total += d
        dist += np.linalg.norm(d, axis=1)
    mean = dist / (2 * window)
    ok = mean > 1e-9
    c = np.zeros(len(x))
    c[ok] = np.linalg.norm(total[ok], axis=1) / (2 * window * mean[ok])
    curv[core] = c
    valid[core] = ok
    return curv, valid


def occluded_mask(points: np.ndarray, window: int, gap_ratio: float) -> np.ndarray:
    """Points on the far side of a depth discontinuity (hidden edges)."""
    n = len(points)
    bad = np.zeros(n, dtype=bool)
    if n < 2:
        return bad
    rng = np.linalg.norm(points, axis=1)
    gap = np.linalg.norm(np.diff(points, axis=0), axis=1)
    for i in np.flatnonzero(gap > gap_ratio * np.minimum(rng[:-1], rng[1:])):
        if rng[i] > rng[i + 1]:
            bad[max(i - window + 1, 0) : i + 1] = True
        else:
            bad[i + 1 : i + 1 + window] = True
    return bad


class GeFExtractor(TransformerMixin, BaseEstimator):
    """Corner and surface features from ring-ordered scans.

    Parameters
    ----------
    window : int
        Half-width of the curvature window along a scan line.
    corner_threshold, surface_threshold : float
        Curvature above / below which a point is a corner / surface candidate.
    n_sectors : int
        Azimuth sectors per ring; quotas apply per ring and sector.
    corners_per_sector, surfaces_per_sector : int
    gap_ratio : float
        Consecutive-point gap, relative to range, treated as an occlusion edge.
    surface_voxel : float
        Voxel size used to thin the surface set (0 disables).
    min_range : float
    excluded_corner_roles : tuple of str
        Roles whose corners are discarded as unreliable.
    n_rings : int
        Used when the cloud carries no ring ids.
    """

    def __init__(
        self,
        window=5,
        corner_threshold=0.3,
        surface_threshold=0.1,
        n_sectors=6,
        corners_per_sector=10,
        surfaces_per_sector=60,
        gap_ratio=0.1,
        surface_voxel=0.4,
        min_range=1.0,
        excluded_corner_roles=("road", "terrain"),
        n_rings=64,
    ):
        self.window = window
        self.corner_threshold = corner_threshold
        self.surface_threshold = surface_threshold
        self.n_sectors = n_sectors
        self.corners_per_sector = corners_per_sector
        self.surfaces_per_sector = surfaces_per_sector
        self.gap_ratio = gap_ratio
        self.surface_voxel = surface_voxel
        self.min_range = min_range
        self.excluded_corner_roles = excluded_corner_roles
        self.n_rings = n_rings

    def fit(self, X=None, y=None):
        return self

    def transform(self, X: Sequence[SemanticCloud]) -> list:
        return [self.extract(sem) for sem in X]

    def extract(self, sem: SemanticCloud, exclude: Optional[np.ndarray] = None):
        """Return ``(corners, surfaces)``; ``exclude`` masks points that take no part."""
        xyz = sem.xyz
        keep = np.linalg.norm(xyz, axis=1) >= self.min_range
        if exclude is not None:
            keep &= ~np.asarray(exclude, dtype=bool)
        idx = np.flatnonzero(keep)
        rings = sem.cloud.rings(self.n_rings)[idx]
        pts = xyz[idx]
        az = np.arctan2(pts[:, 1], pts[:, 0])
        order = np.lexsort((az, rings))
        idx, pts, rings, az = idx[order], pts[order], rings[order], az[order]

        curv = np.zeros(len(pts))
        valid = np.zeros(len(pts), dtype=bool)
        starts = np.flatnonzero(np.r_[True, rings[1:] != rings[:-1]]) if len(pts) else np.array([], int)
        bounds = np.r_[starts, len(pts)]
        for a, b in zip(bounds[:-1], bounds[1:]):
            c, v = scan_curvature(pts[a:b], self.window)
            v &= ~occluded_mask(pts[a:b], self.window, self.gap_ratio)
            curv[a:b], valid[a:b] = c, v

        sector = np.minimum(((az + np.pi) / (2 * np.pi) * self.n_sectors).astype(int), self.n_sectors - 1)
        group = rings.astype(np.int64) * self.n_sectors + sector
        role = sem.role[idx]
        corner_ok = ~np.isin(role, [ROLE_CODE[r] for r in self.excluded_corner_roles])

        corner_sel = self._select_corners(curv, valid & corner_ok & (curv > self.corner_threshold), group)
        surf_cand = np.flatnonzero(valid & (curv < self.surface_threshold))
        o = np.lexsort((curv[surf_cand], group[surf_cand]))
        surf_cand = surf_cand[o]
        g = group[surf_cand]
        first = np.r_[0, np.flatnonzero(g[1:] != g[:-1]) + 1]
        rank = np.arange(len(g)) - np.repeat(first, np.diff(np.r_[first, len(g)]))
        surf_sel = np.sort(surf_cand[rank < self.surfaces_per_sector])

        cls = sem.class_id.astype(np.int64)
        corners = GeFSet(CORNER, pts[corner_sel], curv[corner_sel], cls[idx[corner_sel]])
        surfaces = GeFSet(SURFACE, pts[surf_sel], curv[surf_sel], cls[idx[surf_sel]])
        if self.surface_voxel and len(surfaces):
            _, keep_idx = voxel_downsample(surfaces.points, self.surface_voxel, np.arange(len(surfaces)))
            surfaces = surfaces.subset(keep_idx)
        return corners, surfaces

    def _select_corners(self, curv, candidate, group) -> np.ndarray:
        cand = np.flatnonzero(candidate)
        cand = cand[np.lexsort((-curv[cand], group[cand]))]
        taken = np.zeros(len(curv), dtype=bool)
        suppressed = np.zeros(len(curv), dtype=bool)
        count: dict = {}
        for i in cand:
            g = group[i]
            if suppressed[i] or count.get(g, 0) >= self.corners_per_sector:
                continue
            taken[i] = True
            count[g] = count.get(g, 0) + 1
            lo, hi = max(i - self.window, 0), i + self.window + 1
            same = group[lo:hi] == g
            suppressed[lo:hi] |= same
        return np.flatnonzero(taken)


def extract_gefs(sem: SemanticCloud, exclude=None, **params):
    return GeFExtractor(**params).extract(sem, exclude)


# --------------------------------------------------------------------------
# residual blocks


def skew_rows(v: np.ndarray) -> np.ndarray:
    """Stacked cross-product matrices of the rows of ``v``."""
    out = np.zeros((len(v), 3, 3))
    out[:, 0, 1], out[:, 0, 2] = -v[:, 2], v[:, 1]
    out[:, 1, 0], out[:, 1, 2] = v[:, 2], -v[:, 0]
    out[:, 2, 0], out[:, 2, 1] = -v[:, 1], v[:, 0]
    return out


class PointToLineBlock(ResidualBlock):
    """``w * (I - u u^T)(T x - a)``: its norm is ``w`` times the point-line distance."""

    kind = "gef_line"
    robust = True

    def __init__(self, points, anchors, directions, weights):
        self.points = np.asarray(points, dtype=float).reshape(-1, 3)
        self.anchors = np.asarray(anchors, dtype=float).reshape(-1, 3)
        u = np.asarray(directions, dtype=float).reshape(-1, 3)
        self.directions = u / np.linalg.norm(u, axis=1, keepdims=True) if len(u) else u
        self.weights = np.asarray(weights, dtype=float).reshape(-1)

    def __len__(self) -> int:
        return len(self.points)

    def evaluate(self, pose: Pose):
        rx = self.points @ pose.rotation.T
        diff = rx + pose.translation - self.anchors
        u = self.directions
        proj = np.eye(3) - u[:, :, None] * u[:, None, :]
        w = self.weights[:, None, None]
        r = self.weights[:, None] * np.einsum("mij,mj->mi", proj, diff)
        J = np.empty((len(self), 3, 6))
        J[:, :, :3] = w * proj
        J[:, :, 3:] = -w * proj @ skew_rows(rx)
        return r, J


class PointToPlaneBlock(ResidualBlock):
    """``w * (n . T x - d)``."""

    kind = "gef_plane"
    robust = True

    def __init__(self, points, normals, offsets, weights):
        self.points = np.asarray(points, dtype=float).reshape(-1, 3)
        self.normals = np.asarray(normals, dtype=float).reshape(-1, 3)
        self.offsets = np.asarray(offsets, dtype=float).reshape(-1)
        self.weights = np.asarray(weights, dtype=float).reshape(-1)

    def __len__(self) -> int:
        return len(self.points)

    def evaluate(self, pose: Pose):
        rx = self.points @ pose.rotation.T
        y = rx + pose.translation
        n = self.normals
        w = self.weights
        r = (w * (np.einsum("mi,mi->m", n, y) - self.offsets))[:, None]
        J = np.empty((len(self), 1, 6))
        J[:, 0, :3] = w[:, None] * n
        J[:, 0, 3:] = w[:, None] * np.cross(rx, n)
        return r, J


# --------------------------------------------------------------------------
# submap and correspondences


class GeFSubmap:
    """World-frame corner and surface sets with lazily built KD-trees."""

    def __init__(self, corners: Optional[GeFSet] = None, surfaces: Optional[GeFSet] = None):
        self.corners = corners if corners is not None else GeFSet.empty(CORNER)
        self.surfaces = surfaces if surfaces is not None else GeFSet.empty(SURFACE)

    def __len__(self) -> int:
        return len(self.corners) + len(self.surfaces)

    @cached_property
    def corner_tree(self):
        return cKDTree(self.corners.points) if len(self.corners) else None

    @cached_property
    def surface_tree(self):
        return cKDTree(self.surfaces.points) if len(self.surfaces) else None


def update_submap(
    submap: Optional[GeFSubmap],
    corners: GeFSet,
    surfaces: GeFSet,
    pose: Pose,
    static_points: Optional[np.ndarray] = None,
    static_class: Optional[np.ndarray] = None,
    corner_voxel: float = 0.2,
    surface_voxel: float = 0.4,
    radius: float = 100.0,
) -> GeFSubmap:
    """Insert a frame's features (and static object points as surfaces) at ``pose``."""
    submap = submap or GeFSubmap()
    new_surfaces = surfaces
    if static_points is not None and len(static_points):
        cls = np.zeros(len(static_points), dtype=np.int64) if static_class is None else static_class
        new_surfaces = surfaces.concat(
            GeFSet(SURFACE, static_points, np.zeros(len(static_points)), cls)
        )
    out = []
    for old, new, voxel in (
        (submap.corners, corners, corner_voxel),
        (submap.surfaces, new_surfaces, surface_voxel),
    ):
        merged = old.concat(new.transformed(pose))
        if len(merged):
            near = np.linalg.norm(merged.points - pose.translation, axis=1) <= radius
            merged = merged.subset(np.flatnonzero(near))
        if voxel and len(merged):
            _, keep = voxel_downsample(merged.points, voxel, np.arange(len(merged)))
            merged = merged.subset(keep)
        out.append(merged)
    return GeFSubmap(*out)


@dataclass
class CorrespondenceConfig:
    k: int = 5
    max_neighbor_distance: float = 1.0
    plane_ratio: float = 0.1
    line_ratio: float = 3.0
    min_weight: float = 0.1


def _neighbor_stats(tree, points, target: GeFSet, cfg: CorrespondenceConfig):
    k = min(cfg.k, len(target))
    if tree is None or len(points) == 0 or k < 3:
        return None
    dist, nn = tree.query(points, k=k)
    dist, nn = dist.reshape(len(points), k), nn.reshape(len(points), k)
    close = dist[:, -1] <= cfg.max_neighbor_distance
    nbrs = target.points[nn]
    centroid = nbrs.mean(axis=1)
    dev = nbrs - centroid[:, None, :]
    cov = np.einsum("mki,mkj->mij", dev, dev) / k
    evals, evecs = np.linalg.eigh(cov)
    return nn, close, centroid, evals, evecs


def build_gef_residuals(
    corners: GeFSet,
    surfaces: GeFSet,
    submap: GeFSubmap,
    pose: Pose,
    cfg: Optional[CorrespondenceConfig] = None,
) -> list:
    """Point-to-line and point-to-plane blocks against ``submap`` at ``pose``."""
    cfg = cfg or CorrespondenceConfig()
    blocks = []

    world = pose.apply(corners.points) if len(corners) else np.empty((0, 3))
    stats = _neighbor_stats(submap.corner_tree, world, submap.corners, cfg)
    if stats is not None:
        nn, close, centroid, evals, evecs = stats
        linear = evals[:, 2] > cfg.line_ratio * np.maximum(evals[:, 1], 1e-12)
        u = evecs[:, :, 2]
        diff = world - centroid
        dist = np.linalg.norm(diff - np.einsum("mi,mi->m", diff, u)[:, None] * u, axis=1)
        w = 1.0 - 0.9 * dist
        n_same = (submap.corners.class_id[nn] == corners.class_id[:, None]).sum(axis=1)
        w = semantic_weight(w, n_same)
        ok = close & linear & (w >= cfg.min_weight)
        blocks.append(PointToLineBlock(corners.points[ok], centroid[ok], u[ok], w[ok]))
    else:
        blocks.append(PointToLineBlock(np.empty((0, 3)), np.empty((0, 3)), np.empty((0, 3)), []))

    world = pose.apply(surfaces.points) if len(surfaces) else np.empty((0, 3))
    stats = _neighbor_stats(submap.surface_tree, world, submap.surfaces, cfg)
    if stats is not None:
        nn, close, centroid, evals, evecs = stats
        planar = evals[:, 0] < cfg.plane_ratio * evals[:, 1]
        n = evecs[:, :, 0]
        offset = np.einsum("mi,mi->m", n, centroid)
        dist = np.abs(np.einsum("mi,mi->m", n, world) - offset)
        w = 1.0 - 0.9 * dist
        n_same = (submap.surfaces.class_id[nn] == surfaces.class_id[:, None]).sum(axis=1)
        w = semantic_weight(w, n_same)
        ok = close & planar & (w >= cfg.min_weight)
        blocks.append(PointToPlaneBlock(surfaces.points[ok], n[ok], offset[ok], w[ok]))
    else:
        blocks.append(PointToPlaneBlock(np.empty((0, 3)), np.empty((0, 3)), [], []))
    return blocks


def register_frame(
    corners: GeFSet,
    surfaces: GeFSet,
    submap: GeFSubmap,
    init: Pose,
    cfg: Optional[CorrespondenceConfig] = None,
    outer_iterations: int = 3,
    extra_blocks=None,
    **lm_kwargs,
) -> SolveResult:
    """Alternate GeF correspondence search and LM solves; ``extra_blocks(pose)`` adds terms."""

    def build(pose):
        blocks = build_gef_residuals(corners, surfaces, submap, pose, cfg)
        if extra_blocks is not None:
            blocks += list(extra_blocks(pose))
        return blocks

    lm_kwargs.setdefault("divergence_threshold", 0.5)
    return solve_with_reassociation(build, init, outer_iterations=outer_iterations, **lm_kwargs)


def match_frame_to_frame(prev, cur, init: Pose, cfg=None, **kwargs) -> Pose:
    """Pose of ``cur`` in the frame of ``prev``; both are ``(corners, surfaces)``."""
    prev_map = GeFSubmap(*prev)
    result = register_frame(cur[0], cur[1], prev_map, init, cfg, **kwargs)
    return result.raise_for_status().pose
