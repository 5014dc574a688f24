"""Extraction of parameterized semantic features (PSFs) from labeled clouds.

Road points are fitted per cell of a multi-resolution ground grid, building
points per cell of a 45-degree rotated grid with repeated plane extraction,
traffic signs per Euclidean cluster (again multi-plane) and poles per cluster
with a 3D line.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import PSFLOError
from .fitting import (
    euclidean_clusters,
    fit_line_ransac,
    fit_plane_ransac,
    min_area_rectangle,
    plane_basis,
)
from .geometry import BUILDING, POLE, PSF, PSF_LABELS, ROAD, SIGN, LineCPN, PlaneCP
from .io import SemanticCloud
from .validation import check_points

logger = logging.getLogger(__name__)

_LABEL_CODE = {label: i for i, label in enumerate(PSF_LABELS)}


@dataclass(frozen=True)
class GridSpec:
    """Ground grid: ``resolutions`` is a list of ``(range_limit, cell_size)``."""

    resolutions: tuple = ((30.0, 10.0), (60.0, 20.0), (np.inf, 40.0))
    rotation: float = 0.0

    def __post_init__(self):
        limits = [r for r, _ in self.resolutions]
        if any(b <= a for a, b in zip(limits, limits[1:])):
            raise ValueError("grid range limits must be strictly increasing")
        if any(size <= 0 for _, size in self.resolutions):
            raise ValueError("grid cell sizes must be positive")

    def cell_keys(self, points: np.ndarray) -> np.ndarray:
        """``(N, 3)`` integer keys: resolution level, cell column, cell row."""
        c, s = np.cos(self.rotation), np.sin(self.rotation)
        x = c * points[:, 0] + s * points[:, 1]
        y = -s * points[:, 0] + c * points[:, 1]
        rng = np.hypot(points[:, 0], points[:, 1])
        limits = np.array([r for r, _ in self.resolutions])
        sizes = np.array([sz for _, sz in self.resolutions])
        level = np.minimum(np.searchsorted(limits, rng, side="right"), len(limits) - 1)
        size = sizes[level]
        return np.column_stack([level, np.floor(x / size), np.floor(y / size)]).astype(np.int64)


@dataclass(frozen=True)
class PSFFrame:
    psfs: tuple = field(default_factory=tuple)
    frame_index: int = 0

    def __len__(self) -> int:
        return len(self.psfs)

    def __iter__(self):
        return iter(self.psfs)

    def by_label(self, label: str) -> list[PSF]:
        return [p for p in self.psfs if p.label == label]

    def counts(self) -> dict:
        return {label: len(self.by_label(label)) for label in PSF_LABELS}


def _group_by_keys(keys: np.ndarray) -> list[np.ndarray]:
    """Index groups of equal key rows, in lexicographic key order."""
    if len(keys) == 0:
        return []
    order = np.lexsort(keys.T[::-1])
    sk = keys[order]
    change = np.flatnonzero(np.any(sk[1:] != sk[:-1], axis=1)) + 1
    return np.split(order, change)


def pole_axis(points: np.ndarray, line: LineCPN, max_radius: float) -> LineCPN:
    """Shift a line fitted to the visible side of a pole onto its axis.

    The sensor (origin) only sees the near half of a cylinder, so the fitted line
    sits about ``pi r / 4`` in front of the axis. The radius comes from the spread
    of the points across the viewing direction, which is roughly uniform on
    ``[-r, r]``.
    """
    u = line.direction
    view = line.point - (line.point @ u) * u
    dist = np.linalg.norm(view)
    if dist < 1e-6:
        return line
    view /= dist
    lateral = (points - line.point) @ np.cross(u, view)
    radius = min(np.sqrt(3.0) * lateral.std(), max_radius)
    return LineCPN.through(line.point + 0.25 * np.pi * radius * view, u)


def planar_psf(points: np.ndarray, plane: PlaneCP, weight: float, label: str) -> PSF:
    """PSF whose outline is the minimum-area rectangle of ``points`` in the plane."""
    n, d = plane.normal, plane.distance
    e1, e2 = plane_basis(n)
    uv = np.column_stack([points @ e1, points @ e2])
    corners_uv = min_area_rectangle(uv)
    corners = d * n + np.outer(corners_uv[:, 0], e1) + np.outer(corners_uv[:, 1], e2)
    return PSF(plane, weight, label, corners.mean(axis=0), corners)


class PSFExtractor(TransformerMixin, BaseEstimator):
    """Turn semantic clouds into PSF-frames.

    Parameters
    ----------
    road_resolutions : tuple of (range_limit, cell_size)
        Multi-resolution road grid, fine near the sensor and coarse far away.
    building_cell_size : float
        Cell size of the building grid.
    building_rotation : float
        Rotation of the building grid in radians.
    plane_threshold, line_threshold : float
        RANSAC inlier distances in meters.
    ransac_iterations : int
    min_fit_points : int
        Minimum number of points handed to a single fit.
    cluster_tolerance : float
        Euclidean clustering distance for signs and poles.
    min_cluster_size : int
    n_stop : int
        Multi-plane extraction stops when fewer points remain.
    w_min : float
        Minimum inlier ratio for a fit to be accepted.
    pole_axis_correction : bool
        Move each pole line from the visible surface onto the estimated axis.
    random_state : int
        Base seed; every cell or cluster gets its own derived generator.
    """

    def __init__(
        self,
        road_resolutions=((30.0, 10.0), (60.0, 20.0), (np.inf, 40.0)),
        building_cell_size=20.0,
        building_rotation=np.pi / 4,
        plane_threshold=0.10,
        line_threshold=0.15,
        ransac_iterations=100,
        min_fit_points=10,
        cluster_tolerance=0.5,
        min_cluster_size=10,
        n_stop=20,
        w_min=0.3,
        pole_axis_correction=True,
        random_state=0,
    ):
        self.road_resolutions = road_resolutions
        self.building_cell_size = building_cell_size
        self.building_rotation = building_rotation
        self.plane_threshold = plane_threshold
        self.line_threshold = line_threshold
        self.ransac_iterations = ransac_iterations
        self.min_fit_points = min_fit_points
        self.cluster_tolerance = cluster_tolerance
        self.min_cluster_size = min_cluster_size
        self.n_stop = n_stop
        self.w_min = w_min
        self.pole_axis_correction = pole_axis_correction
        self.random_state = random_state

    def fit(self, X=None, y=None):
        self.road_grid_ = GridSpec(tuple(tuple(r) for r in self.road_resolutions), 0.0)
        self.building_grid_ = GridSpec(((np.inf, self.building_cell_size),), self.building_rotation)
        return self

    def transform(self, X: Iterable[SemanticCloud]) -> list[PSFFrame]:
        return [self.extract_frame(sem) for sem in X]

    # ------------------------------------------------------------------

    def _grids(self):
        if not hasattr(self, "road_grid_"):
            self.fit()
        return self.road_grid_, self.building_grid_

    def _rng(self, frame_index: int, label: str, ordinal: int):
        seed = [int(self.random_state or 0), int(frame_index), _LABEL_CODE[label], ordinal]
        return np.random.default_rng(seed)

    def _ransac_kwargs(self):
        return dict(
            iterations=self.ransac_iterations,
            min_points=self.min_fit_points,
            w_min=self.w_min,
        )

    def _multi_plane(self, points, label, frame_index, ordinal) -> list[PSF]:
        out = []
        remaining = np.arange(len(points))
        rng = self._rng(frame_index, label, ordinal)
        while len(remaining) >= max(self.n_stop, self.min_fit_points):
            try:
                plane, inliers, w = fit_plane_ransac(
                    points[remaining], threshold=self.plane_threshold, random_state=rng,
                    **self._ransac_kwargs(),
                )
            except PSFLOError:
                break
            out.append(planar_psf(points[remaining[inliers]], plane, w, label))
            remaining = np.delete(remaining, inliers)
        return out

    def extract_road(self, points, frame_index: int = 0) -> list[PSF]:
        pts = check_points(points, allow_empty=True)
        road_grid, _ = self._grids()
        out = []
        for ordinal, idx in enumerate(_group_by_keys(road_grid.cell_keys(pts))):
            if len(idx) < self.min_fit_points:
                continue
            cell = pts[idx]
            try:
                plane, inliers, w = fit_plane_ransac(
                    cell, threshold=self.plane_threshold,
                    random_state=self._rng(frame_index, ROAD, ordinal), **self._ransac_kwargs(),
                )
            except PSFLOError as exc:
                logger.debug("road cell %d skipped: %s", ordinal, exc)
                continue
            out.append(planar_psf(cell[inliers], plane, w, ROAD))
        return out

    def extract_building(self, points, frame_index: int = 0) -> list[PSF]:
        pts = check_points(points, allow_empty=True)
        _, building_grid = self._grids()
        out = []
        for ordinal, idx in enumerate(_group_by_keys(building_grid.cell_keys(pts))):
            out.extend(self._multi_plane(pts[idx], BUILDING, frame_index, ordinal))
        return out

    def extract_sign(self, points, frame_index: int = 0) -> list[PSF]:
        pts = check_points(points, allow_empty=True)
        out = []
        clusters = euclidean_clusters(pts, self.cluster_tolerance, self.min_cluster_size)
        for ordinal, idx in enumerate(clusters):
            out.extend(self._multi_plane(pts[idx], SIGN, frame_index, ordinal))
        return out

    def extract_pole(self, points, frame_index: int = 0) -> list[PSF]:
        pts = check_points(points, allow_empty=True)
        out = []
        clusters = euclidean_clusters(pts, self.cluster_tolerance, self.min_cluster_size)
        for ordinal, idx in enumerate(clusters):
            cluster = pts[idx]
            try:
                line, inliers, w = fit_line_ransac(
                    cluster, threshold=self.line_threshold,
                    random_state=self._rng(frame_index, POLE, ordinal), **self._ransac_kwargs(),
                )
            except PSFLOError as exc:
                logger.debug("pole cluster %d skipped: %s", ordinal, exc)
                continue
            if self.pole_axis_correction:
                line = pole_axis(cluster[inliers], line, self.line_threshold)
            s = (cluster[inliers] - line.point) @ line.direction
            ends = line.point + np.outer([s.min(), s.max()], line.direction)
            center = 0.5 * (cluster.min(axis=0) + cluster.max(axis=0))
            out.append(PSF(line, w, POLE, center, ends))
        return out

    def extract_frame(self, sem: SemanticCloud) -> PSFFrame:
        fi = sem.frame_index
        psfs = (
            self.extract_road(sem.points_of("road"), fi)
            + self.extract_building(sem.points_of("building"), fi)
            + self.extract_sign(sem.points_of("sign"), fi)
            + self.extract_pole(sem.points_of("pole"), fi)
        )
        return PSFFrame(tuple(psfs), fi)


def write_psf_outlines_csv(frames: Sequence[PSFFrame], path) -> None:
    """Dump PSF outlines as polylines: frame, psf, label, vertex, x, y, z."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "psf", "label", "vertex", "x", "y", "z"])
        for frame in frames:
            for i, psf in enumerate(frame.psfs):
                for j, (x, y, z) in enumerate(psf.outline):
                    writer.writerow([frame.frame_index, i, psf.label, j, f"{x:.4f}", f"{y:.4f}", f"{z:.4f}"])
