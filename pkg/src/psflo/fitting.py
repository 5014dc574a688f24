"""Robust model fitting and point-set utilities shared by the extractors."""

from __future__ import annotations

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import ConvexHull, cKDTree
from scipy.spatial import QhullError

from .exceptions import DegenerateLine, DegeneratePlane, NoModel, TooFewPoints
from .geometry import EPS_LINE, EPS_PLANE, LineCPN, PlaneCP

# RANSAC hypotheses are scored on at most this many points; the final
# inlier set is always computed on the full input.
_MAX_SCORE_POINTS = 2000


def _as_rng(random_state):
    if isinstance(random_state, np.random.Generator):
        return random_state
    return np.random.default_rng(random_state)


def _scoring_subset(points, rng):
    if len(points) <= _MAX_SCORE_POINTS:
        return points
    return points[rng.choice(len(points), _MAX_SCORE_POINTS, replace=False)]


def _msac_best(sq_residuals: np.ndarray, sq_threshold: float) -> int:
    """Hypothesis (column) with the lowest truncated quadratic cost."""
    return int(np.argmin(np.minimum(sq_residuals, sq_threshold).sum(axis=0)))


def fit_plane_ransac(
    points,
    threshold: float = 0.10,
    iterations: int = 100,
    min_points: int = 10,
    w_min: float = 0.3,
    random_state=None,
):
    """RANSAC (MSAC scoring) plane fit followed by a least-squares refit on the inliers.

    Returns
    -------
    plane : PlaneCP
    inliers : ndarray of int
        Indices into ``points``.
    weight : float
        Inlier ratio ``len(inliers) / len(points)``.
    """
    pts = np.asarray(points, dtype=float)
    if len(pts) < max(min_points, 3):
        raise TooFewPoints(f"{len(pts)} points, need {max(min_points, 3)}")
    rng = _as_rng(random_state)
    sub = _scoring_subset(pts, rng)

    idx = rng.integers(0, len(pts), size=(iterations, 3))
    p0, p1, p2 = pts[idx[:, 0]], pts[idx[:, 1]], pts[idx[:, 2]]
    normals = np.cross(p1 - p0, p2 - p0)
    norms = np.linalg.norm(normals, axis=1)
    ok = norms > 1e-9
    if not np.any(ok):
        raise NoModel("all RANSAC samples were degenerate")
    normals = normals[ok] / norms[ok, None]
    offsets = np.einsum("ij,ij->i", normals, p0[ok])
    best = _msac_best(np.abs(sub @ normals.T - offsets) ** 2, threshold**2)
    inliers = np.flatnonzero(np.abs(pts @ normals[best] - offsets[best]) < threshold)

    for _ in range(2):
        if len(inliers) < 3:
            break
        centroid = pts[inliers].mean(axis=0)
        normal = np.linalg.svd(pts[inliers] - centroid, full_matrices=False)[2][-1]
        offset = normal @ centroid
        refit = np.flatnonzero(np.abs(pts @ normal - offset) < threshold)
        if len(refit) < len(inliers):
            break
        inliers = refit
        normals[best], offsets[best] = normal, offset
    normal, offset = normals[best], offsets[best]

    weight = len(inliers) / len(pts)
    if weight < w_min or len(inliers) < 3:
        raise NoModel(f"best inlier ratio {weight:.3f} below {w_min}")
    if abs(offset) <= EPS_PLANE:
        raise DegeneratePlane("fitted plane passes through the origin")
    if offset < 0:
        normal, offset = -normal, -offset
    return PlaneCP(offset * normal), inliers, weight


def fit_line_ransac(
    points,
    threshold: float = 0.15,
    iterations: int = 100,
    min_points: int = 10,
    w_min: float = 0.3,
    random_state=None,
):
    """RANSAC 3D line fit with a principal-axis refit on the inliers."""
    pts = np.asarray(points, dtype=float)
    if len(pts) < max(min_points, 2):
        raise TooFewPoints(f"{len(pts)} points, need {max(min_points, 2)}")
    rng = _as_rng(random_state)
    sub = _scoring_subset(pts, rng)

    idx = rng.integers(0, len(pts), size=(iterations, 2))
    a, b = pts[idx[:, 0]], pts[idx[:, 1]]
    u = b - a
    norms = np.linalg.norm(u, axis=1)
    ok = norms > 1e-9
    if not np.any(ok):
        raise NoModel("all RANSAC samples were degenerate")
    a, u = a[ok], u[ok] / norms[ok, None]

    def sq_dist(p, anchors, dirs):
        along = p @ dirs.T - np.einsum("ij,ij->i", anchors, dirs)
        rel = (p**2).sum(1)[:, None] - 2 * p @ anchors.T + (anchors**2).sum(1)
        return rel - along**2

    best = _msac_best(sq_dist(sub, a, u), threshold**2)
    anchor, direction = a[best], u[best]
    inliers = np.flatnonzero(sq_dist(pts, anchor[None], direction[None])[:, 0] < threshold**2)

    for _ in range(2):
        if len(inliers) < 2:
            break
        centroid = pts[inliers].mean(axis=0)
        new_dir = np.linalg.svd(pts[inliers] - centroid, full_matrices=False)[2][0]
        refit = np.flatnonzero(sq_dist(pts, centroid[None], new_dir[None])[:, 0] < threshold**2)
        if len(refit) < len(inliers):
            break
        inliers, anchor, direction = refit, centroid, new_dir

    weight = len(inliers) / len(pts)
    if weight < w_min or len(inliers) < 2:
        raise NoModel(f"best inlier ratio {weight:.3f} below {w_min}")
    line = LineCPN.through(anchor, direction)
    if np.linalg.norm(line.point) <= EPS_LINE:
        raise DegenerateLine("fitted line passes through the origin")
    return line, inliers, weight


def euclidean_clusters(points, tolerance: float = 0.5, min_size: int = 10) -> list[np.ndarray]:
    """Connected components under a distance threshold, ordered by first index."""
    pts = np.asarray(points, dtype=float)
    if len(pts) == 0:
        return []
    pairs = cKDTree(pts).query_pairs(tolerance, output_type="ndarray")
    graph = coo_matrix(
        (np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(len(pts), len(pts))
    )
    _, labels = connected_components(graph, directed=False)
    order = np.argsort(labels, kind="stable")
    groups = np.split(order, np.cumsum(np.bincount(labels))[:-1])
    out = [g for g in groups if len(g) >= min_size]
    out.sort(key=lambda c: c[0])
    return out


def plane_basis(normal) -> tuple[np.ndarray, np.ndarray]:
    n = np.asarray(normal, dtype=float)
    helper = np.eye(3)[int(np.argmin(np.abs(n)))]
    e1 = np.cross(n, helper)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(n, e1)


def min_area_rectangle(xy) -> np.ndarray:
    """Corners (4, 2) of the minimum-area enclosing rectangle (rotating calipers)."""
    xy = np.asarray(xy, dtype=float)
    try:
        hull = xy[ConvexHull(xy).vertices]
    except (QhullError, ValueError):
        # collinear or too few points: zero-width rectangle along the principal axis
        center = xy.mean(axis=0)
        axis = np.linalg.svd(xy - center, full_matrices=False)[2][0] if len(xy) > 1 else np.array([1.0, 0.0])
        s = (xy - center) @ axis
        lo, hi = center + s.min() * axis, center + s.max() * axis
        return np.array([lo, hi, hi, lo])
    edges = np.roll(hull, -1, axis=0) - hull
    angles = np.unique(np.mod(np.arctan2(edges[:, 1], edges[:, 0]), np.pi / 2))
    c, s = np.cos(angles), np.sin(angles)
    rots = np.stack([np.stack([c, s], -1), np.stack([-s, c], -1)], axis=1)  # (A, 2, 2)
    r = np.einsum("aij,nj->ani", rots, hull)
    lo, hi = r.min(axis=1), r.max(axis=1)
    best = int(np.argmin(np.prod(hi - lo, axis=1)))
    (x0, y0), (x1, y1) = lo[best], hi[best]
    corners = np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]])
    return corners @ rots[best]


def voxel_downsample(points, voxel: float, *extra) -> tuple:
    """Keep the first point falling in each voxel; ``extra`` arrays are filtered alike."""
    pts = np.asarray(points, dtype=float)
    if len(pts) == 0:
        return (pts, *extra) if extra else pts
    first = np.sort(np.unique(voxel_keys(pts, voxel), return_index=True)[1])
    if extra:
        return (pts[first], *(np.asarray(e)[first] for e in extra))
    return pts[first]


def voxel_keys(points, voxel: float) -> np.ndarray:
    """One int64 key per point identifying its voxel."""
    k = np.floor(np.asarray(points, dtype=float) / voxel).astype(np.int64)
    k -= k.min(axis=0)
    dims = k.max(axis=0) + 1
    return (k[:, 0] * dims[1] + k[:, 1]) * dims[2] + k[:, 2]
