"""Input validation helpers in the style of ``sklearn.utils.validation``."""

from __future__ import annotations

import numpy as np
from sklearn.utils import check_array

from .geometry import Pose
from .io import SemanticCloud


def check_points(points, allow_empty: bool = False, dims: int = 3) -> np.ndarray:
    """Return a finite float ``(N, dims)`` array, dropping extra columns."""
    arr = np.asarray(points, dtype=float)
    if arr.size == 0:
        if not allow_empty:
            raise ValueError("expected at least one point")
        return np.empty((0, dims))
    arr = check_array(arr, ensure_min_samples=0 if allow_empty else 1, ensure_all_finite=True)
    if arr.shape[1] < dims:
        raise ValueError(f"points need {dims} columns, got {arr.shape[1]}")
    return arr[:, :dims]


def check_semantic_cloud(sem) -> SemanticCloud:
    if not isinstance(sem, SemanticCloud):
        raise TypeError(f"expected SemanticCloud, got {type(sem).__name__}")
    return sem


def check_pose(pose, tol: float = 1e-6) -> Pose:
    if not isinstance(pose, Pose):
        pose = Pose.from_matrix(pose)
    if not pose.is_valid(tol):
        raise ValueError("rotation is not orthonormal with determinant +1")
    return pose


def check_probability(p, name: str = "p") -> float:
    p = float(p)
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"{name} must lie in [0, 1], got {p}")
    return p
