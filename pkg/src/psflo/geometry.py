"""Rigid transforms and the plane/line parameterizations used by PSFs.

Conventions
-----------
* A :class:`Pose` maps points from its local frame into the parent frame,
  ``x_parent = R @ x_local + t``.
* Planes are stored in closest-point (CP) form ``c = d * n`` where ``n`` is the
  unit normal pointing from the origin towards the plane and ``d > 0``.
* Lines are stored in CP-N form: the point of the line closest to the origin
  plus a unit direction whose z component is non-negative.
* Quaternions are Hamilton, scalar first ``(w, x, y, z)``.
* Pose perturbations ``delta = (rho, phi)`` act as ``R <- Exp(phi) R`` and
  ``t <- t + rho`` (see :func:`retract`). All analytic Jacobians in the
  package are taken with respect to this increment.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .exceptions import DegenerateLine, DegeneratePlane

EPS_PLANE = 1e-6
EPS_LINE = 1e-6

ROAD = "road"
BUILDING = "building"
SIGN = "sign"
POLE = "pole"
PLANAR_LABELS = (ROAD, BUILDING, SIGN)
PSF_LABELS = (ROAD, BUILDING, SIGN, POLE)


def _frozen(a, shape=None) -> np.ndarray:
    arr = np.array(a, dtype=float)
    if shape is not None:
        arr = arr.reshape(shape)
    arr.setflags(write=False)
    return arr


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(m: np.ndarray) -> np.ndarray:
    """Inverse of :func:`skew`, applied to the skew-symmetric part of ``m``."""
    a = 0.5 * (m - m.T)
    return np.array([a[2, 1], a[0, 2], a[1, 0]])


def so3_exp(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = float(np.linalg.norm(phi))
    k = skew(phi)
    if theta < 1e-8:
        return np.eye(3) + k + 0.5 * k @ k
    return (
        np.eye(3)
        + np.sin(theta) / theta * k
        + (1.0 - np.cos(theta)) / theta**2 * k @ k
    )


def so3_log(rot: np.ndarray) -> np.ndarray:
    cos_theta = np.clip(0.5 * (np.trace(rot) - 1.0), -1.0, 1.0)
    theta = float(np.arccos(cos_theta))
    if theta < 1e-8:
        return vee(rot)
    if np.pi - theta < 1e-6:
        # near pi the skew part vanishes; recover the axis from R + I
        m = 0.5 * (rot + np.eye(3))
        axis = m[:, int(np.argmax(np.diag(m)))]
        axis = axis / np.linalg.norm(axis)
        return axis * theta
    return theta / (2.0 * np.sin(theta)) * np.array(
        [rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]]
    )


@dataclass(frozen=True)
class Pose:
    """Rigid transform ``x -> R x + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", _frozen(self.rotation, (3, 3)))
        object.__setattr__(self, "translation", _frozen(self.translation, (3,)))

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=float)
        if m.shape not in ((4, 4), (3, 4)):
            raise ValueError(f"expected a 3x4 or 4x4 matrix, got {m.shape}")
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> "Pose":
        return cls(so3_exp(rotvec), translation)

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points) -> np.ndarray:
        """Transform an ``(..., 3)`` array of points."""
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def is_valid(self, tol: float = 1e-9) -> bool:
        r = self.rotation
        return bool(
            np.allclose(r @ r.T, np.eye(3), atol=tol)
            and abs(np.linalg.det(r) - 1.0) <= tol
        )


def _reorthonormalize(rot: np.ndarray) -> np.ndarray:
    # one Newton-Schulz polar step; squares the deviation from SO(3)
    return 0.5 * rot @ (3.0 * np.eye(3) - rot.T @ rot)


def compose(a: Pose, b: Pose) -> Pose:
    """Pose that applies ``b`` first, then ``a``."""
    return Pose(_reorthonormalize(a.rotation @ b.rotation), a.rotation @ b.translation + a.translation)


def invert(pose: Pose) -> Pose:
    rt = pose.rotation.T
    return Pose(rt, -rt @ pose.translation)


def retract(pose: Pose, delta) -> Pose:
    """Apply a 6-vector increment ``(rho, phi)`` to ``pose``."""
    delta = np.asarray(delta, dtype=float)
    return Pose(so3_exp(delta[3:]) @ pose.rotation, pose.translation + delta[:3])


def pose_difference(a: Pose, b: Pose) -> np.ndarray:
    """Increment ``delta`` such that ``retract(b, delta) == a``."""
    return np.concatenate(
        [a.translation - b.translation, so3_log(a.rotation @ b.rotation.T)]
    )


def rot_x(angle: float) -> Pose:
    c, s = np.cos(angle), np.sin(angle)
    return Pose(np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]))


def rot_y(angle: float) -> Pose:
    c, s = np.cos(angle), np.sin(angle)
    return Pose(np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]))


def rot_z(angle: float) -> Pose:
    c, s = np.cos(angle), np.sin(angle)
    return Pose(np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]))


def translation(x: float, y: float, z: float) -> Pose:
    return Pose(np.eye(3), (x, y, z))


# --------------------------------------------------------------------------
# quaternions


def quaternion_from_matrix(rot: np.ndarray) -> np.ndarray:
    """Shepperd's method; the result has a non-negative scalar part."""
    r = np.asarray(rot, dtype=float)
    tr = r[0, 0] + r[1, 1] + r[2, 2]
    k = int(np.argmax([tr, r[0, 0], r[1, 1], r[2, 2]]))
    if k == 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = np.array(
            [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
        )
    elif k == 1:
        s = 2.0 * np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2])
        q = np.array(
            [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
        )
    elif k == 2:
        s = 2.0 * np.sqrt(1.0 - r[0, 0] + r[1, 1] - r[2, 2])
        q = np.array(
            [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
        )
    else:
        s = 2.0 * np.sqrt(1.0 - r[0, 0] - r[1, 1] + r[2, 2])
        q = np.array(
            [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
        )
    q /= np.linalg.norm(q)
    return canonical_quaternion(q)


def canonical_quaternion(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    nz = np.flatnonzero(np.abs(q) > 1e-15)
    if nz.size and q[nz[0]] < 0.0:
        return -q
    return q


def matrix_from_quaternion(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quaternion_multiply(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


# --------------------------------------------------------------------------
# feature parameterizations


@dataclass(frozen=True)
class PlaneCP:
    """Plane in closest-point form ``c = d * n``."""

    coefficients: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "coefficients", _frozen(self.coefficients, (3,)))

    @classmethod
    def from_normal_distance(cls, normal, distance: float) -> "PlaneCP":
        normal = np.asarray(normal, dtype=float)
        return cls(distance * normal / np.linalg.norm(normal))

    @property
    def distance(self) -> float:
        return float(np.linalg.norm(self.coefficients))

    @property
    def normal(self) -> np.ndarray:
        d = self.distance
        if d <= EPS_PLANE:
            raise DegeneratePlane(f"plane at distance {d:.3g} from origin")
        return self.coefficients / d

    def signed_distance(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.normal - self.distance


def direction_sign(n) -> float:
    """+1 or -1 such that ``sign * n`` has z >= 0; ties broken by the first nonzero component."""
    n = np.asarray(n, dtype=float)
    tol = 1e-12 * np.linalg.norm(n)
    if abs(n[2]) > tol:
        return -1.0 if n[2] < 0.0 else 1.0
    nz = np.flatnonzero(np.abs(n) > tol)
    return -1.0 if nz.size and n[nz[0]] < 0.0 else 1.0


def canonical_direction(n) -> np.ndarray:
    """Unit direction with z >= 0; ties broken by the first nonzero component."""
    n = np.asarray(n, dtype=float)
    n = n / np.linalg.norm(n)
    return direction_sign(n) * n


@dataclass(frozen=True)
class LineCPN:
    """3D line as (closest point to origin, canonical unit direction)."""

    point: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "point", _frozen(self.point, (3,)))
        object.__setattr__(self, "direction", _frozen(self.direction, (3,)))

    @classmethod
    def through(cls, point, direction) -> "LineCPN":
        """Build from any point on the line and any (non-zero) direction."""
        n = canonical_direction(direction)
        p = np.asarray(point, dtype=float)
        return cls(p - (p @ n) * n, n)

    def distance_to(self, points) -> np.ndarray:
        d = np.asarray(points, dtype=float) - self.point
        return np.linalg.norm(d - np.outer(d @ self.direction, self.direction), axis=1)

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.point, self.direction])


@dataclass(frozen=True)
class LineCP:
    """3D line in CP form: distance to origin and a unit quaternion."""

    distance: float
    quaternion: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "distance", float(self.distance))
        object.__setattr__(self, "quaternion", _frozen(self.quaternion, (4,)))

    @property
    def vector(self) -> np.ndarray:
        return self.distance * self.quaternion


def transform_plane_cp(plane: PlaneCP, pose: Pose) -> PlaneCP:
    d = plane.distance
    if d <= EPS_PLANE:
        raise DegeneratePlane(f"plane at distance {d:.3g} from origin")
    n = plane.coefficients / d
    n_w = pose.rotation @ n
    d_w = d + (pose.rotation.T @ pose.translation) @ n
    if abs(d_w) <= EPS_PLANE:
        raise DegeneratePlane("transformed plane passes through the origin")
    # d_w < 0 flips the normal; d_w * n_w is still the closest point
    return PlaneCP(d_w * n_w)


def transform_line_cpn(line: LineCPN, pose: Pose) -> LineCPN:
    return LineCPN.through(pose.apply(line.point), pose.rotation @ line.direction)


def line_frame(line: LineCPN) -> tuple[float, np.ndarray]:
    """Distance and rotation matrix of the CP line form.

    The matrix columns are ``n0/|n0|``, the line direction and ``n1/|n1|``
    with ``n0 = p0 x p1``, ``n1 = n0 x n`` where ``p0, p1`` are the points one
    unit along the line on either side of the closest point.
    """
    p = np.asarray(line.point, dtype=float)
    n = np.asarray(line.direction, dtype=float)
    if np.linalg.norm(p) <= EPS_LINE:
        raise DegenerateLine("line passes through the origin")
    p0 = n + p
    p1 = -n + p
    n0 = np.cross(p0, p1)
    n1 = np.cross(n0, n)
    rot = np.column_stack([n0 / np.linalg.norm(n0), n, n1 / np.linalg.norm(n1)])
    if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-6):
        raise DegenerateLine("line frame is not orthonormal; closest point not orthogonal to direction")
    d = np.linalg.norm(n0) / np.linalg.norm(p0 - p1)
    return float(d), rot


def cpn_to_cp(line: LineCPN) -> LineCP:
    d, rot = line_frame(line)
    return LineCP(d, quaternion_from_matrix(rot))


# --------------------------------------------------------------------------
# parameterized semantic feature


Coefficients = Union[PlaneCP, LineCPN]


@dataclass(frozen=True)
class PSF:
    """Fitted plane or line with its weight, label, center and outline."""

    coefficients: Coefficients
    weight: float
    label: str
    center: np.ndarray
    outline: np.ndarray

    def __post_init__(self):
        if self.label not in PSF_LABELS:
            raise ValueError(f"unknown PSF label {self.label!r}")
        if (self.label == POLE) != isinstance(self.coefficients, LineCPN):
            raise ValueError("pole PSFs carry LineCPN coefficients, planar PSFs PlaneCP")
        object.__setattr__(self, "weight", float(self.weight))
        object.__setattr__(self, "center", _frozen(self.center, (3,)))
        object.__setattr__(self, "outline", _frozen(self.outline).reshape(-1, 3))

    @property
    def is_planar(self) -> bool:
        return self.label != POLE


def transform_psf(psf: PSF, pose: Pose) -> PSF:
    if psf.is_planar:
        coeffs = transform_plane_cp(psf.coefficients, pose)
    else:
        coeffs = transform_line_cpn(psf.coefficients, pose)
    return PSF(
        coefficients=coeffs,
        weight=psf.weight,
        label=psf.label,
        center=pose.apply(psf.center),
        outline=pose.apply(psf.outline),
    )
