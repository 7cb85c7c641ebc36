"""Rigid-body primitives shared by every stage of the tracker.

Conventions:
    - Lengths in meters, angles in radians.
    - ``RigidTransform`` T_AB maps points from frame B to frame A:
      p_A = R_AB @ p_B + t_AB.
    - Quaternions are stored (w, x, y, z), unit norm, canonicalized so that
      w >= 0 (first non-zero component positive when w == 0).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

ROTATION_TOL = 1e-6


class NotARotation(ValueError):
    """Matrix is not a proper rotation (orthogonal with det +1)."""


def _canonical(w: float, x: float, y: float, z: float) -> tuple[float, float, float, float]:
    n = math.sqrt(w * w + x * x + y * y + z * z)
    if n == 0.0 or not math.isfinite(n):
        raise ValueError("quaternion must be finite and non-zero")
    w, x, y, z = w / n, x / n, y / n, z / n
    for c in (w, x, y, z):
        if c > 0.0:
            break
        if c < 0.0:
            w, x, y, z = -w, -x, -y, -z
            break
    return w, x, y, z


@dataclass(frozen=True)
class Quaternion:
    """Unit quaternion (w, x, y, z). Normalized and canonicalized on construction."""

    w: float = 1.0
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    def __post_init__(self) -> None:
        w, x, y, z = _canonical(float(self.w), float(self.x), float(self.y), float(self.z))
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "z", z)

    @classmethod
    def identity(cls) -> Quaternion:
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, q) -> Quaternion:
        w, x, y, z = (float(v) for v in q)
        return cls(w, x, y, z)

    @classmethod
    def from_axis_angle(cls, axis, angle: float) -> Quaternion:
        a = np.asarray(axis, dtype=float)
        n = np.linalg.norm(a)
        if n == 0.0:
            return cls.identity()
        a = a / n
        s = math.sin(angle / 2.0)
        return cls(math.cos(angle / 2.0), a[0] * s, a[1] * s, a[2] * s)

    @classmethod
    def from_rotvec(cls, rotvec) -> Quaternion:
        v = np.asarray(rotvec, dtype=float)
        angle = float(np.linalg.norm(v))
        if angle < 1e-12:
            # first-order expansion keeps tiny rotations exact to machine precision
            return cls(1.0, v[0] / 2.0, v[1] / 2.0, v[2] / 2.0)
        return cls.from_axis_angle(v, angle)

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z])

    def conjugate(self) -> Quaternion:
        return Quaternion(self.w, -self.x, -self.y, -self.z)

    def __mul__(self, other: Quaternion) -> Quaternion:
        a, b = self, other
        return Quaternion(
            a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        )

    def to_rotvec(self) -> np.ndarray:
        v = np.array([self.x, self.y, self.z])
        s = float(np.linalg.norm(v))
        if s < 1e-12:
            return 2.0 * v
        angle = 2.0 * math.atan2(s, self.w)
        return v / s * angle

    def matrix(self) -> np.ndarray:
        return quaternion_to_rotation(self)


def quaternion_to_rotation(q: Quaternion) -> np.ndarray:
    w, x, y, z = q.w, q.x, q.y, q.z
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def check_rotation(R: np.ndarray, tol: float = ROTATION_TOL) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise NotARotation(f"expected finite 3x3 matrix, got shape {R.shape}")
    if abs(np.linalg.det(R) - 1.0) > tol:
        raise NotARotation(f"det(R) = {np.linalg.det(R):.9f}")
    if np.max(np.abs(R.T @ R - np.eye(3))) > tol:
        raise NotARotation("R is not orthogonal")
    return R


def rotation_to_quaternion(R: np.ndarray) -> Quaternion:
    """Shepperd's method: branch on the largest of trace and diagonal entries."""
    R = check_rotation(R)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    candidates = (tr, R[0, 0], R[1, 1], R[2, 2])
    k = int(np.argmax(candidates))
    if k == 0:
        s = 2.0 * math.sqrt(1.0 + tr)
        return Quaternion(
            0.25 * s,
            (R[2, 1] - R[1, 2]) / s,
            (R[0, 2] - R[2, 0]) / s,
            (R[1, 0] - R[0, 1]) / s,
        )
    if k == 1:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        return Quaternion(
            (R[2, 1] - R[1, 2]) / s,
            0.25 * s,
            (R[0, 1] + R[1, 0]) / s,
            (R[0, 2] + R[2, 0]) / s,
        )
    if k == 2:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        return Quaternion(
            (R[0, 2] - R[2, 0]) / s,
            (R[0, 1] + R[1, 0]) / s,
            0.25 * s,
            (R[1, 2] + R[2, 1]) / s,
        )
    s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
    return Quaternion(
        (R[1, 0] - R[0, 1]) / s,
        (R[0, 2] + R[2, 0]) / s,
        (R[1, 2] + R[2, 1]) / s,
        0.25 * s,
    )


def quaternion_dot(a: Quaternion, b: Quaternion) -> float:
    return a.w * b.w + a.x * b.x + a.y * b.y + a.z * b.z


def angular_distance(a: Quaternion, b: Quaternion) -> float:
    """Rotation angle between ``a`` and ``b`` in [0, pi].

    Equal to 2*acos(|<a, b>|), evaluated with atan2 so that small angles keep
    full precision.
    """
    qa, qb = a.as_array(), b.as_array()
    if np.dot(qa, qb) < 0.0:
        qb = -qb
    return 4.0 * math.atan2(float(np.linalg.norm(qa - qb)), float(np.linalg.norm(qa + qb)))


def _frozen(v) -> np.ndarray:
    arr = np.array(v, dtype=float).reshape(3)
    if not np.all(np.isfinite(arr)):
        raise ValueError("translation must be finite")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation + translation, T(p) = R p + t."""

    rotation: Quaternion = field(default_factory=Quaternion.identity)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        object.__setattr__(self, "translation", _frozen(self.translation))
        object.__setattr__(self, "_R", quaternion_to_rotation(self.rotation))

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls()

    @classmethod
    def from_matrix(cls, M: np.ndarray) -> RigidTransform:
        M = np.asarray(M, dtype=float)
        return cls(rotation_to_quaternion(M[:3, :3]), M[:3, 3])

    @classmethod
    def from_rt(cls, R: np.ndarray, t) -> RigidTransform:
        return cls(rotation_to_quaternion(R), t)

    @classmethod
    def from_pose7(cls, values) -> RigidTransform:
        """Build from the 7-number form px py pz qw qx qy qz."""
        v = [float(x) for x in values]
        if len(v) != 7:
            raise ValueError(f"expected 7 numbers, got {len(v)}")
        return cls(Quaternion(*v[3:]), v[:3])

    def to_pose7(self) -> list[float]:
        q = self.rotation
        return [*map(float, self.translation), q.w, q.x, q.y, q.z]

    @property
    def R(self) -> np.ndarray:
        return self._R  # type: ignore[attr-defined]

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.translation
        return M

    def apply(self, p) -> np.ndarray:
        """Transform a point (3,) or an array of points (N, 3)."""
        p = np.asarray(p, dtype=float)
        return p @ self.R.T + self.translation

    def __matmul__(self, other: RigidTransform) -> RigidTransform:
        return compose(self, other)

    def inverse(self) -> RigidTransform:
        return invert(self)

    def allclose(self, other: RigidTransform, atol: float = 1e-9) -> bool:
        return (
            angular_distance(self.rotation, other.rotation) <= atol
            and float(np.max(np.abs(self.translation - other.translation))) <= atol
        )


def apply(T: RigidTransform, p) -> np.ndarray:
    return T.apply(p)


def compose(A: RigidTransform, B: RigidTransform) -> RigidTransform:
    """A after B: apply(compose(A, B), p) == apply(A, apply(B, p))."""
    return RigidTransform(A.rotation * B.rotation, A.R @ B.translation + A.translation)


def invert(T: RigidTransform) -> RigidTransform:
    q_inv = T.rotation.conjugate()
    return RigidTransform(q_inv, -(T.R.T @ T.translation))


def rotation_about_axis(axis, angle: float) -> np.ndarray:
    return quaternion_to_rotation(Quaternion.from_axis_angle(axis, angle))


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> RigidTransform:
    """World<-camera transform for a camera at ``eye`` looking at ``target``.

    Camera axes follow the image convention: x right, y down, z forward.
    """
    eye = np.asarray(eye, dtype=float)
    z = np.asarray(target, dtype=float) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=float))
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, [1.0, 0.0, 0.0])
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return RigidTransform.from_rt(np.column_stack([x, y, z]), eye)
