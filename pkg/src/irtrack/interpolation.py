"""Pose prediction between camera frames: linear position, SLERP orientation."""

from __future__ import annotations

import enum
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .geometry import Quaternion, RigidTransform

DEFAULT_MAX_EXTRAPOLATION_US = 100_000
NLERP_ANGLE = 1e-6


class TrackingStale(RuntimeError):
    """The query is too far past the last measurement to extrapolate."""


class PoseSource(enum.Enum):
    MEASURED = "measured"
    PREDICTED = "predicted"


@dataclass(frozen=True, eq=False)
class TimedPose:
    timestamp: int  # microseconds
    pose: RigidTransform
    source: PoseSource = PoseSource.MEASURED


def lerp_position(p0, p1, alpha: float) -> np.ndarray:
    p0 = np.asarray(p0, dtype=float)
    return p0 + alpha * (np.asarray(p1, dtype=float) - p0)


def slerp(q0: Quaternion, q1: Quaternion, alpha: float) -> Quaternion:
    """Constant angular velocity interpolation along the shorter arc."""
    a = q0.as_array()
    b = q1.as_array()
    if np.dot(a, b) < 0.0:
        b = -b
    # angle between the two 4-vectors; atan2 form is exact near 0
    theta = 2.0 * math.atan2(float(np.linalg.norm(a - b)), float(np.linalg.norm(a + b)))
    if theta < NLERP_ANGLE:
        out = a + alpha * (b - a)
    else:
        s = math.sin(theta)
        out = (math.sin((1.0 - alpha) * theta) / s) * a + (math.sin(alpha * theta) / s) * b
    return Quaternion.from_array(out)


def interpolate_pose(a: RigidTransform, b: RigidTransform, alpha: float) -> RigidTransform:
    return RigidTransform(
        slerp(a.rotation, b.rotation, alpha), lerp_position(a.translation, b.translation, alpha)
    )


@dataclass
class PredictionState:
    max_extrapolation: int = DEFAULT_MAX_EXTRAPOLATION_US
    last_two: deque = field(default_factory=lambda: deque(maxlen=2))

    def update(self, measured: TimedPose) -> None:
        if self.last_two and measured.timestamp <= self.last_two[-1].timestamp:
            raise ValueError("measured poses must arrive in increasing timestamp order")
        self.last_two.append(measured)

    @property
    def ready(self) -> bool:
        return len(self.last_two) == 2

    @property
    def latest(self) -> TimedPose | None:
        return self.last_two[-1] if self.last_two else None


def predict(state: PredictionState, t_query: int) -> TimedPose:
    if not state.ready:
        raise ValueError("prediction needs two measured poses")
    m0, m1 = state.last_two
    if t_query < m0.timestamp:
        raise ValueError("query precedes the older measurement")
    if t_query == m0.timestamp:
        return TimedPose(t_query, m0.pose, PoseSource.PREDICTED)
    if t_query - m1.timestamp > state.max_extrapolation:
        raise TrackingStale(
            f"{(t_query - m1.timestamp) / 1000:.1f} ms past the last measurement"
        )
    if t_query == m1.timestamp:
        return TimedPose(t_query, m1.pose, PoseSource.PREDICTED)
    alpha = (t_query - m0.timestamp) / (m1.timestamp - m0.timestamp)
    return TimedPose(t_query, interpolate_pose(m0.pose, m1.pose, alpha), PoseSource.PREDICTED)


def sample_trajectory(knots: list[TimedPose], t: int) -> RigidTransform:
    """Piecewise pose spline through ``knots`` (held constant outside them)."""
    if not knots:
        raise ValueError("empty trajectory")
    if t <= knots[0].timestamp:
        return knots[0].pose
    if t >= knots[-1].timestamp:
        return knots[-1].pose
    lo, hi = 0, len(knots) - 1
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if knots[mid].timestamp <= t:
            lo = mid
        else:
            hi = mid
    k0, k1 = knots[lo], knots[hi]
    if t == k0.timestamp:
        return k0.pose
    alpha = (t - k0.timestamp) / (k1.timestamp - k0.timestamp)
    return interpolate_pose(k0.pose, k1.pose, alpha)
