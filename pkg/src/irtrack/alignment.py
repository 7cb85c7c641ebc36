"""Closed-form least-squares rigid alignment of corresponded point sets.

Given sources x_i and targets y_i, find the rotation R and translation t
minimising (1/n) sum |R x_i + t - y_i|^2. With centroids x_bar, y_bar and
the correlation matrix C = (1/n) sum (y_i - y_bar)(x_i - x_bar)^T = U W V^T,
the optimum is

    R = U diag(1, 1, det(U V^T)) V^T,    t = y_bar - R x_bar.

The middle factor turns the improper solution U V^T (a reflection, which
noisy or planar data can produce) into the best proper rotation.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .geometry import RigidTransform, rotation_to_quaternion

COLLINEAR_RATIO = 1e-8
NEAR_DEGENERATE_SV = 1e-9


class DegenerateConfiguration(ValueError):
    """Source points are (nearly) collinear; rotation about the line is unobservable."""


class Condition(enum.Enum):
    WELL_POSED = "well_posed"
    NEAR_DEGENERATE = "near_degenerate"


@dataclass(frozen=True, eq=False)
class AlignmentProblem:
    source: np.ndarray  # x_i
    target: np.ndarray  # y_i

    def __post_init__(self) -> None:
        x = np.asarray(self.source, dtype=float)
        y = np.asarray(self.target, dtype=float)
        if x.shape != y.shape or x.ndim != 2 or x.shape[1] != 3:
            raise ValueError(f"source {x.shape} and target {y.shape} must both be (n, 3)")
        object.__setattr__(self, "source", x)
        object.__setattr__(self, "target", y)

    @property
    def n(self) -> int:
        return len(self.source)


@dataclass(frozen=True, eq=False)
class AlignmentResult:
    transform: RigidTransform
    rms_error: float
    condition: Condition
    R: np.ndarray
    t: np.ndarray


def centroids(problem: AlignmentProblem) -> tuple[np.ndarray, np.ndarray]:
    if problem.n < 1:
        raise ValueError("empty problem")
    return problem.source.mean(axis=0), problem.target.mean(axis=0)


def correlation_matrix(problem: AlignmentProblem) -> np.ndarray:
    x_bar, y_bar = centroids(problem)
    xc = problem.source - x_bar
    yc = problem.target - y_bar
    return yc.T @ xc / problem.n


def _check_spread(xc: np.ndarray) -> None:
    sv = np.linalg.svd(xc.T @ xc / len(xc), compute_uv=False)
    if sv[0] <= 0.0 or sv[1] / sv[0] < COLLINEAR_RATIO:
        raise DegenerateConfiguration("source points are collinear or coincident")


def solve(problem: AlignmentProblem) -> AlignmentResult:
    if problem.n < 3:
        raise ValueError(f"need at least 3 point pairs, got {problem.n}")
    x, y = problem.source, problem.target
    x_bar, y_bar = centroids(problem)
    xc = x - x_bar
    _check_spread(xc)
    C = (y - y_bar).T @ xc / problem.n
    U, W, Vt = np.linalg.svd(C)
    d = 1.0 if np.linalg.det(U @ Vt) > 0.0 else -1.0
    R = U @ np.diag([1.0, 1.0, d]) @ Vt
    t = y_bar - R @ x_bar
    resid = x @ R.T + t - y
    rms = float(np.sqrt((resid * resid).sum() / problem.n))
    cond = (
        Condition.NEAR_DEGENERATE
        if W[1] < NEAR_DEGENERATE_SV and W[2] < NEAR_DEGENERATE_SV
        else Condition.WELL_POSED
    )
    return AlignmentResult(RigidTransform(rotation_to_quaternion(R), t), rms, cond, R, t)


def solve_points(source, target) -> AlignmentResult:
    return solve(AlignmentProblem(source, target))


def align_pose_samples(estimated, truth, body_points=None) -> RigidTransform:
    """Transform mapping the estimate's world frame onto the truth frame.

    ``estimated`` and ``truth`` are timestamp-paired TimedPose lists. Each
    pose contributes the world positions of ``body_points`` (device-frame
    points, default: the device origin); a device held still yields one
    repeated position, so callers with static data pass several points on
    the device, e.g. its marker layout.
    """
    if len(estimated) != len(truth):
        raise ValueError("estimated and truth must have equal length")
    for e, g in zip(estimated, truth):
        if e.timestamp != g.timestamp:
            raise ValueError(f"unpaired timestamps {e.timestamp} != {g.timestamp}")
    body = np.zeros((1, 3)) if body_points is None else np.asarray(body_points, dtype=float)
    src = np.concatenate([e.pose.apply(body) for e in estimated])
    dst = np.concatenate([g.pose.apply(body) for g in truth])
    return solve(AlignmentProblem(src, dst)).transform
