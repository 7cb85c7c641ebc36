"""A synthetic robot cell for exercising the referencing chain.

The scene is sampled directly from surfaces (floor, a 6-joint arm, boxes on
the floor) with Gaussian range noise, plus loose clutter points; it stands
in for a cloud fused from many depth frames.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..geometry import Quaternion, RigidTransform
from ..pointcloud import KinematicChain, Link, PointCloud, RevoluteJoint, pose_chain

SURFACE_DENSITY = 4000.0  # samples per m^2
ARM_STATE = (0.7, -0.5, 1.1, 0.4, 0.9, -0.6)


def _orthonormal(axis: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    helper = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(axis, helper)
    u /= np.linalg.norm(u)
    return u, np.cross(axis, u)


def sample_cylinder(rng, p0, p1, radius: float, density: float = SURFACE_DENSITY) -> np.ndarray:
    """Surface samples of a closed cylinder from p0 to p1."""
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    axis = p1 - p0
    length = float(np.linalg.norm(axis))
    axis /= length
    u, v = _orthonormal(axis)
    n_side = max(8, int(density * 2 * math.pi * radius * length))
    n_cap = max(4, int(density * math.pi * radius**2))
    th = rng.uniform(0, 2 * math.pi, n_side)
    s = rng.uniform(0, length, n_side)
    side = p0 + s[:, None] * axis + radius * (np.cos(th)[:, None] * u + np.sin(th)[:, None] * v)
    caps = []
    for end in (p0, p1):
        r = radius * np.sqrt(rng.uniform(0, 1, n_cap))
        th = rng.uniform(0, 2 * math.pi, n_cap)
        caps.append(end + r[:, None] * (np.cos(th)[:, None] * u + np.sin(th)[:, None] * v))
    return np.concatenate([side, *caps])


def sample_box(rng, center, size, yaw: float = 0.0, density: float = SURFACE_DENSITY) -> np.ndarray:
    """Surface samples of an upright box rotated by ``yaw`` about z."""
    size = np.asarray(size, float)
    faces = []
    for axis in range(3):
        others = [a for a in range(3) if a != axis]
        area = size[others[0]] * size[others[1]]
        for sign in (-0.5, 0.5):
            n = max(4, int(density * area))
            p = rng.uniform(-0.5, 0.5, (n, 3)) * size
            p[:, axis] = sign * size[axis]
            faces.append(p)
    pts = np.concatenate(faces)
    c, s = math.cos(yaw), math.sin(yaw)
    Rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return pts @ Rz.T + np.asarray(center, float)


def synthetic_arm(seed: int = 0, joint_state=ARM_STATE, density: float = SURFACE_DENSITY) -> KinematicChain:
    """Six revolute joints: base yaw, shoulder, elbow, three wrist axes."""
    rng = np.random.default_rng(seed)
    z, y, x = (0.0, 0.0, 1.0), (0.0, 1.0, 0.0), (1.0, 0.0, 0.0)
    cyl = lambda p0, p1, r: sample_cylinder(rng, p0, p1, r, density)  # noqa: E731
    links = [
        Link(cyl((0, 0, 0), (0, 0, 0.15), 0.12)),
        Link(np.concatenate([cyl((0, 0, 0.15), (0, 0, 0.32), 0.09),
                             cyl((0, -0.1, 0.32), (0, 0.1, 0.32), 0.08)]),
             RevoluteJoint(z, (0, 0, 0))),
        Link(np.concatenate([cyl((0, 0.1, 0.32), (0.42, 0.1, 0.32), 0.06),
                             cyl((0.42, -0.08, 0.32), (0.42, 0.14, 0.32), 0.065)]),
             RevoluteJoint(y, (0, 0, 0.32))),
        Link(cyl((0.42, 0.0, 0.32), (0.78, 0.0, 0.32), 0.045), RevoluteJoint(y, (0.42, 0, 0.32))),
        Link(cyl((0.78, 0.0, 0.32), (0.86, 0.0, 0.32), 0.04), RevoluteJoint(x, (0.78, 0, 0.32))),
        Link(cyl((0.86, -0.05, 0.32), (0.86, 0.05, 0.32), 0.035), RevoluteJoint(y, (0.86, 0, 0.32))),
        Link(np.concatenate([cyl((0.89, 0.0, 0.32), (0.93, 0.0, 0.32), 0.035),
                             sample_box(rng, (0.97, 0.0, 0.35), (0.06, 0.02, 0.05), 0.0, density),
                             sample_box(rng, (0.97, 0.0, 0.29), (0.06, 0.02, 0.03), 0.0, density)]),
             RevoluteJoint(x, (0.86, 0, 0.32))),
    ]
    return KinematicChain(links, list(joint_state))


@dataclass(frozen=True, eq=False)
class RobotCell:
    scene: PointCloud  # world frame
    chain: KinematicChain
    base: RigidTransform  # world <- robot base (the planted truth)
    clutter_mask: np.ndarray  # True for clutter points of ``scene``


def random_base(rng) -> RigidTransform:
    yaw = rng.uniform(-math.pi, math.pi)
    return RigidTransform(Quaternion.from_axis_angle((0, 0, 1), yaw),
                          (rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), 0.0))


def seed_offset(rng, max_translation: float = 0.2, max_angle: float = math.radians(20)) -> RigidTransform:
    """Random pose error with bounded translation and rotation magnitudes."""
    d = rng.normal(size=3)
    a = rng.normal(size=3)
    q = Quaternion.from_axis_angle(a / np.linalg.norm(a), rng.uniform(0, max_angle))
    return RigidTransform(q, d / np.linalg.norm(d) * rng.uniform(0, max_translation))


def simulated_cell(
    seed: int = 0,
    clutter_fraction: float = 0.3,
    noise_sigma: float = 0.003,
    floor_size: float = 2.0,
    density: float = SURFACE_DENSITY,
) -> RobotCell:
    """Robot on a floor with boxes and loose points making up ``clutter_fraction`` of the scene."""
    rng = np.random.default_rng(seed)
    chain = synthetic_arm(seed, density=density)
    base = random_base(rng)
    robot = base.apply(pose_chain(chain).points)
    n_floor = int(density * floor_size**2)
    floor = np.column_stack([rng.uniform(-floor_size / 2, floor_size / 2, (n_floor, 2)),
                             np.zeros(n_floor)])
    n_structure = len(robot) + n_floor
    n_clutter = int(round(clutter_fraction / (1.0 - clutter_fraction) * n_structure))
    boxes = []
    n_boxes = 0
    while n_boxes < n_clutter // 2:
        r, th = rng.uniform(0.6, 0.9 * floor_size / 2), rng.uniform(0, 2 * math.pi)
        size = rng.uniform(0.08, 0.3, 3)
        center = base.translation + (r * math.cos(th), r * math.sin(th), 0.0)
        center[2] = size[2] / 2
        box = sample_box(rng, center, size, rng.uniform(0, math.pi), density)
        box = box[box[:, 2] > 0.0]  # the bottom face is hidden by the floor
        boxes.append(box)
        n_boxes += len(box)
    loose = rng.uniform((-floor_size / 2, -floor_size / 2, 0.0),
                        (floor_size / 2, floor_size / 2, 1.2), (n_clutter - n_boxes, 3))
    clutter = np.concatenate([*boxes, loose]) if boxes else loose
    pts = np.concatenate([robot, floor, clutter])
    pts = pts + rng.normal(0.0, noise_sigma, pts.shape)
    mask = np.zeros(len(pts), dtype=bool)
    mask[n_structure:] = True
    return RobotCell(PointCloud(pts), chain, base, mask)
