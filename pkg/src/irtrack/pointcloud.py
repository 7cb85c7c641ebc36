"""Environment clouds from depth frames, cloud filters, and robot referencing.

The referencing step poses a robot model cloud from its joint states and
registers it into the filtered environment cloud with a seeded ICP,
giving the transform from the robot base into the tracker's world frame.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .alignment import AlignmentProblem, AlignmentResult, Condition, solve
from .frames import CameraIntrinsics, DepthFrame
from .geometry import Quaternion, RigidTransform

VOXEL_LEAF = 0.01
OUTLIER_RADIUS = 0.05
OUTLIER_MIN_NEIGHBORS = 9
MLS_RADIUS = 0.03
MLS_MIN_NEIGHBORS = 5
MLS_MAX_NEIGHBORS = 64
PLANE_THRESHOLD = 0.01
RANSAC_ITERATIONS = 500
MIN_PLANE_FRACTION = 0.1


class CloudFormatError(ValueError):
    pass


class NoPlane(RuntimeError):
    pass


class JointCountMismatch(ValueError):
    pass


class Diverged(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray  # (n, 3) meters

    def __post_init__(self) -> None:
        p = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(p)):
            raise ValueError("point cloud has non-finite coordinates")
        object.__setattr__(self, "points", p)

    def __len__(self) -> int:
        return len(self.points)

    def transformed(self, T: RigidTransform) -> PointCloud:
        return PointCloud(T.apply(self.points)) if len(self) else self

    def __add__(self, other: PointCloud) -> PointCloud:
        return PointCloud(np.concatenate([self.points, other.points]))

    def write_ply(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("ply\nformat ascii 1.0\n")
            fh.write(f"element vertex {len(self)}\n")
            fh.write("property float x\nproperty float y\nproperty float z\nend_header\n")
            np.savetxt(fh, self.points, fmt="%.9g")

    @classmethod
    def read_ply(cls, path) -> PointCloud:
        """ASCII PLY; the first three vertex properties are taken as x y z."""
        lines = Path(path).read_text().splitlines()
        if not lines or lines[0].strip() != "ply":
            raise CloudFormatError(f"{path}: not a PLY file")
        n = None
        n_props = 0
        in_vertex = False
        for i, line in enumerate(lines):
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "format" and tok[1:2] != ["ascii"]:
                raise CloudFormatError(f"{path}: only ASCII PLY is supported")
            if tok[0] == "element":
                in_vertex = tok[1] == "vertex"
                if in_vertex:
                    n = int(tok[2])
            elif tok[0] == "property" and in_vertex:
                n_props += 1
            elif tok[0] == "end_header":
                body = lines[i + 1 : i + 1 + (n or 0)]
                break
        else:
            raise CloudFormatError(f"{path}: missing end_header")
        if n is None or n_props < 3 or len(body) < n:
            raise CloudFormatError(f"{path}: bad vertex element")
        try:
            pts = np.array([[float(v) for v in row.split()[:3]] for row in body]).reshape(-1, 3)
        except ValueError as exc:
            raise CloudFormatError(f"{path}: {exc}") from exc
        return cls(pts)


@dataclass(frozen=True, eq=False)
class Plane:
    normal: np.ndarray
    offset: float  # plane = {p : <n, p> = offset}

    def __post_init__(self) -> None:
        n = np.asarray(self.normal, dtype=float)
        norm = np.linalg.norm(n)
        if not norm > 0:
            raise ValueError("plane normal must be non-zero")
        object.__setattr__(self, "normal", n / norm)
        object.__setattr__(self, "offset", float(self.offset) / norm)

    def signed_distance(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.normal - self.offset

    def angle_to(self, other: Plane) -> float:
        """Angle between the plane normals, ignoring orientation (radians)."""
        c = abs(float(self.normal @ other.normal))
        return math.acos(min(c, 1.0))

    @classmethod
    def fit(cls, points) -> Plane:
        """Total least-squares plane (PCA)."""
        p = np.asarray(points, dtype=float)
        c = p.mean(axis=0)
        _, _, Vt = np.linalg.svd(p - c, full_matrices=False)
        n = Vt[-1]
        return cls(n, float(n @ c))


# -- cloud generation ---------------------------------------------------------


def frame_points(frame: DepthFrame, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Camera-frame points of every valid (> 0) depth pixel."""
    v, u = np.nonzero(frame.depths > 0)
    Z = frame.depths[v, u].astype(float)
    return np.column_stack(
        [Z * (u - intrinsics.cx) / intrinsics.f, Z * (v - intrinsics.cy) / intrinsics.f, Z]
    )


def generate_cloud(frames: list[DepthFrame], intrinsics: CameraIntrinsics) -> PointCloud:
    """Back-project every frame and place it with its own camera pose.

    Frames are not registered against each other; the device poses are
    trusted as they are.
    """
    parts = [f.camera_pose.apply(frame_points(f, intrinsics)) for f in frames]
    return PointCloud(np.concatenate(parts) if parts else np.zeros((0, 3)))


# -- filters --------------------------------------------------------------------


def voxel_downsample(cloud: PointCloud, leaf: float = VOXEL_LEAF) -> PointCloud:
    """One point per occupied voxel: the centroid of the points inside it."""
    if not leaf > 0:
        raise ValueError("leaf must be positive")
    if len(cloud) == 0:
        return cloud
    keys = np.floor(cloud.points / leaf).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.ravel()
    sums = np.zeros((len(counts), 3))
    np.add.at(sums, inverse, cloud.points)
    return PointCloud(sums / counts[:, None])


def radius_outlier_removal(
    cloud: PointCloud, radius: float = OUTLIER_RADIUS, min_neighbors: int = OUTLIER_MIN_NEIGHBORS
) -> PointCloud:
    """Keep points with at least ``min_neighbors`` other points within ``radius``."""
    if len(cloud) == 0:
        return cloud
    tree = cKDTree(cloud.points)
    n = tree.query_ball_point(cloud.points, radius, return_length=True) - 1
    return PointCloud(cloud.points[n >= min_neighbors])


def _neighborhoods(points: np.ndarray, radius: float, k: int):
    tree = cKDTree(points)
    k = min(k, len(points))
    dist, idx = tree.query(points, k=k, distance_upper_bound=radius)
    dist = dist.reshape(len(points), k)
    idx = idx.reshape(len(points), k)
    valid = np.isfinite(dist)
    idx = np.where(valid, idx, 0)
    return dist, idx, valid


def mls_smooth(
    cloud: PointCloud,
    radius: float = MLS_RADIUS,
    min_neighbors: int = MLS_MIN_NEIGHBORS,
    max_neighbors: int = MLS_MAX_NEIGHBORS,
) -> PointCloud:
    """Project each point onto a locally fitted quadric height field.

    Neighbors within ``radius`` (at most ``max_neighbors`` nearest) are
    weighted by exp(-d^2 / (radius/3)^2). A weighted PCA gives the local
    frame; a weighted least-squares fit of h = c0 + c1 a + c2 b + c3 a^2 +
    c4 ab + c5 b^2 gives the surface, and the point moves to the surface
    above its own (a, b). Points with fewer than ``min_neighbors`` other
    points in range are passed through.
    """
    if not radius > 0:
        raise ValueError("radius must be positive")
    P = cloud.points
    n = len(P)
    if n == 0:
        return cloud
    dist, idx, valid = _neighborhoods(P, radius, max_neighbors + 1)
    counts = valid.sum(axis=1) - 1  # exclude the point itself
    active = np.nonzero(counts >= min_neighbors)[0]
    out = P.copy()
    h = radius / 3.0
    for chunk in np.array_split(active, max(1, len(active) // 4096 + 1)):
        if len(chunk) == 0:
            continue
        nb = P[idx[chunk]]  # (m, k, 3)
        ok = valid[chunk]
        w = np.where(ok, np.exp(-((np.where(ok, dist[chunk], 0.0) / h) ** 2)), 0.0)
        wsum = w.sum(axis=1)
        c = (w[..., None] * nb).sum(axis=1) / wsum[:, None]
        # work in units of the radius to keep the normal equations conditioned
        d = (nb - c[:, None, :]) / radius
        wd = d * w[..., None]
        cov = wd.transpose(0, 2, 1) @ d
        _, vecs = np.linalg.eigh(cov)  # ascending: smallest spread is the normal
        nrm, e2, e1 = vecs[..., 0], vecs[..., 1], vecs[..., 2]
        a = (d @ e1[..., None])[..., 0]
        b = (d @ e2[..., None])[..., 0]
        z = (d @ nrm[..., None])[..., 0]
        A = np.stack([np.ones_like(a), a, b, a * a, a * b, b * b], axis=-1)
        wA = (A * w[..., None]).transpose(0, 2, 1)
        M = wA @ A
        r = wA @ z[..., None]
        # a tiny ridge keeps degenerate (e.g. collinear) neighborhoods solvable
        M += 1e-12 * np.eye(6)
        coef = np.linalg.solve(M, r)[..., 0]
        p = (P[chunk] - c) / radius
        pa = np.einsum("mi,mi->m", p, e1)
        pb = np.einsum("mi,mi->m", p, e2)
        basis = np.stack([np.ones_like(pa), pa, pb, pa * pa, pa * pb, pb * pb], axis=-1)
        ph = np.einsum("mi,mi->m", basis, coef)
        out[chunk] = c + radius * (pa[:, None] * e1 + pb[:, None] * e2 + ph[:, None] * nrm)
    return PointCloud(out)


def ransac_plane(
    cloud: PointCloud,
    dist_threshold: float = PLANE_THRESHOLD,
    iterations: int = RANSAC_ITERATIONS,
    seed: int = 0,
    min_fraction: float = MIN_PLANE_FRACTION,
) -> tuple[Plane, np.ndarray]:
    """Dominant plane by inlier count over random 3-point hypotheses.

    The winning hypothesis is refined by a least-squares fit to its
    inliers, and the inlier set recomputed against the refined plane.
    """
    P = cloud.points
    n = len(P)
    if n < 3:
        raise ValueError("need at least 3 points")
    rng = np.random.default_rng(seed)
    best_count, best_plane = -1, None
    for start in range(0, iterations, 64):
        m = min(64, iterations - start)
        tri = np.stack([rng.choice(n, 3, replace=False) for _ in range(m)])
        a, b, c = P[tri[:, 0]], P[tri[:, 1]], P[tri[:, 2]]
        normals = np.cross(b - a, c - a)
        norms = np.linalg.norm(normals, axis=1)
        good = norms > 1e-12
        if not good.any():
            continue
        normals = normals[good] / norms[good, None]
        offsets = np.einsum("ij,ij->i", normals, a[good])
        counts = (np.abs(P @ normals.T - offsets) <= dist_threshold).sum(axis=0)
        j = int(np.argmax(counts))
        if counts[j] > best_count:
            best_count, best_plane = int(counts[j]), Plane(normals[j], offsets[j])
    if best_plane is None or best_count < min_fraction * n:
        raise NoPlane(f"best plane holds {max(best_count, 0)} of {n} points")
    inliers = np.nonzero(np.abs(best_plane.signed_distance(P)) <= dist_threshold)[0]
    refined = Plane.fit(P[inliers])
    refined_in = np.nonzero(np.abs(refined.signed_distance(P)) <= dist_threshold)[0]
    if len(refined_in) >= len(inliers):
        return refined, refined_in
    return best_plane, inliers


def snap_to_plane(cloud: PointCloud, plane: Plane, inliers) -> PointCloud:
    """Orthogonally project the inlier points onto the plane."""
    out = cloud.points.copy()
    idx = np.asarray(inliers, dtype=np.int64)
    if len(idx):
        out[idx] -= plane.signed_distance(out[idx])[:, None] * plane.normal
    return PointCloud(out)


# -- kinematic chain ------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RevoluteJoint:
    axis: np.ndarray
    origin: np.ndarray

    def __post_init__(self) -> None:
        axis = np.asarray(self.axis, dtype=float)
        if abs(np.linalg.norm(axis) - 1.0) > 1e-6:
            raise ValueError("joint axis must be a unit vector")
        object.__setattr__(self, "axis", axis)
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=float))

    def motion(self, angle: float) -> RigidTransform:
        """Rotation by ``angle`` about the axis line through ``origin``."""
        q = Quaternion.from_axis_angle(self.axis, angle)
        return RigidTransform(q, self.origin - q.matrix() @ self.origin)


@dataclass(frozen=True, eq=False)
class Link:
    points: np.ndarray  # home-pose samples in the base frame
    joint: RevoluteJoint | None = None  # joint that moves this link; None for the base


@dataclass(eq=False)
class KinematicChain:
    """Serial revolute chain described at its home pose.

    Link point samples, joint axes and joint origins are all given in the
    base frame with every joint at zero. Joint ``i`` moves link ``i + 1``
    and everything after it.
    """

    links: list[Link]
    joint_state: list[float] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.links:
            raise ValueError("chain needs at least one link")
        if self.links[0].joint is not None:
            raise ValueError("the base link cannot carry a joint")
        if any(l.joint is None for l in self.links[1:]):
            raise ValueError("every link after the base needs a joint")

    @property
    def n_joints(self) -> int:
        return len(self.links) - 1

    def with_state(self, joint_state) -> KinematicChain:
        return KinematicChain(self.links, [float(v) for v in joint_state])

    def to_dict(self) -> dict:
        links = []
        for link in self.links:
            d = {"points": link.points.tolist()}
            if link.joint is not None:
                d["joint"] = {"type": "revolute", "axis": link.joint.axis.tolist(),
                              "origin": link.joint.origin.tolist()}
            links.append(d)
        return {"links": links, "joint_state": list(self.joint_state)}

    @classmethod
    def from_dict(cls, d: dict) -> KinematicChain:
        links = []
        for ld in d["links"]:
            jd = ld.get("joint")
            joint = None
            if jd is not None:
                if jd.get("type", "revolute") != "revolute":
                    raise ValueError(f"unsupported joint type {jd['type']!r}")
                joint = RevoluteJoint(jd["axis"], jd.get("origin", (0.0, 0.0, 0.0)))
            links.append(Link(np.asarray(ld["points"], dtype=float).reshape(-1, 3), joint))
        return cls(links, [float(v) for v in d.get("joint_state", [])])

    @classmethod
    def load(cls, path) -> KinematicChain:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))


def link_transforms(chain: KinematicChain) -> list[RigidTransform]:
    """Base <- link motion of every link at the chain's joint state."""
    if len(chain.joint_state) != chain.n_joints:
        raise JointCountMismatch(
            f"{len(chain.joint_state)} joint values for {chain.n_joints} joints"
        )
    T = RigidTransform.identity()
    out = [T]
    for link, angle in zip(chain.links[1:], chain.joint_state):
        T = T @ link.joint.motion(angle)
        out.append(T)
    return out


def pose_chain(chain: KinematicChain) -> PointCloud:
    """Model cloud of the chain at its joint state, in the base frame."""
    parts = [T.apply(link.points) for T, link in zip(link_transforms(chain), chain.links)
             if len(link.points)]
    return PointCloud(np.concatenate(parts) if parts else np.zeros((0, 3)))


# -- registration ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class IcpResult(AlignmentResult):
    iterations: int = 0
    rms_history: tuple[float, ...] = ()
    n_pairs: int = 0


def icp_register(
    model: PointCloud,
    scene: PointCloud,
    seed: RigidTransform,
    max_iterations: int = 50,
    tolerance: float = 1e-6,
    rejection: float = 3.0,
    divergence_window: int = 5,
) -> IcpResult:
    """Point-to-point ICP from a caller-supplied initial guess.

    Each iteration pairs every transformed model point with its nearest
    scene point, drops pairs longer than ``rejection`` times the median
    pair distance, and re-solves the rigid alignment on the rest. Stops
    when the rms improves by less than ``tolerance`` (meters). Returns the
    scene <- model transform with the lowest rms seen.
    """
    if len(model) == 0 or len(scene) == 0:
        raise ValueError("ICP needs two non-empty clouds")
    tree = cKDTree(scene.points)
    M = model.points
    T = seed
    best_T, best_rms, best_pairs = seed, math.inf, 0
    history: list[float] = []
    prev = math.inf
    rising = 0
    it = 0
    for it in range(1, max_iterations + 1):
        P = T.apply(M)
        d, idx = tree.query(P)
        keep = d <= rejection * np.median(d)
        if keep.sum() < 3:
            raise Diverged("fewer than 3 pairs survived rejection")
        step = solve(AlignmentProblem(P[keep], scene.points[idx[keep]]))
        T = step.transform @ T
        rms = step.rms_error
        history.append(rms)
        if rms < best_rms:
            best_T, best_rms, best_pairs = T, rms, int(keep.sum())
        rising = rising + 1 if rms > prev else 0
        if rising >= divergence_window:
            raise Diverged(f"rms rose for {rising} consecutive iterations")
        if abs(prev - rms) < tolerance:
            break
        prev = rms
    R = best_T.R
    return IcpResult(best_T, best_rms, Condition.WELL_POSED, R, best_T.translation.copy(),
                     it, tuple(history), best_pairs)


# -- referencing chain ----------------------------------------------------------


@dataclass(frozen=True)
class FilterParams:
    voxel_leaf: float = VOXEL_LEAF
    outlier_radius: float = OUTLIER_RADIUS
    outlier_min_neighbors: int = OUTLIER_MIN_NEIGHBORS
    mls_radius: float = MLS_RADIUS
    plane_threshold: float = PLANE_THRESHOLD
    ransac_iterations: int = RANSAC_ITERATIONS
    seed: int = 0


def filter_scene(cloud: PointCloud, params: FilterParams = FilterParams()) -> PointCloud:
    """Voxel grid, radius outlier removal, MLS smoothing, then dominant-plane snapping."""
    cloud = voxel_downsample(cloud, params.voxel_leaf)
    cloud = radius_outlier_removal(cloud, params.outlier_radius, params.outlier_min_neighbors)
    cloud = mls_smooth(cloud, params.mls_radius)
    try:
        plane, inliers = ransac_plane(cloud, params.plane_threshold, params.ransac_iterations,
                                      params.seed)
    except (NoPlane, ValueError):
        return cloud
    return snap_to_plane(cloud, plane, inliers)


def reference_robot(
    scene: PointCloud,
    chain: KinematicChain,
    seed: RigidTransform,
    params: FilterParams = FilterParams(),
    prefiltered: bool = False,
) -> IcpResult:
    """World <- robot base transform by registering the posed model into the scene."""
    if not prefiltered:
        scene = filter_scene(scene, params)
    model = voxel_downsample(pose_chain(chain), params.voxel_leaf)
    return icp_register(model, scene, seed)
