"""Shared test helpers: random poses, an independent homogeneous-matrix builder, strategies."""

from __future__ import annotations

import math

import numpy as np
from hypothesis import strategies as st

from irtrack.geometry import Quaternion, RigidTransform


def random_quaternion(rng: np.random.Generator) -> Quaternion:
    return Quaternion.from_array(rng.normal(size=4))


def random_transform(rng: np.random.Generator, scale: float = 1.0) -> RigidTransform:
    return RigidTransform(random_quaternion(rng), rng.normal(scale=scale, size=3))


def homogeneous(T: RigidTransform) -> np.ndarray:
    """4x4 matrix built independently from the quaternion components."""
    w, x, y, z = T.rotation.as_array()
    R = np.array([
        [w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), w * w - x * x - y * y + z * z],
    ])
    M = np.eye(4)
    M[:3, :3] = R
    M[:3, 3] = T.translation
    return M


finite = st.floats(-10.0, 10.0, allow_nan=False, allow_infinity=False)
vec3 = st.tuples(finite, finite, finite)
quaternions = (
    st.tuples(finite, finite, finite, finite)
    .filter(lambda q: math.sqrt(sum(v * v for v in q)) > 1e-3)
    .map(lambda q: Quaternion(*q))
)
transforms = st.builds(RigidTransform, quaternions, vec3)


def brute_force_match(D_R: np.ndarray, D_M: np.ndarray, delta: float) -> tuple[int, list[float]]:
    """Every consistent injective partial assignment, enumerated without bounds.

    Returns the maximal cardinality and the sorted residuals of all
    assignments of that cardinality.
    """
    n, m = len(D_R), len(D_M)
    best = [0, []]

    def visit(p, assign, used):
        if p == n:
            res = sum(abs(D_R[a, b] - D_M[i, j]) for k, (a, i) in enumerate(assign)
                      for b, j in assign[k + 1:])
            if len(assign) > best[0]:
                best[0], best[1] = len(assign), [res]
            elif len(assign) == best[0]:
                best[1].append(res)
            return
        for i in range(m):
            if i in used:
                continue
            if all(abs(D_R[p, q] - D_M[i, j]) < delta for q, j in assign):
                visit(p + 1, assign + [(p, i)], used | {i})
        visit(p + 1, assign, used)

    visit(0, [], frozenset())
    return best[0], sorted(best[1])


def random_rig(rng: np.random.Generator, n: int, extent: float = 0.15) -> np.ndarray:
    return rng.uniform(-extent / 2, extent / 2, (n, 3))
