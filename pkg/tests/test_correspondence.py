from __future__ import annotations

import math
import warnings

import numpy as np
import pytest
from helpers import brute_force_match, random_rig, random_transform

from irtrack.correspondence import (
    AMBIGUITY_TOL,
    AmbiguousAssignment,
    MarkerModel,
    MatchConfig,
    NoConsistentAssignment,
    TooFewPoints,
    distance_matrix,
    match,
)
from irtrack.sim.scenario import default_rig

RIG = default_rig()


class TestDistanceMatrix:
    def test_two_points(self):
        assert distance_matrix([(0, 0, 0), (1, 0, 0)]).tolist() == [[0, 1], [1, 0]]

    def test_right_triangle(self):
        D = distance_matrix([(0, 0, 0), (1, 0, 0), (0, 1, 0)])
        assert sorted(D[np.triu_indices(3, 1)]) == pytest.approx([1, 1, math.sqrt(2)])
        assert np.array_equal(D, D.T) and not np.diag(D).any()

    def test_rigid_invariance(self, rng):
        pts = rng.normal(size=(6, 3))
        T = random_transform(rng)
        assert np.allclose(distance_matrix(T.apply(pts)), distance_matrix(pts), atol=1e-9)

    def test_too_few(self):
        with pytest.raises(TooFewPoints):
            distance_matrix([(0, 0, 0)])


class TestMarkerModel:
    def test_symmetric_rig_warns(self):
        with pytest.warns(UserWarning, match="ambiguous"):
            MarkerModel([(0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0)])

    def test_default_rig_is_distinct(self):
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            MarkerModel(RIG.points)

    def test_rejects_two_points(self):
        with pytest.raises(ValueError):
            MarkerModel([(0, 0, 0), (1, 0, 0)])


class TestMatch:
    def test_self_match_is_identity(self):
        D = RIG.distance_matrix
        corr = match(D, D)
        assert corr.pairs == tuple((i, i) for i in range(len(RIG)))
        assert corr.residual == 0.0

    def test_recovers_permutation(self, rng):
        for _ in range(50):
            n = int(rng.integers(3, 8))
            pts = random_rig(rng, n)
            perm = rng.permutation(n)
            dets = random_transform(rng).apply(pts[perm])
            try:
                corr = match(distance_matrix(dets), distance_matrix(pts), MatchConfig(delta=0.001))
            except AmbiguousAssignment:
                continue  # a random rig can have near-equal distances
            assert len(corr) == n
            assert all(perm[p] == i for p, i in corr.pairs)

    def test_displaced_detection_unmatched(self, rng):
        delta = 0.005
        pts = RIG.points
        dets = pts.copy()
        dets[2] += 3 * delta * np.array([1.0, 0.0, 0.0])  # away from every other marker
        corr = match(distance_matrix(dets), RIG.distance_matrix, MatchConfig(delta=delta))
        assert len(corr) == len(pts) - 1
        assert 2 not in corr.detection_indices
        assert all(p == i for p, i in corr.pairs)

    def test_spurious_detection_ignored(self, rng):
        dets = np.vstack([RIG.points, [[0.3, 0.3, 0.0]]])
        corr = match(distance_matrix(dets), RIG.distance_matrix)
        assert corr.pairs == tuple((i, i) for i in range(len(RIG)))

    def test_too_few_detections(self):
        with pytest.raises(NoConsistentAssignment):
            match(distance_matrix(RIG.points[:2]), RIG.distance_matrix)

    def test_nothing_consistent(self, rng):
        dets = np.array([[0, 0, 0], [1, 0, 0], [0, 2, 0], [3, 3, 3.0]])
        with pytest.raises(NoConsistentAssignment):
            match(distance_matrix(dets), RIG.distance_matrix)

    def test_symmetric_rig_is_ambiguous(self):
        with pytest.warns(UserWarning):
            square = MarkerModel([(0, 0, 0), (0.1, 0, 0), (0.1, 0.1, 0), (0, 0.1, 0)])
        with pytest.raises(AmbiguousAssignment):
            match(square.distance_matrix, square.distance_matrix)

    def test_reordering_relabels(self, rng):
        dets = RIG.points + rng.normal(scale=0.0005, size=RIG.points.shape)
        perm = rng.permutation(len(dets))
        a = match(distance_matrix(dets), RIG.distance_matrix)
        b = match(distance_matrix(dets[perm]), RIG.distance_matrix)
        assert sorted((int(perm[p]), i) for p, i in b.pairs) == sorted(a.pairs)
        assert b.residual == pytest.approx(a.residual, abs=1e-12)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            MatchConfig(delta=0)
        with pytest.raises(ValueError):
            MatchConfig(min_matched=2)

    def test_agrees_with_brute_force(self, rng):
        for _ in range(150):
            n_model = int(rng.integers(3, 7))
            model = random_rig(rng, n_model)
            keep = rng.permutation(n_model)[: int(rng.integers(2, n_model + 1))]
            dets = random_transform(rng).apply(model[keep]) + rng.normal(scale=0.001, size=(len(keep), 3))
            extra = int(rng.integers(0, 7 - len(keep) + 1))
            dets = np.vstack([dets, rng.uniform(-0.1, 0.1, (extra, 3))])
            check_against_oracle(distance_matrix(dets) if len(dets) > 1 else np.zeros((1, 1)),
                                 distance_matrix(model), 0.005)


def check_against_oracle(D_R, D_M, delta):
    count, residuals = brute_force_match(D_R, D_M, delta)
    try:
        corr = match(D_R, D_M, MatchConfig(delta=delta))
    except AmbiguousAssignment:
        assert count >= 3 and len(residuals) > 1
        assert residuals[1] - residuals[0] <= AMBIGUITY_TOL
        return
    except NoConsistentAssignment:
        assert count < 3
        return
    assert len(corr) == count
    assert len(residuals) == 1 or residuals[1] - residuals[0] > AMBIGUITY_TOL
    assert corr.residual == pytest.approx(residuals[0], abs=1e-12)
