from __future__ import annotations

import numpy as np
import pytest

from irtrack.backproject import (
    NonPositiveDepth,
    NoValidDepth,
    backproject,
    build_detection_set,
    depth_lookup,
)
from irtrack.frames import Blob, CameraIntrinsics, DepthFrame, default_intrinsics, find_markers, threshold
from irtrack.sim.render import Renderer
from irtrack.sim.scenario import ScenarioConfig

INTR = CameraIntrinsics(f=500.0, cx=200.0, cy=150.0, width=400, height=300)


def depth_with_patch(patch: np.ndarray, r: int = 50, c: int = 60) -> DepthFrame:
    d = np.full((100, 120), 0.5)
    d[r - 1 : r + 2, c - 1 : c + 2] = patch
    return DepthFrame(d)


class TestDepthLookup:
    def test_uniform(self):
        assert depth_lookup(depth_with_patch(np.full((3, 3), 1.0)), 60, 50) == 1.0

    def test_median_rejects_speckle(self):
        patch = np.array([0.9] * 4 + [1.0] * 4 + [50.0]).reshape(3, 3)
        assert depth_lookup(depth_with_patch(patch), 60, 50) == pytest.approx(0.95, abs=1e-12)

    def test_invalid_entries_ignored(self):
        patch = np.array([0, 0, 0, 0.8, 0.9, 1.0, 0, 0, 0], dtype=float).reshape(3, 3)
        assert depth_lookup(depth_with_patch(patch), 60, 50) == pytest.approx(0.9)

    def test_all_invalid(self):
        with pytest.raises(NoValidDepth):
            depth_lookup(depth_with_patch(np.zeros((3, 3))), 60, 50)

    def test_single_pixel_mode(self):
        patch = np.full((3, 3), 0.7)
        patch[1, 1] = 0.71
        assert depth_lookup(depth_with_patch(patch), 60, 50, median=False) == 0.71

    def test_frame_edge(self):
        d = np.full((10, 10), 0.4)
        assert depth_lookup(d, 0, 0) == 0.4

    def test_outside(self):
        with pytest.raises(NoValidDepth):
            depth_lookup(np.ones((10, 10)), 50, 5)


class TestBackproject:
    def test_principal_point(self):
        assert np.allclose(backproject(Blob(200.0, 150.0, 4), 1.0, INTR), (0, 0, 1))

    def test_hand_example(self):
        p = backproject(Blob(300.0, 100.0, 4), 2.0, INTR)
        assert np.allclose(p, (0.4, -0.2, 2.0), atol=1e-15)

    def test_linear_in_depth(self, rng):
        for _ in range(20):
            b = Blob(*rng.uniform(0, 300, 2), 4)
            z = rng.uniform(0.2, 3.0)
            assert np.allclose(backproject(b, 2 * z, INTR), 2 * backproject(b, z, INTR))

    @pytest.mark.parametrize("z", [0.0, -1.0])
    def test_non_positive_depth(self, z):
        with pytest.raises(NonPositiveDepth):
            backproject(Blob(1.0, 1.0, 4), z, INTR)


class TestDetectionSet:
    def blobs(self):
        return [Blob(20.0 + 15 * i, 30.0, 4) for i in range(5)]

    def test_all_valid(self):
        d = DepthFrame(np.full((60, 100), 0.6), timestamp=7)
        ds = build_detection_set(self.blobs(), d, INTR)
        assert len(ds) == 5 and ds.source_timestamp == 7 and ds.blob_indices == (0, 1, 2, 3, 4)

    def test_one_invalid(self):
        depths = np.full((60, 100), 0.6)
        depths[29:32, 49:52] = 0.0  # around blob 2 at (50, 30)
        ds = build_detection_set(self.blobs(), DepthFrame(depths), INTR)
        assert len(ds) == 4 and 2 not in ds.blob_indices

    def test_rendered_rig_within_2mm(self):
        config = ScenarioConfig()
        _, refl, depth, truth = next(iter(Renderer(config, range(1))))
        intr = default_intrinsics()
        blobs = find_markers(threshold(refl.pixels)).blobs
        ds = build_detection_set(blobs, depth, intr)
        assert len(ds) == len(config.marker_rig)
        err = [np.min(np.linalg.norm(truth.markers_camera - p, axis=1)) for p in ds.points]
        assert np.sqrt(np.mean(np.square(err))) < 0.002

    def test_round_trip_quantization_bound(self):
        """Lateral error per axis stays under half a pixel at the marker's depth."""
        config = ScenarioConfig()
        intr = default_intrinsics()
        for k, refl, depth, truth in Renderer(config, range(0, 60, 6)):
            ds = build_detection_set(find_markers(threshold(refl.pixels)).blobs, depth, intr)
            for p in ds.points:
                j = np.argmin(np.linalg.norm(truth.markers_camera - p, axis=1))
                q = truth.markers_camera[j]
                assert np.all(np.abs(p[:2] - q[:2] * p[2] / q[2]) < 0.5 / intr.f * q[2])
