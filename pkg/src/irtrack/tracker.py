"""The per-frame computing job: frame pair in, rig pose out."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import frames
from .alignment import AlignmentProblem, DegenerateConfiguration, solve
from .backproject import build_detection_set
from .correspondence import (
    AmbiguousAssignment,
    MarkerModel,
    MatchConfig,
    NoConsistentAssignment,
    distance_matrix,
    match,
)
from .frames import CameraIntrinsics, DepthFrame, ReflectivityFrame, RegionOfInterest
from .geometry import RigidTransform
from .interpolation import PoseSource, TimedPose

STAGES = ("undistort", "threshold", "blobs", "backproject", "match", "solve")


@dataclass(frozen=True)
class TrackerConfig:
    threshold: int = frames.THRESHOLD
    min_blob_area: int = frames.MIN_BLOB_AREA
    median_depth: bool = True
    use_roi: bool = True
    delta: float | None = None  # falls back to the model's delta, then 5 mm
    min_matched: int = 3


@dataclass
class FrameResult:
    frame_index: int
    timestamp: int
    pose: TimedPose | None = None  # world <- rig
    rig_from_camera: RigidTransform | None = None
    blobs: list = field(default_factory=list)
    n_detections: int = 0
    rms: float = float("nan")
    error: str | None = None
    latency: dict = field(default_factory=dict)  # seconds per stage

    @property
    def tracked(self) -> bool:
        return self.pose is not None


class MarkerTracker:
    """Stateful only through the ROI history of the frames it has seen."""

    def __init__(
        self,
        model: MarkerModel,
        intrinsics: CameraIntrinsics,
        config: TrackerConfig | None = None,
    ):
        self.model = model
        self.intrinsics = intrinsics
        self.config = config or TrackerConfig()
        delta = self.config.delta or model.delta or MatchConfig().delta
        self.match_config = MatchConfig(delta=delta, min_matched=self.config.min_matched)
        self._previous: list = []

    def reset(self) -> None:
        self._previous = []

    def _scan(self, mask: np.ndarray) -> list:
        cfg = self.config
        h, w = mask.shape
        if cfg.use_roi and self._previous:
            roi = frames.predict_roi(self._previous, w, h)
            if roi != RegionOfInterest.full(w, h):
                scan = frames.find_markers(mask, roi, cfg.min_blob_area)
                # lost-track policy: anything short of a clean full set -> full frame
                if len(scan.blobs) >= len(self.model) and not scan.touches_border:
                    return scan.blobs
        return frames.find_markers(mask, None, cfg.min_blob_area).blobs

    def process(
        self, refl: ReflectivityFrame, depth: DepthFrame, frame_index: int = 0
    ) -> FrameResult:
        res = FrameResult(frame_index, int(refl.timestamp))
        lat = res.latency
        t0 = time.perf_counter()
        img = frames.undistort(refl.pixels, self.intrinsics)
        t1 = time.perf_counter()
        mask = frames.threshold(img, self.config.threshold)
        t2 = time.perf_counter()
        blobs = self._scan(mask)
        t3 = time.perf_counter()
        lat["undistort"], lat["threshold"], lat["blobs"] = t1 - t0, t2 - t1, t3 - t2
        res.blobs = blobs
        self._previous = blobs
        dets = build_detection_set(blobs, depth, self.intrinsics, median=self.config.median_depth)
        t4 = time.perf_counter()
        lat["backproject"] = t4 - t3
        res.n_detections = len(dets)
        try:
            if len(dets) < self.match_config.min_matched:
                raise NoConsistentAssignment(f"only {len(dets)} markers with depth")
            corr = match(distance_matrix(dets.points), self.model.distance_matrix, self.match_config)
        except AmbiguousAssignment:
            res.error = "AmbiguousAssignment"
            return res
        except NoConsistentAssignment:
            res.error = "NoConsistentAssignment" if len(blobs) else "NoMarkers"
            return res
        finally:
            lat["match"] = time.perf_counter() - t4
        t5 = time.perf_counter()
        src = dets.points[corr.detection_indices]
        dst = self.model.points[corr.model_indices]
        try:
            sol = solve(AlignmentProblem(src, dst))
        except DegenerateConfiguration:
            res.error = "DegenerateConfiguration"
            return res
        finally:
            lat["solve"] = time.perf_counter() - t5
        res.rig_from_camera = sol.transform
        res.rms = sol.rms_error
        world_rig = refl.camera_pose @ sol.transform.inverse()
        res.pose = TimedPose(res.timestamp, world_rig, PoseSource.MEASURED)
        return res
