"""Synthetic reflectivity/depth frame pairs of a marker rig."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..frames import DepthFrame, ReflectivityFrame
from ..geometry import Quaternion, RigidTransform
from .scenario import ScenarioConfig

MARKER_INTENSITY = 255
BACKGROUND_RANGE = (10, 60)
DISTRACTOR_RANGE = (240, 250)
N_DISTRACTORS = 4


@dataclass(frozen=True, eq=False)
class GroundTruth:
    timestamp: int
    rig_pose: RigidTransform  # world <- rig
    camera_pose: RigidTransform  # true world <- camera
    reported_camera_pose: RigidTransform
    markers_camera: np.ndarray  # (N, 3)
    markers_pixels: np.ndarray  # (N, 2) ideal pixel centers incl. jitter
    visible: bool = True  # False: rig out of frustum, frame carries no markers


def _ou_sequence(rng: np.random.Generator, n: int, dt: float, sigma: float, tau: float) -> np.ndarray:
    """(n, 3) stationary Ornstein-Uhlenbeck samples with diffusion ``sigma``."""
    out = np.zeros((n, 3))
    if sigma == 0.0 or n == 0:
        return out
    stat = sigma * math.sqrt(tau / 2.0)
    a = math.exp(-dt / tau)
    b = stat * math.sqrt(1.0 - a * a)
    z = rng.standard_normal((n, 3))
    out[0] = stat * z[0]
    for k in range(1, n):
        out[k] = a * out[k - 1] + b * z[k]
    return out


class Renderer:
    """Deterministic renderer for frames ``frame_range`` of a scenario.

    Rendering a frame depends only on the config, the frame index and the
    camera random-walk state, which is drawn for the whole range up front.
    """

    def __init__(self, config: ScenarioConfig, frame_range: range | None = None):
        self.config = config
        self.frame_range = frame_range if frame_range is not None else range(config.n_frames)
        intr = config.intrinsics
        self.shape = (intr.height, intr.width)
        seeds = np.random.SeedSequence([config.seed, 0x5EED])
        bg_seed, walk_seed, self._frame_seed = seeds.spawn(3)
        rng = np.random.default_rng(bg_seed)
        self.background = rng.integers(*BACKGROUND_RANGE, size=self.shape, endpoint=True).astype(np.uint8)
        for _ in range(N_DISTRACTORS):
            h, w = rng.integers(2, 7, size=2)
            r0 = rng.integers(0, self.shape[0] - h)
            c0 = rng.integers(0, self.shape[1] - w)
            self.background[r0 : r0 + h, c0 : c0 + w] = rng.integers(*DISTRACTOR_RANGE, endpoint=True)
        # background surface: a slanted board 0.85-0.95 m away
        rows = np.arange(self.shape[0], dtype=np.float32)[:, None]
        self.background_depth = np.broadcast_to(0.85 + 0.1 * rows / self.shape[0], self.shape).astype(np.float32)
        self._noise_field = None
        if config.noise.depth_sigma > 0:
            h, w = self.shape
            self._noise_field = rng.standard_normal((2 * h, 2 * w), dtype=np.float32)
        if intr.has_distortion:
            v, u = np.mgrid[0 : intr.height, 0 : intr.width].astype(float)
            iu, iv = intr.undistort_pixels(u, v)
            self._ideal_u, self._ideal_v = iu, iv
        noise = config.noise
        dt = 1.0 / config.frame_rate
        n = len(self.frame_range)
        wrng = np.random.default_rng(walk_seed)
        self._walk_t = _ou_sequence(wrng, n, dt, noise.camera_walk_sigma, noise.walk_tau)
        self._walk_r = _ou_sequence(wrng, n, dt, noise.camera_walk_rotation_sigma, noise.walk_tau)

    def camera_error(self, k: int, true_camera: RigidTransform) -> RigidTransform:
        """World-frame perturbation applied to the true camera pose at frame k."""
        noise = self.config.noise
        t = self.config.frame_time(k) * 1e-6
        j = self.frame_range.index(k)
        dtr = np.asarray(noise.camera_bias) + np.asarray(noise.camera_drift_rate) * t + self._walk_t[j]
        drot = (np.asarray(noise.camera_bias_rotation)
                + np.asarray(noise.camera_drift_rotation_rate) * t + self._walk_r[j])
        pivot = true_camera.apply([0.0, 0.0, noise.pivot_depth])
        q = Quaternion.from_rotvec(drot)
        R = q.matrix()
        return RigidTransform(q, pivot - R @ pivot + dtr)

    def render_frame(self, k: int) -> tuple[ReflectivityFrame, DepthFrame, GroundTruth]:
        cfg = self.config
        intr = cfg.intrinsics
        t = cfg.frame_time(k)
        cam = cfg.camera_pose(t)
        rig = cfg.rig_pose(t)
        p_cam = (cam.inverse() @ rig).apply(cfg.marker_rig.points)
        reported = self.camera_error(k, cam) @ cam
        rng = np.random.default_rng([*self._frame_seed.generate_state(2), k])
        uv = intr.project(p_cam)
        if cfg.noise.pixel_jitter_sigma > 0:
            uv = uv + rng.normal(0.0, cfg.noise.pixel_jitter_sigma, uv.shape)
        h, w = self.shape
        visible = bool(
            np.all(p_cam[:, 2] > 0.0) and np.all(np.isfinite(uv))
            and np.all((uv[:, 0] >= 0) & (uv[:, 0] <= w - 1))
            and np.all((uv[:, 1] >= 0) & (uv[:, 1] <= h - 1))
        )
        truth = GroundTruth(t, rig, cam, reported, p_cam, uv, visible)
        pixels = self.background.copy()
        depth = self.background_depth.copy()
        if self._noise_field is not None:
            h, w = self.shape
            r0, c0 = rng.integers(0, h), rng.integers(0, w)
            depth += cfg.noise.depth_sigma * self._noise_field[r0 : r0 + h, c0 : c0 + w]
        for (u, v), z in zip(uv, p_cam[:, 2]) if visible else ():
            radius = intr.f * cfg.marker_radius / z
            if intr.has_distortion:
                cu, cv = intr.distort_pixels(u, v)
                reach = radius * 1.5 + 3
            else:
                cu, cv, reach = u, v, radius + 2
            c0, c1 = max(int(math.floor(cu - reach)), 0), min(int(math.ceil(cu + reach)) + 1, w)
            r0, r1 = max(int(math.floor(cv - reach)), 0), min(int(math.ceil(cv + reach)) + 1, h)
            if c0 >= c1 or r0 >= r1:
                continue
            if intr.has_distortion:
                du = self._ideal_u[r0:r1, c0:c1] - u
                dv = self._ideal_v[r0:r1, c0:c1] - v
            else:
                du = np.arange(c0, c1)[None, :] - u
                dv = np.arange(r0, r1)[:, None] - v
            disc = du * du + dv * dv <= radius * radius
            pixels[r0:r1, c0:c1][disc] = MARKER_INTENSITY
            zpatch = np.full(disc.shape, z, dtype=np.float32)
            if cfg.noise.depth_sigma > 0:
                zpatch += rng.normal(0.0, cfg.noise.depth_sigma, disc.shape).astype(np.float32)
            depth[r0:r1, c0:c1][disc] = zpatch[disc]
        return (
            ReflectivityFrame(pixels, t, reported),
            DepthFrame(depth, t, reported),
            truth,
        )

    def __iter__(self):
        for k in self.frame_range:
            yield k, *self.render_frame(k)
