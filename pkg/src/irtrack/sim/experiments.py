"""Static and dynamic accuracy experiments against simulated ground truth.

Both experiments follow the same protocol: track a calibration phase,
align the tracker's world frame to the ground-truth frame with the
calibration samples, then score every tracked frame of the measurement
phase in the aligned frame.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

from ..alignment import align_pose_samples
from ..geometry import RigidTransform
from ..interpolation import TimedPose
from ..tracker import MarkerTracker, TrackerConfig
from .render import Renderer
from .scenario import NoiseParams, ScenarioConfig, ScenarioError, random_walk_trajectories
from .stats import ErrorStats

log = logging.getLogger(__name__)

N_CALIBRATION = 1000
# Errors decorrelate over a few walk time constants; thin to one sample per
# this many seconds before testing normality.
NORMALITY_SPACING_S = 1.5


class CalibrationFailed(RuntimeError):
    pass


@dataclass
class PhaseLog:
    estimated: list[TimedPose]
    truth: list[TimedPose]
    n_frames: int


def track_phase(config: ScenarioConfig, frames: range, tracker_config: TrackerConfig | None = None) -> PhaseLog:
    """Render and track ``frames``; keep the (estimate, truth) pairs of tracked frames."""
    renderer = Renderer(config, frames)
    tracker = MarkerTracker(config.marker_rig, config.intrinsics, tracker_config)
    est, truth = [], []
    for k, refl, depth, gt in renderer:
        res = tracker.process(refl, depth, k)
        if res.pose is not None:
            est.append(res.pose)
            truth.append(TimedPose(gt.timestamp, gt.rig_pose))
    return PhaseLog(est, truth, len(frames))


def calibrate(config: ScenarioConfig, log_: PhaseLog) -> RigidTransform:
    if len(log_.estimated) < 3:
        raise CalibrationFailed(f"only {len(log_.estimated)} tracked calibration frames")
    return align_pose_samples(log_.estimated, log_.truth, config.marker_rig.points)


def score(alignment: RigidTransform, log_: PhaseLog, stride: int) -> ErrorStats:
    aligned = [alignment @ e.pose for e in log_.estimated]
    return ErrorStats.from_samples(aligned, [g.pose for g in log_.truth], log_.n_frames, stride)


def _stride(config: ScenarioConfig) -> int:
    return max(1, int(round(NORMALITY_SPACING_S * config.frame_rate)))


def run_static_experiment(
    config: ScenarioConfig,
    n_samples: int = 5000,
    n_calibration: int = N_CALIBRATION,
    calibration_noise: NoiseParams | None = None,
    tracker_config: TrackerConfig | None = None,
) -> ErrorStats:
    """Static device, static camera: calibrate on the first frames, score the rest.

    ``calibration_noise`` (default: the scenario's own noise) applies during
    the calibration frames only, so a disturbance can be introduced after
    the frames were aligned.
    """
    cal_cfg = config if calibration_noise is None else replace(config, noise=calibration_noise)
    cal = track_phase(cal_cfg, range(n_calibration), tracker_config)
    alignment = calibrate(config, cal)
    meas = track_phase(config, range(n_calibration, n_calibration + n_samples), tracker_config)
    return score(alignment, meas, _stride(config))


def shifted(knots: list[TimedPose], dt: int) -> list[TimedPose]:
    return [TimedPose(k.timestamp + dt, k.pose, k.source) for k in knots]


def dynamic_run_scenario(
    config: ScenarioConfig, samples: int, n_calibration: int, seed: int
) -> ScenarioConfig:
    """Scenario that holds still for the calibration frames, then moves.

    Uses the config's own trajectories when they move, otherwise draws a
    validated random walk through the room.
    """
    t_cal = config.frame_time(n_calibration)
    duration = (n_calibration + samples) / config.frame_rate
    move_s = samples / config.frame_rate + 1.0
    if len(config.camera_trajectory) > 1 or len(config.rig_trajectory) > 1:
        cams, rigs = config.camera_trajectory, config.rig_trajectory
        sc = replace(config, camera_trajectory=shifted(cams, t_cal),
                     rig_trajectory=shifted(rigs, t_cal), duration=duration, seed=seed)
        sc.validate(range(n_calibration, n_calibration + samples))
        return sc
    for attempt in range(50):
        cams, rigs = random_walk_trajectories(move_s, seed * 1000 + attempt)
        sc = replace(config, camera_trajectory=shifted(cams, t_cal),
                     rig_trajectory=shifted(rigs, t_cal), duration=duration, seed=seed)
        try:
            sc.validate(range(n_calibration, n_calibration + samples))
        except ScenarioError:
            continue
        return sc
    raise ScenarioError("could not draw a valid random trajectory")


def run_dynamic_experiment(
    config: ScenarioConfig,
    n_runs: int = 5,
    samples_per_run: int = 2000,
    n_calibration: int = N_CALIBRATION,
    tracker_config: TrackerConfig | None = None,
) -> ErrorStats:
    """Moving camera and device, ``n_runs`` independent runs pooled.

    Each run calibrates on static frames without the camera random walk
    (the walk models error accumulated while moving), then scores
    ``samples_per_run`` frames of motion with the full noise model.
    """
    parts = []
    for r in range(n_runs):
        sc = dynamic_run_scenario(config, samples_per_run, n_calibration, config.seed * 7919 + r)
        cal = track_phase(replace(sc, noise=sc.noise.without_walk()), range(n_calibration), tracker_config)
        alignment = calibrate(sc, cal)
        meas = track_phase(sc, range(n_calibration, n_calibration + samples_per_run), tracker_config)
        part = score(alignment, meas, _stride(sc))
        log.info("dynamic run %d: %d/%d tracked, mean abs %.2f mm", r, part.count,
                 part.n_frames, part.mean_abs_position)
        parts.append(part)
    return ErrorStats.concatenate(parts)


# (translation, rotation) parameters rescaled by calibrate_noise
_STATIC_TERMS = ("camera_drift_rate",), ("camera_drift_rotation_rate",)
_DYNAMIC_TERMS = ("camera_walk_sigma",), ("camera_walk_rotation_sigma",)


def _scaled(noise: NoiseParams, names, s: float) -> NoiseParams:
    kw = {}
    for n in names:
        v = getattr(noise, n)
        kw[n] = tuple(s * x for x in v) if isinstance(v, tuple) else s * v
    return replace(noise, **kw)


def calibrate_noise(
    config: ScenarioConfig,
    target_position_mm: float,
    target_angle_deg: float,
    dynamic: bool = False,
    iterations: int = 4,
    **experiment_kw,
) -> NoiseParams:
    """Rescale the drift (static) or walk (dynamic) terms to hit the targets.

    Position error is driven by the translation terms and angle error by
    the rotation terms, so the two scales are updated independently by
    proportional correction.
    """
    run = run_dynamic_experiment if dynamic else run_static_experiment
    trans, rot = _DYNAMIC_TERMS if dynamic else _STATIC_TERMS
    noise = config.noise
    for i in range(iterations):
        st = run(replace(config, noise=noise), **experiment_kw)
        sp = target_position_mm / max(st.mean_abs_position, 1e-9)
        sa = target_angle_deg / max(st.mean_abs_angle, 1e-9)
        log.info("calibration step %d: %.3f mm %.3f deg", i, st.mean_abs_position, st.mean_abs_angle)
        noise = _scaled(_scaled(noise, trans, sp), rot, sa)
    return noise

