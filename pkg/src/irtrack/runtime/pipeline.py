"""Computing workers, in-order release, prediction and streaming.

Frames fan out to ``computing_workers`` processes, each running its own
:class:`~irtrack.tracker.MarkerTracker`. Results come back in completion
order; a :class:`Sequencer` restores frame order before the prediction
stage sees them.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from collections import Counter
from concurrent.futures import FIRST_COMPLETED, ProcessPoolExecutor, wait
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator

import numpy as np

from ..correspondence import MarkerModel
from ..frames import (
    CameraIntrinsics,
    DepthFrame,
    ReflectivityFrame,
    load_frame_pair,
    read_index,
)
from ..interpolation import PoseSource
from ..tracker import STAGES, FrameResult, MarkerTracker, TrackerConfig
from .streaming import DEFAULT_QUEUE_SIZE, PoseEmitter, PoseStreamer

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    computing_workers: int = 2
    streamer_rate: float = 46.0  # Hz
    stale_cap_ms: float = 100.0
    endpoint: str | None = None  # host:port for live streaming
    datagram: bool = False
    queue_size: int = DEFAULT_QUEUE_SIZE
    tracker: TrackerConfig = field(default_factory=TrackerConfig)

    def __post_init__(self) -> None:
        if self.computing_workers < 1:
            raise ConfigError("computing_workers must be >= 1")
        if not self.streamer_rate > 0:
            raise ConfigError("streamer_rate must be positive")
        if not self.stale_cap_ms > 0:
            raise ConfigError("stale_cap_ms must be positive")
        if self.queue_size < 1:
            raise ConfigError("queue_size must be >= 1")

    @property
    def stale_cap_us(self) -> int:
        return int(round(self.stale_cap_ms * 1000))


@dataclass(frozen=True, eq=False)
class FramePair:
    index: int
    reflectivity: ReflectivityFrame
    depth: DepthFrame

    @property
    def timestamp(self) -> int:
        return int(self.reflectivity.timestamp)


def directory_source(directory) -> Iterator[FramePair]:
    """Frame pairs of a frame directory, loaded lazily in index order."""
    for rec in read_index(directory):
        refl, depth = load_frame_pair(directory, rec)
        yield FramePair(rec.frame_index, refl, depth)


def renderer_source(renderer) -> Iterator[FramePair]:
    for k, refl, depth, _ in renderer:
        yield FramePair(k, refl, depth)


@dataclass(frozen=True, eq=False)
class PoseRecord:
    """One row of the pose output: a measured or predicted world <- rig pose."""

    timestamp: int
    pose: object  # RigidTransform
    source: PoseSource
    frame_index: int


class Sequencer:
    """Reorder buffer: accepts results in any order, releases them by ordinal."""

    def __init__(self, start: int = 0):
        self.next = start
        self._held: dict[int, object] = {}

    def push(self, ordinal: int, item) -> list:
        if ordinal < self.next or ordinal in self._held:
            raise ValueError(f"ordinal {ordinal} already released or pending")
        self._held[ordinal] = item
        out = []
        while self.next in self._held:
            out.append(self._held.pop(self.next))
            self.next += 1
        return out

    def __len__(self) -> int:
        return len(self._held)


# -- worker side ------------------------------------------------------------------

_TRACKER: MarkerTracker | None = None


def _init_worker(model: MarkerModel, intrinsics: CameraIntrinsics, config: TrackerConfig) -> None:
    global _TRACKER
    _TRACKER = MarkerTracker(model, intrinsics, config)


def _compute(index: int, refl: ReflectivityFrame, depth: DepthFrame, stall_s: float) -> FrameResult:
    if stall_s > 0:
        time.sleep(stall_s)
    return _TRACKER.process(refl, depth, index)


def _noop() -> None:
    return None


# -- run report -------------------------------------------------------------------


def percentiles(values, ps=(50, 95, 99)) -> dict:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return {f"p{p}": float("nan") for p in ps}
    return {f"p{p}": float(np.percentile(v, p)) for p in ps}


@dataclass
class RunReport:
    frames_processed: int = 0
    frames_tracked: int = 0
    rejected: Counter = field(default_factory=Counter)
    out_of_order: int = 0
    wall_time_s: float = 0.0
    predicted_messages: int = 0
    stale_messages: int = 0
    messages_sent: int = 0
    drops: int = 0
    gaps: int = 0
    stage_latency_s: dict = field(default_factory=lambda: {s: [] for s in (*STAGES, "total")})
    release_latency_s: list = field(default_factory=list)  # submit -> in-order release

    @property
    def frames_rejected(self) -> int:
        return sum(self.rejected.values())

    @property
    def throughput_fps(self) -> float:
        return self.frames_processed / self.wall_time_s if self.wall_time_s > 0 else 0.0

    def record(self, res: FrameResult) -> None:
        self.frames_processed += 1
        if res.tracked:
            self.frames_tracked += 1
        else:
            self.rejected[res.error or "unknown"] += 1
        total = 0.0
        for stage, v in res.latency.items():
            self.stage_latency_s.setdefault(stage, []).append(v)
            total += v
        self.stage_latency_s["total"].append(total)

    def to_dict(self) -> dict:
        return {
            "frames_processed": self.frames_processed,
            "frames_tracked": self.frames_tracked,
            "frames_rejected": self.frames_rejected,
            "rejected_by_reason": dict(self.rejected),
            "out_of_order_dropped": self.out_of_order,
            "wall_time_s": self.wall_time_s,
            "throughput_fps": self.throughput_fps,
            "predicted_messages": self.predicted_messages,
            "stale_messages": self.stale_messages,
            "messages_sent": self.messages_sent,
            "drops": self.drops,
            "gaps": self.gaps,
            "latency_ms": {
                s: {k: 1000 * v for k, v in percentiles(vals).items()}
                for s, vals in self.stage_latency_s.items() if vals
            },
            "release_latency_ms": {k: 1000 * v for k, v in percentiles(self.release_latency_s).items()},
        }


# -- pipeline ---------------------------------------------------------------------


class PoseCsvWriter:
    """poses.csv: timestamp_us, px, py, pz, qw, qx, qy, qz, source, frame_index."""

    HEADER = ("timestamp_us", "px", "py", "pz", "qw", "qx", "qy", "qz", "source", "frame_index")

    def __init__(self, path):
        self._fh = open(path, "w", newline="")
        self._w = csv.writer(self._fh)
        self._w.writerow(self.HEADER)

    def __call__(self, rec: PoseRecord) -> None:
        self._w.writerow([rec.timestamp, *(repr(float(v)) for v in rec.pose.to_pose7()),
                          rec.source.value, rec.frame_index])

    def close(self) -> None:
        self._fh.close()


def _make_pool(n: int, model, intrinsics, tracker_config) -> ProcessPoolExecutor:
    pool = ProcessPoolExecutor(max_workers=n, initializer=_init_worker,
                               initargs=(model, intrinsics, tracker_config))
    # start every worker before the clock matters
    wait([pool.submit(_noop) for _ in range(n)])
    return pool


def run_pipeline(
    source: Iterable[FramePair],
    model: MarkerModel,
    intrinsics: CameraIntrinsics,
    config: PipelineConfig = PipelineConfig(),
    sink: Callable[[PoseRecord], None] | None = None,
    streamer: PoseStreamer | None = None,
    realtime: bool = False,
    stall: Callable[[int], float] | None = None,
) -> RunReport:
    """Track every frame of ``source`` and deliver poses in timestamp order.

    Without a ``streamer`` the prediction stage runs on a virtual clock:
    ticks at ``streamer_rate`` along the sensor timeline, each seeing only
    measurements whose timestamps precede it, and predicted poses go to
    ``sink`` interleaved with the measured ones. With a ``streamer`` measured
    poses are handed to it and it predicts on the wall clock. ``realtime``
    paces frame intake by the frame timestamps. ``stall(ordinal)`` returns
    an artificial per-frame worker delay in seconds (ordering tests).
    """
    report = RunReport()
    emitter = PoseEmitter(config.stale_cap_us) if streamer is None else None
    tick_period = 1e6 / config.streamer_rate
    clock = {"t0": None, "j": 0, "last_ts": None, "frame": -1}

    def tick_until(t_limit: int, inclusive: bool) -> None:
        while True:
            t = clock["t0"] + int(round(clock["j"] * tick_period))
            if t > t_limit or (t == t_limit and not inclusive):
                return
            clock["j"] += 1
            if emitter.state.latest is not None and t <= emitter.state.latest.timestamp:
                continue  # the measurement itself already covers this instant
            msg = emitter.tick(t)
            if msg is None:
                continue
            if msg.stale:
                report.stale_messages += 1
                continue
            report.predicted_messages += 1
            if sink is not None:
                sink(PoseRecord(t, emitter.last.pose, PoseSource.PREDICTED, clock["frame"]))

    def release(res: FrameResult, submitted: float) -> None:
        report.record(res)
        report.release_latency_s.append(time.perf_counter() - submitted)
        ts = res.timestamp
        if clock["last_ts"] is not None and ts <= clock["last_ts"]:
            report.out_of_order += 1
            return
        clock["last_ts"] = ts
        if emitter is not None:
            if clock["t0"] is None:
                clock["t0"] = ts
            tick_until(ts, inclusive=False)
        if res.pose is None:
            return
        if emitter is not None:
            emitter.update(res.pose)
            clock["frame"] = res.frame_index
        else:
            streamer.submit(res.pose)
        if sink is not None:
            sink(PoseRecord(ts, res.pose.pose, PoseSource.MEASURED, res.frame_index))

    n = config.computing_workers
    window = 2 * n
    pool = _make_pool(n, model, intrinsics, config.tracker)
    seq = Sequencer()
    pending: dict = {}
    submitted_at: dict[int, float] = {}
    start = time.perf_counter()
    first_ts = None

    def collect(block: bool) -> None:
        if not pending:
            return
        done, _ = wait(list(pending), timeout=None if block else 0, return_when=FIRST_COMPLETED)
        for fut in done:
            ordinal = pending.pop(fut)
            for o, r in seq.push(ordinal, (ordinal, fut.result())):
                release(r, submitted_at.pop(o))

    try:
        for ordinal, fp in enumerate(source):
            if realtime:
                if first_ts is None:
                    first_ts = fp.timestamp
                delay = start + (fp.timestamp - first_ts) * 1e-6 - time.perf_counter()
                if delay > 0:
                    time.sleep(delay)
            while len(pending) >= window:
                collect(block=True)
            delay = stall(ordinal) if stall is not None else 0.0
            submitted_at[ordinal] = time.perf_counter()
            fut = pool.submit(_compute, fp.index, fp.reflectivity, fp.depth, delay)
            pending[fut] = ordinal
            collect(block=False)
        while pending:
            collect(block=True)
    finally:
        pool.shutdown(wait=True, cancel_futures=True)
    report.wall_time_s = time.perf_counter() - start
    if emitter is not None and clock["last_ts"] is not None:
        tick_until(clock["last_ts"], inclusive=True)
    return report


# -- benchmark --------------------------------------------------------------------


@dataclass
class BenchResult:
    workers: int
    frames: int
    seconds: float

    @property
    def fps(self) -> float:
        return self.frames / self.seconds


def bench(
    frames: list[FramePair],
    model: MarkerModel,
    intrinsics: CameraIntrinsics,
    workers: int,
    n_frames: int = 600,
    tracker_config: TrackerConfig | None = None,
) -> BenchResult:
    """Computing-stage throughput on preloaded frames (cycled to ``n_frames``)."""
    if not frames:
        raise ValueError("no frames to benchmark")
    pool = _make_pool(workers, model, intrinsics, tracker_config or TrackerConfig())
    pending = set()
    try:
        t0 = time.perf_counter()
        for i in range(n_frames):
            fp = frames[i % len(frames)]
            while len(pending) >= 2 * workers:
                _, pending = wait(pending, return_when=FIRST_COMPLETED)
            pending.add(pool.submit(_compute, fp.index, fp.reflectivity, fp.depth, 0.0))
        wait(pending)
        dt = time.perf_counter() - t0
    finally:
        pool.shutdown(wait=True)
    return BenchResult(workers, n_frames, dt)


def write_report(report: RunReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=1))
