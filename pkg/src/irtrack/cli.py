"""Command line entry points.

Exit codes: 0 success, 1 computation failed, 2 bad configuration,
3 malformed input data.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .correspondence import MarkerModel
from .frames import INDEX_NAME, CameraIntrinsics, FrameFormatError, write_frame_pair
from .geometry import RigidTransform

EXIT_OK = 0
EXIT_FAILED = 1  # the computation itself failed (e.g. ICP diverged)
EXIT_CONFIG = 2
EXIT_INPUT = 3


class ConfigProblem(Exception):
    pass


class InputProblem(Exception):
    pass


def _load_config(loader, path, what: str):
    try:
        return loader(path)
    except FileNotFoundError as exc:
        raise ConfigProblem(f"{what}: {exc}") from exc
    except (ValueError, KeyError, TypeError) as exc:  # includes JSONDecodeError
        raise ConfigProblem(f"{what} {path}: {exc}") from exc


def _numbers(text: str, n: int | None, what: str) -> list[float]:
    try:
        vals = [float(v) for v in text.replace(",", " ").split()]
    except ValueError as exc:
        raise ConfigProblem(f"{what}: {exc}") from exc
    if n is not None and len(vals) != n:
        raise ConfigProblem(f"{what}: expected {n} numbers, got {len(vals)}")
    return vals


# -- simulate ----------------------------------------------------------------


def cmd_simulate(args) -> int:
    from .sim.render import Renderer
    from .sim.scenario import ScenarioConfig

    sc = _load_config(ScenarioConfig.load, args.scenario, "scenario")
    try:
        sc.validate()
    except ValueError as exc:
        raise ConfigProblem(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / INDEX_NAME, "w") as idx, open(out / "ground_truth.csv", "w", newline="") as gt:
        w = csv.writer(gt)
        w.writerow(["timestamp_us", "px", "py", "pz", "qw", "qx", "qy", "qz"])
        for k, refl, depth, truth in Renderer(sc):
            idx.write(write_frame_pair(out, k, refl, depth).to_json() + "\n")
            w.writerow([truth.timestamp, *(repr(v) for v in truth.rig_pose.to_pose7())])
    (out / "rig.json").write_text(json.dumps(sc.marker_rig.to_dict()))
    (out / "camera.json").write_text(json.dumps(sc.intrinsics.to_dict()))
    print(json.dumps({"frames": sc.n_frames, "out": str(out)}))
    return EXIT_OK


# -- track ---------------------------------------------------------------------


def _pipeline_config(args):
    from .runtime.pipeline import ConfigError, PipelineConfig

    try:
        return PipelineConfig(
            computing_workers=args.workers,
            streamer_rate=args.rate,
            stale_cap_ms=args.stale_cap_ms,
            endpoint=getattr(args, "serve", None),
            datagram=getattr(args, "datagram", False),
        )
    except ConfigError as exc:
        raise ConfigProblem(str(exc)) from exc


def _check_frames_dir(path) -> None:
    if not (Path(path) / INDEX_NAME).exists():
        raise InputProblem(f"{path}: no {INDEX_NAME}")


def cmd_track(args) -> int:
    from .runtime.pipeline import PoseCsvWriter, directory_source, run_pipeline, write_report
    from .runtime.streaming import PoseStreamer, TcpTransport, UdpTransport

    model = _load_config(MarkerModel.load, args.model, "marker model")
    intr = _load_config(CameraIntrinsics.load, args.intrinsics, "intrinsics")
    config = _pipeline_config(args)
    _check_frames_dir(args.frames)
    streamer = None
    if args.serve:
        try:
            transport = UdpTransport(args.serve) if args.datagram else TcpTransport(args.serve)
        except ValueError as exc:
            raise ConfigProblem(str(exc)) from exc
        first = {}

        def sensor_clock():
            # maps wall time onto the frame timeline once the first frame is in
            if "wall" not in first:
                return -1
            return first["ts"] + int((time.monotonic() - first["wall"]) * 1e6)

        streamer = PoseStreamer(transport, config.streamer_rate, config.stale_cap_ms,
                                config.queue_size, clock=sensor_clock).start()

        def source():
            for fp in directory_source(args.frames):
                if "wall" not in first:
                    first.update(ts=fp.timestamp, wall=time.monotonic())
                yield fp
        frames = source()
    else:
        frames = directory_source(args.frames)
    writer = PoseCsvWriter(args.out)
    try:
        report = run_pipeline(frames, model, intr, config, sink=writer, streamer=streamer,
                              realtime=bool(args.serve))
    finally:
        writer.close()
        if streamer is not None:
            stats = streamer.stop()
    if streamer is not None:
        report.messages_sent, report.drops, report.gaps = stats.sent, stats.drops, stats.gaps
        report.stale_messages += stats.stale
    if args.report:
        write_report(report, args.report)
    print(json.dumps(report.to_dict()))
    return EXIT_OK


# -- experiment ----------------------------------------------------------------


def cmd_experiment(args) -> int:
    from .sim.experiments import run_dynamic_experiment, run_static_experiment
    from .sim.scenario import ScenarioConfig

    sc = _load_config(ScenarioConfig.load, args.scenario, "scenario")
    try:
        if args.kind == "static":
            sc.validate(range(1))
            stats = run_static_experiment(sc, n_samples=args.samples or 5000,
                                          n_calibration=args.calibration)
        else:
            stats = run_dynamic_experiment(sc, n_runs=args.runs, samples_per_run=args.samples or 2000,
                                           n_calibration=args.calibration)
    except ValueError as exc:
        raise ConfigProblem(str(exc)) from exc
    stats.save(args.out, args.histogram)
    d = stats.to_dict()
    d.pop("histogram")
    print(json.dumps(d))
    return EXIT_OK


# -- refpipe -------------------------------------------------------------------


def cmd_refpipe(args) -> int:
    from .pointcloud import (
        CloudFormatError,
        Diverged,
        FilterParams,
        KinematicChain,
        PointCloud,
        reference_robot,
    )

    if args.write_cell:
        return _write_cell(args)
    if not (args.scene and args.chain and args.seed):
        raise ConfigProblem("refpipe needs --scene, --chain and --seed")
    chain = _load_config(KinematicChain.load, args.chain, "kinematic chain")
    if args.joints is not None:
        chain = chain.with_state(_numbers(args.joints, chain.n_joints, "--joints"))
    seed = RigidTransform.from_pose7(_numbers(args.seed, 7, "--seed"))
    try:
        scene = PointCloud.read_ply(args.scene)
    except FileNotFoundError as exc:
        raise InputProblem(str(exc)) from exc
    except (CloudFormatError, ValueError) as exc:
        raise InputProblem(str(exc)) from exc
    params = FilterParams(voxel_leaf=args.leaf)
    try:
        res = reference_robot(scene, chain, seed, params, prefiltered=args.no_filter)
    except Diverged as exc:
        print(f"error: registration diverged: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except ValueError as exc:
        raise ConfigProblem(str(exc)) from exc
    print(json.dumps({"transform": res.transform.to_pose7(), "rms": res.rms_error,
                      "iterations": res.iterations}))
    return EXIT_OK


def _write_cell(args) -> int:
    from .sim.cell import seed_offset, simulated_cell

    out = Path(args.write_cell)
    out.mkdir(parents=True, exist_ok=True)
    cell = simulated_cell(args.cell_seed)
    cell.scene.write_ply(out / "scene.ply")
    cell.chain.save(out / "robot.json")
    seed = cell.base @ seed_offset(np.random.default_rng(args.cell_seed + 1))
    truth = {"base": cell.base.to_pose7(), "seed": seed.to_pose7(),
             "joints": list(cell.chain.joint_state)}
    (out / "truth.json").write_text(json.dumps(truth, indent=1))
    print(json.dumps({"out": str(out), **truth}))
    return EXIT_OK


# -- bench ---------------------------------------------------------------------


def cmd_bench(args) -> int:
    from .runtime.pipeline import FramePair, bench, directory_source

    if args.frames:
        _check_frames_dir(args.frames)
        frames = list(directory_source(args.frames))
        model = _load_config(MarkerModel.load, args.model or Path(args.frames) / "rig.json",
                             "marker model")
        intr = _load_config(CameraIntrinsics.load,
                            args.intrinsics or Path(args.frames) / "camera.json", "intrinsics")
    else:
        from .sim.experiments import dynamic_run_scenario
        from .sim.render import Renderer
        from .sim.scenario import DYNAMIC_NOISE, ScenarioConfig

        sc = dynamic_run_scenario(ScenarioConfig(noise=DYNAMIC_NOISE), 300, 0, seed=1)
        frames = [FramePair(k, a, b) for k, a, b, _ in Renderer(sc, range(300))]
        model, intr = sc.marker_rig, sc.intrinsics
    if args.workers < 1:
        raise ConfigProblem("--workers must be >= 1")
    results = {w: bench(frames, model, intr, w, args.n_frames) for w in sorted({1, args.workers})}
    out = {
        "workers": args.workers,
        "frame_size": list(frames[0].reflectivity.pixels.shape[::-1]),
        "fps": results[args.workers].fps,
        "fps_1_worker": results[1].fps,
        "scaling": results[args.workers].fps / results[1].fps,
    }
    print(json.dumps(out))
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def _add_refpipe_args(p) -> None:
    p.add_argument("--scene", help="environment cloud, ASCII PLY")
    p.add_argument("--chain", help="kinematic chain JSON")
    p.add_argument("--joints", help="joint angles in radians, comma separated")
    p.add_argument("--seed", help='initial base pose "px py pz qw qx qy qz"')
    p.add_argument("--leaf", type=float, default=0.01, help="voxel leaf (m)")
    p.add_argument("--no-filter", action="store_true", help="scene is already filtered")
    p.add_argument("--write-cell", metavar="DIR", help="write a simulated robot cell and exit")
    p.add_argument("--cell-seed", type=int, default=0)
    p.set_defaults(func=cmd_refpipe)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="irtrack", description="IR marker tracking toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="render a scenario to a frame directory")
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("track", help="track a frame directory")
    p.add_argument("--frames", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--intrinsics", required=True)
    p.add_argument("--out", required=True, help="poses CSV")
    p.add_argument("--serve", metavar="HOST:PORT", help="stream poses live to this endpoint")
    p.add_argument("--datagram", action="store_true", help="use UDP instead of TCP")
    p.add_argument("--workers", type=int, default=2)
    p.add_argument("--rate", type=float, default=46.0, help="streamer rate (Hz)")
    p.add_argument("--stale-cap-ms", type=float, default=100.0)
    p.add_argument("--report", help="write the run report JSON here")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("experiment", help="static or dynamic accuracy experiment")
    p.add_argument("kind", choices=("static", "dynamic"))
    p.add_argument("--scenario", required=True)
    p.add_argument("--out", required=True, help="stats JSON")
    p.add_argument("--histogram", help="histogram CSV")
    p.add_argument("--samples", type=int, help="scored samples (per run for dynamic)")
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--calibration", type=int, default=1000)
    p.set_defaults(func=cmd_experiment)

    _add_refpipe_args(sub.add_parser("refpipe", help="register a robot model into a scene cloud"))

    p = sub.add_parser("bench", help="computing-stage throughput")
    p.add_argument("--frames", help="frame directory (default: synthetic 448x450 frames)")
    p.add_argument("--model")
    p.add_argument("--intrinsics")
    p.add_argument("--workers", type=int, default=2)
    p.add_argument("--n-frames", type=int, default=600)
    p.set_defaults(func=cmd_bench)
    return ap


def _run(args) -> int:
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigProblem as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputProblem, FrameFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


def main(argv=None) -> int:
    return _run(build_parser().parse_args(argv))


def refpipe_main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="refpipe", description="robot referencing pipeline")
    ap.add_argument("-v", "--verbose", action="store_true")
    _add_refpipe_args(ap)
    return _run(ap.parse_args(argv))


if __name__ == "__main__":
    sys.exit(main())
