"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

from __future__ import annotations

import math
import os
import time

import numpy as np
import pytest
from helpers import brute_force_match, random_quaternion, random_rig, random_transform

from irtrack.alignment import solve_points
from irtrack.correspondence import (
    AMBIGUITY_TOL,
    AmbiguousAssignment,
    MatchConfig,
    NoConsistentAssignment,
    distance_matrix,
    match,
)
from irtrack.geometry import angular_distance
from irtrack.interpolation import slerp
from irtrack.pointcloud import reference_robot
from irtrack.runtime.pipeline import bench, renderer_source
from irtrack.runtime.protocol import MESSAGE_SIZE, PoseMessage, decode_pose, encode_pose
from irtrack.sim.cell import seed_offset, simulated_cell
from irtrack.sim.experiments import dynamic_run_scenario, run_dynamic_experiment, run_static_experiment
from irtrack.sim.render import Renderer
from irtrack.sim.scenario import DYNAMIC_NOISE, STATIC_NOISE, NoiseParams, ScenarioConfig
from irtrack.tracker import MarkerTracker


@pytest.fixture
def verdict(capsys):
    """Print one PASS/FAIL line straight to the terminal, then assert."""

    def report(n: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}")
        assert ok, detail

    return report


def test_criterion_01_solver_exactness(verdict):
    rng = np.random.default_rng(1)
    worst_rot = worst_trans = 0.0
    t0 = time.perf_counter()
    for _ in range(10_000):
        x = random_rig(rng, 5)
        truth = random_transform(rng, scale=1.0)
        res = solve_points(x, truth.apply(x)).transform
        worst_rot = max(worst_rot, angular_distance(res.rotation, truth.rotation))
        worst_trans = max(worst_trans, float(np.linalg.norm(res.translation - truth.translation)))
    dt = time.perf_counter() - t0
    ok = worst_rot < 1e-9 and worst_trans < 1e-9 and dt < 5.0
    verdict(1, ok, f"max rotation error {worst_rot:.2e} rad, max translation error "
                   f"{worst_trans:.2e} m, {dt:.2f} s for 1e4 solves")


def adversarial_pair(rng, k: int) -> tuple[np.ndarray, np.ndarray]:
    extent = 0.15
    x = random_rig(rng, int(rng.integers(3, 9)), extent)
    while True:  # planar is the point; collinear sets are refused by design and redrawn
        sv = np.linalg.svd(x[:, :2] - x[:, :2].mean(axis=0), compute_uv=False)
        if sv[1] > 1e-3 * sv[0]:
            break
        x = random_rig(rng, len(x), extent)
    if k % 3 == 0:
        x[:, 2] = 0.0  # exactly coplanar
    elif k % 3 == 1:
        x[:, 2] *= 10.0 ** rng.uniform(-9, -3)  # nearly coplanar
    R = random_quaternion(rng).matrix()
    x = x @ R.T
    y = random_transform(rng).apply(x)
    if k % 2 == 0:
        # the mirror image is the exact least-squares optimum over O(3)
        n = R[:, 2]
        y = y - 2.0 * np.outer((y - y.mean(axis=0)) @ n, n)
    y = y + rng.normal(scale=rng.uniform(0.0, extent / 2), size=y.shape)
    return x, y


def test_criterion_02_reflection_fix(verdict):
    rng = np.random.default_rng(2)
    worst = 0.0
    for k in range(10_000):
        x, y = adversarial_pair(rng, k)
        R = solve_points(x, y).R
        worst = max(worst, abs(np.linalg.det(R) - 1.0))
    verdict(2, worst < 1e-9, f"max |det(R) - 1| = {worst:.2e} over 1e4 adversarial trials")


def test_criterion_03_correspondence_oracle(verdict):
    rng = np.random.default_rng(3)
    delta = 0.005
    agree = 0
    ambiguous = 0
    t0 = time.perf_counter()
    for _ in range(1000):
        n_model = int(rng.integers(3, 8))
        model = random_rig(rng, n_model)
        keep = rng.permutation(n_model)[: int(rng.integers(2, n_model + 1))]
        dets = random_transform(rng).apply(model[keep]) + rng.normal(scale=0.001, size=(len(keep), 3))
        extra = int(rng.integers(0, 7 - len(keep) + 1))
        dets = np.vstack([dets, rng.uniform(-0.1, 0.1, (extra, 3))])[rng.permutation(len(keep) + extra)]
        D_R, D_M = distance_matrix(dets), distance_matrix(model)
        count, residuals = brute_force_match(D_R, D_M, delta)
        unique_best = len(residuals) == 1 or residuals[1] - residuals[0] > AMBIGUITY_TOL
        try:
            corr = match(D_R, D_M, MatchConfig(delta=delta))
        except AmbiguousAssignment:
            # equal-residual optima are refused rather than tie-broken
            ambiguous += 1
            agree += count >= 3 and not unique_best
            continue
        except NoConsistentAssignment:
            agree += count < 3
            continue
        agree += len(corr) == count and unique_best and abs(corr.residual - residuals[0]) < 1e-12
    dt = time.perf_counter() - t0
    ok = agree == 1000 and dt < 30.0
    verdict(3, ok, f"{agree}/1000 trials equal the exhaustive oracle ({ambiguous} exact ties "
                   f"refused as ambiguous), {dt:.1f} s")


def test_criterion_04_slerp_constant_angular_velocity(verdict):
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(100_000):
        a, b = random_quaternion(rng), random_quaternion(rng)
        alpha = rng.uniform()
        q = slerp(a, b, alpha)
        worst = max(worst, abs(angular_distance(a, q) - alpha * angular_distance(a, b)))
    verdict(4, worst < 1e-9, f"max |d(q0, slerp) - alpha d(q0, q1)| = {worst:.2e} rad over 1e5 pairs")


def test_criterion_05_noiseless_tracking(verdict):
    sc = ScenarioConfig(noise=NoiseParams())
    tracker = MarkerTracker(sc.marker_rig, sc.intrinsics)
    tracked, dp, da = 0, [], []
    for k, refl, depth, truth in Renderer(sc, range(500)):
        res = tracker.process(refl, depth, k)
        if res.tracked:
            tracked += 1
            dp.append(np.linalg.norm(res.pose.pose.translation - truth.rig_pose.translation))
            da.append(angular_distance(res.pose.pose.rotation, truth.rig_pose.rotation))
    rms_p = 1000 * math.sqrt(np.mean(np.square(dp)))
    rms_a = math.degrees(math.sqrt(np.mean(np.square(da))))
    ok = tracked == 500 and rms_p < 0.5 and rms_a < 0.1
    verdict(5, ok, f"{tracked}/500 tracked, position rms {rms_p:.3f} mm, angular rms {rms_a:.4f} deg")


def test_criterion_06_static_error_non_gaussian(verdict):
    st = run_static_experiment(ScenarioConfig(noise=STATIC_NOISE))
    p = st.position_normality()
    # the shape verdict is the assertion; the mm level documents the calibration
    verdict(6, p < 0.01, f"Shapiro-Wilk p = {p:.2e} (non-Gaussian required at alpha 0.01), "
                         f"mean abs position {st.mean_abs_position:.2f} mm (target band 1-3 mm)")


@pytest.mark.slow
def test_criterion_07_dynamic_error_gaussian(verdict):
    lines, ok = [], True
    for seed in range(10):
        dyn = run_dynamic_experiment(ScenarioConfig(noise=DYNAMIC_NOISE, seed=seed))
        sta = run_static_experiment(ScenarioConfig(noise=STATIC_NOISE, seed=seed))
        p = dyn.position_normality()
        good = 15.0 <= dyn.mean_abs_position <= 30.0 and p >= 0.01 and dyn.mean_abs_position > sta.mean_abs_position
        ok &= good
        lines.append(f"seed {seed}: dynamic {dyn.mean_abs_position:.1f} mm (p = {p:.3f}), "
                     f"static {sta.mean_abs_position:.2f} mm{'' if good else ' <-- fails'}")
    verdict(7, ok, "10 seeds\n    " + "\n    ".join(lines))


def test_criterion_08_bias_propagation(verdict):
    worst = 0.0
    details = []
    for b in (0.005, 0.020, 0.050):
        st = run_static_experiment(ScenarioConfig(noise=NoiseParams(camera_bias=(b, 0.0, 0.0))),
                                   n_samples=500, n_calibration=300, calibration_noise=NoiseParams())
        rel = abs(st.mean_position_norm - 1000 * b) / (1000 * b)
        worst = max(worst, rel)
        details.append(f"{1000 * b:.0f} mm -> {st.mean_position_norm:.3f} mm")
    verdict(8, worst <= 0.05, ", ".join(details) + f" (worst relative error {100 * worst:.2f}%)")


@pytest.mark.slow
def test_criterion_09_referencing_chain(verdict):
    hits = 0
    worst_t = worst_a = 0.0
    for trial in range(100):
        cell = simulated_cell(seed=trial)
        seed = cell.base @ seed_offset(np.random.default_rng(10_000 + trial))
        res = reference_robot(cell.scene, cell.chain, seed)
        dt = float(np.linalg.norm(res.transform.translation - cell.base.translation))
        da = math.degrees(angular_distance(res.transform.rotation, cell.base.rotation))
        hits += dt < 0.010 and da < 1.0
        worst_t, worst_a = max(worst_t, dt), max(worst_a, da)
    verdict(9, hits >= 95, f"{hits}/100 trials within 10 mm / 1 deg "
                           f"(worst {1000 * worst_t:.1f} mm, {worst_a:.2f} deg)")


def test_criterion_10_throughput(verdict):
    sc = dynamic_run_scenario(ScenarioConfig(noise=DYNAMIC_NOISE), 300, 0, seed=1)
    frames = list(renderer_source(Renderer(sc, range(300))))
    assert frames[0].reflectivity.pixels.shape == (450, 448)
    one = bench(frames, sc.marker_rig, sc.intrinsics, workers=1, n_frames=600)
    two = bench(frames, sc.marker_rig, sc.intrinsics, workers=2, n_frames=600)
    ratio = two.fps / one.fps
    ok = one.fps >= 41.0 and ratio >= 1.6
    verdict(10, ok, f"1 worker {one.fps:.0f} fps, 2 workers {two.fps:.0f} fps, scaling {ratio:.2f}x "
                    f"(needs >= 41 fps and >= 1.6x; {os.cpu_count()} CPU cores available)")


GOLDEN = bytes.fromhex("4952544B" "01" "00" + "00" * 4 + "00" * 8 + "00" * 24
                       + "000000000000F03F" + "00" * 24 + "00" * 4)


def test_criterion_11_wire_protocol(verdict):
    identity = PoseMessage(0, 0, (0.0, 0.0, 0.0), (1.0, 0.0, 0.0, 0.0), 0)
    golden_ok = len(GOLDEN) == MESSAGE_SIZE == 78 and decode_pose(GOLDEN) == identity \
        and encode_pose(decode_pose(GOLDEN)) == GOLDEN
    rng = np.random.default_rng(11)
    seqs = rng.integers(0, 2**32, 100_000)
    stamps = rng.integers(0, 2**63, 100_000)
    pos = rng.normal(scale=10.0, size=(100_000, 3))
    flags = rng.integers(0, 256, 100_000)
    lossless = 0
    for i in range(100_000):
        q = random_quaternion(rng)
        msg = PoseMessage(int(seqs[i]), int(stamps[i]), tuple(pos[i].tolist()), (q.w, q.x, q.y, q.z),
                          int(flags[i]))
        data = encode_pose(msg)
        lossless += decode_pose(data) == msg and encode_pose(decode_pose(data)) == data
    ok = golden_ok and lossless == 100_000
    verdict(11, ok, f"golden fixture {'ok' if golden_ok else 'MISMATCH'}, "
                    f"{lossless}/100000 random round trips lossless")
