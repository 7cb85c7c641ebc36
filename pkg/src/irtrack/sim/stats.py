"""Tracking-error statistics against ground truth."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats as sps

from ..geometry import RigidTransform, angular_distance

MIN_FIT_SAMPLES = 2  # the unbiased standard deviation needs two
HISTOGRAM_BIN_MM = 1.0
# Shapiro-Wilk is specified up to 5000 samples
MAX_NORMALITY_SAMPLES = 5000


class TooFewSamples(ValueError):
    pass


def gaussian_fit(samples) -> tuple[float, float]:
    """(sample median, unbiased sample standard deviation)."""
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < MIN_FIT_SAMPLES:
        raise TooFewSamples(f"need at least {MIN_FIT_SAMPLES} samples, got {x.size}")
    return float(np.median(x)), float(np.std(x, ddof=1))


def pose_errors(
    estimated: RigidTransform, truth: RigidTransform
) -> tuple[np.ndarray, np.ndarray, float]:
    """Signed position error (mm), signed rotation-vector error (deg), angle (deg).

    The rotation error is truth^-1 * estimate expressed as a rotation vector.
    """
    dp = (estimated.translation - truth.translation) * 1000.0
    dq = truth.rotation.conjugate() * estimated.rotation
    drot = np.degrees(dq.to_rotvec())
    return dp, drot, math.degrees(angular_distance(truth.rotation, estimated.rotation))


@dataclass
class Histogram:
    bin_left: np.ndarray  # mm
    counts: np.ndarray
    bin_width: float = HISTOGRAM_BIN_MM

    @classmethod
    def of(cls, samples, bin_width: float = HISTOGRAM_BIN_MM) -> Histogram:
        x = np.asarray(samples, dtype=float).ravel()
        if x.size == 0:
            return cls(np.zeros(0), np.zeros(0, dtype=np.int64), bin_width)
        lo = math.floor(x.min() / bin_width) * bin_width
        n_bins = int(math.floor((x.max() - lo) / bin_width)) + 1
        idx = np.clip(((x - lo) / bin_width).astype(np.int64), 0, n_bins - 1)
        counts = np.bincount(idx, minlength=n_bins)
        return cls(lo + bin_width * np.arange(n_bins), counts, bin_width)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin_left_mm", "count"])
            for left, c in zip(self.bin_left, self.counts):
                w.writerow([f"{left:.6g}", int(c)])


def normality_pvalue(samples, stride: int = 1) -> float:
    """Shapiro-Wilk p-value on every ``stride``-th sample.

    Tracking errors are strongly autocorrelated frame to frame; thinning
    to roughly independent samples keeps the test honest.
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim == 2:
        x = x[::stride].ravel()
    else:
        x = x[::stride]
    if x.size > MAX_NORMALITY_SAMPLES:
        x = x[np.linspace(0, x.size - 1, MAX_NORMALITY_SAMPLES).astype(int)]
    if x.size < 3 or np.ptp(x) == 0.0:
        return 0.0
    return float(sps.shapiro(x).pvalue)


@dataclass
class ErrorStats:
    """Error summary for a set of scored frames.

    Per-sample errors are kept as signed (x, y, z) components: position in
    mm, orientation as a rotation vector in degrees. ``mean_abs_*`` average
    the absolute components; ``mean_*_norm`` average the per-sample
    Euclidean norm / rotation angle.
    """

    position_errors: np.ndarray  # (n, 3) mm
    angle_errors: np.ndarray  # (n, 3) deg
    angle_norms: np.ndarray  # (n,) deg
    n_frames: int = 0  # frames offered for scoring, tracked or not
    normality_stride: int = 1
    runs: list = field(default_factory=list)  # per-run ErrorStats, dynamic only

    @classmethod
    def from_samples(cls, estimated, truth, n_frames: int | None = None,
                     normality_stride: int = 1) -> ErrorStats:
        pos, ang, norms = [], [], []
        for e, g in zip(estimated, truth):
            dp, dr, a = pose_errors(e, g)
            pos.append(dp)
            ang.append(dr)
            norms.append(a)
        n = len(pos)
        return cls(
            np.array(pos).reshape(n, 3),
            np.array(ang).reshape(n, 3),
            np.array(norms),
            n_frames if n_frames is not None else n,
            normality_stride,
        )

    @classmethod
    def concatenate(cls, parts: list[ErrorStats]) -> ErrorStats:
        out = cls(
            np.concatenate([p.position_errors for p in parts]),
            np.concatenate([p.angle_errors for p in parts]),
            np.concatenate([p.angle_norms for p in parts]),
            sum(p.n_frames for p in parts),
            parts[0].normality_stride if parts else 1,
        )
        out.runs = list(parts)
        return out

    @property
    def count(self) -> int:
        return len(self.position_errors)

    @property
    def tracked_fraction(self) -> float:
        return self.count / self.n_frames if self.n_frames else 0.0

    @property
    def mean_abs_position(self) -> float:
        return float(np.mean(np.abs(self.position_errors)))

    @property
    def mean_abs_angle(self) -> float:
        return float(np.mean(np.abs(self.angle_errors)))

    @property
    def mean_position_norm(self) -> float:
        return float(np.mean(np.linalg.norm(self.position_errors, axis=1)))

    @property
    def mean_angle_norm(self) -> float:
        return float(np.mean(self.angle_norms))

    @property
    def rms_position(self) -> float:
        return float(np.sqrt(np.mean(np.sum(self.position_errors**2, axis=1))))

    @property
    def rms_angle(self) -> float:
        return float(np.sqrt(np.mean(self.angle_norms**2)))

    def position_fit(self) -> tuple[float, float]:
        return gaussian_fit(self.position_errors)

    def angle_fit(self) -> tuple[float, float]:
        return gaussian_fit(self.angle_errors)

    def histogram(self, bin_width: float = HISTOGRAM_BIN_MM) -> Histogram:
        return Histogram.of(self.position_errors, bin_width)

    def position_normality(self) -> float:
        """Shapiro-Wilk p-value of the pooled position components."""
        if not self.runs:
            return normality_pvalue(self.position_errors, self.normality_stride)
        pooled = np.concatenate(
            [r.position_errors[:: r.normality_stride].ravel() for r in self.runs]
        )
        return normality_pvalue(pooled)

    def to_dict(self) -> dict:
        d = {
            "count": self.count,
            "n_frames": self.n_frames,
            "mean_abs_position_mm": self.mean_abs_position,
            "mean_abs_angle_deg": self.mean_abs_angle,
            "mean_position_norm_mm": self.mean_position_norm,
            "mean_angle_norm_deg": self.mean_angle_norm,
            "rms_position_mm": self.rms_position,
            "rms_angle_deg": self.rms_angle,
            "position_normality_p": self.position_normality(),
        }
        if self.count >= MIN_FIT_SAMPLES:
            pm, ps = self.position_fit()
            am, as_ = self.angle_fit()
            d["gaussian_fit"] = {
                "position": {"median_mm": pm, "sigma_mm": ps},
                "angle": {"median_deg": am, "sigma_deg": as_},
            }
        h = self.histogram()
        d["histogram"] = {
            "bin_width_mm": h.bin_width,
            "bin_left_mm": h.bin_left.tolist(),
            "counts": h.counts.tolist(),
        }
        if self.runs:
            d["runs"] = [
                {"count": r.count, "mean_abs_position_mm": r.mean_abs_position,
                 "mean_abs_angle_deg": r.mean_abs_angle}
                for r in self.runs
            ]
        return d

    def save(self, path, histogram_csv=None) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))
        if histogram_csv is not None:
            self.histogram().write_csv(histogram_csv)
