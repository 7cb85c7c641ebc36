"""Marker identification by pairwise-distance consistency.

Two inter-marker distances are considered equal when they differ by less
than ``delta``. An assignment maps detections injectively onto model
markers; it is consistent when every pair of matched detections agrees with
the distance between the model markers it was assigned to. The matcher
returns the consistent assignment with the most matched detections and, among
those, the smallest summed distance discrepancy.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_DELTA = 0.005
AMBIGUITY_TOL = 1e-9


class TooFewPoints(ValueError):
    pass


class NoConsistentAssignment(ValueError):
    pass


class AmbiguousAssignment(NoConsistentAssignment):
    """Two best assignments are indistinguishable by residual."""


def distance_matrix(points) -> np.ndarray:
    p = np.asarray(points, dtype=float)
    if p.ndim != 2 or len(p) < 2:
        raise TooFewPoints("need at least two points")
    diff = p[:, None, :] - p[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


@dataclass(frozen=True, eq=False)
class MarkerModel:
    points: np.ndarray
    delta: float | None = None

    def __post_init__(self) -> None:
        pts = np.array(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 3:
            raise ValueError("a marker model needs at least 3 points in 3D")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        D = distance_matrix(pts)
        D.setflags(write=False)
        object.__setattr__(self, "distance_matrix", D)
        gap = self.min_distance_gap()
        sep = 2 * (self.delta or DEFAULT_DELTA)
        if gap <= sep:
            warnings.warn(
                f"marker model distances are only {gap * 1000:.1f} mm apart "
                f"(recommended > {sep * 1000:.1f} mm); matching may be ambiguous",
                stacklevel=2,
            )

    def __len__(self) -> int:
        return len(self.points)

    def min_distance_gap(self) -> float:
        iu = np.triu_indices(len(self.points), 1)
        d = np.sort(self.distance_matrix[iu])  # type: ignore[attr-defined]
        return float(np.min(np.diff(d))) if len(d) > 1 else float("inf")

    def to_dict(self) -> dict:
        out: dict = {"points": self.points.tolist()}
        if self.delta is not None:
            out["delta"] = self.delta
        return out

    @classmethod
    def from_json_obj(cls, obj) -> MarkerModel:
        if isinstance(obj, dict):
            return cls(obj["points"], obj.get("delta"))
        return cls(obj)

    @classmethod
    def load(cls, path) -> MarkerModel:
        return cls.from_json_obj(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class MatchConfig:
    delta: float = DEFAULT_DELTA
    min_matched: int = 3

    def __post_init__(self) -> None:
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        if self.min_matched < 3:
            raise ValueError("min_matched must be at least 3")


@dataclass(frozen=True)
class CorrespondenceSet:
    pairs: tuple[tuple[int, int], ...]  # (detection_index, model_index)
    residual: float

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def detection_indices(self) -> list[int]:
        return [p for p, _ in self.pairs]

    @property
    def model_indices(self) -> list[int]:
        return [i for _, i in self.pairs]


class _Search:
    """Branch-and-bound over detections; each detection is assigned a model
    marker or left unmatched. Tracks the best and runner-up residual at the
    best cardinality so ties can be reported as ambiguous."""

    def __init__(self, D_R: np.ndarray, D_M: np.ndarray, delta: float):
        self.n = len(D_R)
        self.m = len(D_M)
        # err[p, q, i, j] = |D_R[p, q] - D_M[i, j]|
        self.err = np.abs(D_R[:, :, None, None] - D_M[None, None, :, :])
        self.ok = self.err < delta
        self.best_count = 0
        self.best_res = np.inf
        self.best: tuple[tuple[int, int], ...] = ()
        self.second_res = np.inf
        self.assign: list[tuple[int, int]] = []
        self.used = [False] * self.m

    def _record(self, residual: float) -> None:
        count = len(self.assign)
        if count > self.best_count:
            self.best_count, self.best_res = count, residual
            self.best = tuple(self.assign)
            self.second_res = np.inf
        elif count == self.best_count:
            if residual < self.best_res:
                self.second_res = self.best_res
                self.best_res, self.best = residual, tuple(self.assign)
            elif residual < self.second_res:
                self.second_res = residual

    def run(self) -> None:
        self._visit(0, 0.0)

    def _visit(self, p: int, residual: float) -> None:
        count = len(self.assign)
        remaining = self.n - p
        reachable = count + min(remaining, self.m - count)
        if reachable < self.best_count:
            return
        if reachable == self.best_count and residual > self.second_res + AMBIGUITY_TOL:
            return
        if p == self.n:
            self._record(residual)
            return
        for i in range(self.m):
            if self.used[i]:
                continue
            extra = 0.0
            for q, j in self.assign:
                if not self.ok[p, q, i, j]:
                    break
                extra += self.err[p, q, i, j]
            else:
                self.used[i] = True
                self.assign.append((p, i))
                self._visit(p + 1, residual + extra)
                self.assign.pop()
                self.used[i] = False
        self._visit(p + 1, residual)


def match(D_R, D_M, config: MatchConfig | None = None) -> CorrespondenceSet:
    """Maximum-cardinality, minimum-residual distance-consistent assignment.

    Raises NoConsistentAssignment when fewer than ``min_matched`` detections
    can be matched, and AmbiguousAssignment when the two best assignments of
    maximal size have residuals within 1e-9 of each other.
    """
    config = config or MatchConfig()
    D_R = np.asarray(D_R, dtype=float)
    D_M = np.asarray(D_M, dtype=float)
    if len(D_R) < config.min_matched:
        raise NoConsistentAssignment(
            f"{len(D_R)} detections, need at least {config.min_matched}"
        )
    search = _Search(D_R, D_M, config.delta)
    search.run()
    if search.best_count < config.min_matched:
        raise NoConsistentAssignment(
            f"best consistent assignment matches {search.best_count} markers"
        )
    if search.second_res - search.best_res <= AMBIGUITY_TOL:
        raise AmbiguousAssignment(
            f"{search.best_count}-marker assignments tie at residual {search.best_res:.3g}"
        )
    return CorrespondenceSet(search.best, float(search.best_res))
