"""Blob centroids + depth -> camera-frame marker points (pinhole model)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .frames import Blob, CameraIntrinsics, DepthFrame

SHORT_THROW_RANGE = (0.2, 1.0)


class NoValidDepth(ValueError):
    pass


class NonPositiveDepth(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DetectionSet:
    points: np.ndarray  # (N, 3) camera frame, meters
    source_timestamp: int = 0
    blob_indices: tuple[int, ...] = field(default=())

    def __len__(self) -> int:
        return len(self.points)


def depth_lookup(
    depth: DepthFrame | np.ndarray,
    u: float,
    v: float,
    median: bool = True,
    valid_range: tuple[float, float] = SHORT_THROW_RANGE,
) -> float:
    """Depth at a sub-pixel location.

    Median of the valid entries in the 3x3 neighbourhood of the rounded pixel;
    an entry is valid when it lies inside ``valid_range`` (zeros mark missing
    returns, far outliers are speckle). With an even count the two middle
    values are averaged. ``median=False`` reads the single center pixel.
    """
    d = depth.depths if isinstance(depth, DepthFrame) else depth
    lo, hi = valid_range
    h, w = d.shape
    c, r = int(round(u)), int(round(v))
    if not (0 <= c < w and 0 <= r < h):
        raise NoValidDepth(f"pixel ({u:.1f}, {v:.1f}) outside the depth frame")
    if not median:
        z = float(d[r, c])
        if not (z > 0.0 and lo <= z <= hi):
            raise NoValidDepth(f"invalid depth at ({c}, {r})")
        return z
    patch = d[max(r - 1, 0) : r + 2, max(c - 1, 0) : c + 2]
    valid = patch[(patch > 0) & (patch >= lo) & (patch <= hi)]
    if valid.size == 0:
        raise NoValidDepth(f"no valid depth around ({c}, {r})")
    return float(np.median(valid))


def backproject(blob: Blob, Z: float, intrinsics: CameraIntrinsics) -> np.ndarray:
    """(Z*x/f, Z*y/f, Z) with x, y measured from the principal point."""
    if not Z > 0:
        raise NonPositiveDepth(f"depth must be positive, got {Z}")
    x = blob.centroid_x - intrinsics.cx
    y = blob.centroid_y - intrinsics.cy
    return np.array([Z * x / intrinsics.f, Z * y / intrinsics.f, Z])


def build_detection_set(
    blobs: list[Blob],
    depth: DepthFrame,
    intrinsics: CameraIntrinsics,
    median: bool = True,
    depth_range: tuple[float, float] = SHORT_THROW_RANGE,
) -> DetectionSet:
    """One point per blob with usable depth; blobs without depth are dropped."""
    pts, kept = [], []
    for i, b in enumerate(blobs):
        try:
            z = depth_lookup(depth, b.centroid_x, b.centroid_y, median, depth_range)
        except NoValidDepth:
            continue
        pts.append(backproject(b, z, intrinsics))
        kept.append(i)
    points = np.array(pts) if pts else np.zeros((0, 3))
    return DetectionSet(points, int(depth.timestamp), tuple(kept))
