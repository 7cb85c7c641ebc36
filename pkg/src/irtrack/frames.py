"""Reflectivity / depth frames and the 2D half of the marker detector.

Pixel coordinates: ``u`` is the column, ``v`` the row, and pixel centers sit
on integer coordinates.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import ndimage

from .geometry import RigidTransform

THRESHOLD = 250
MIN_BLOB_AREA = 2
ROI_MIN_MARGIN = 24.0
ROI_MARGIN_FRACTION = 0.2

_FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)


class EmptyHistory(ValueError):
    """No previous blobs to predict a region of interest from."""


class FrameFormatError(ValueError):
    """A frame file or index entry could not be parsed."""


@dataclass(frozen=True)
class CameraIntrinsics:
    f: float
    cx: float
    cy: float
    width: int
    height: int
    k1: float = 0.0
    k2: float = 0.0
    p1: float = 0.0
    p2: float = 0.0

    def __post_init__(self) -> None:
        if not self.f > 0:
            raise ValueError("focal length must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the frame")

    @property
    def has_distortion(self) -> bool:
        return any((self.k1, self.k2, self.p1, self.p2))

    def project(self, p_cam: np.ndarray) -> np.ndarray:
        """Ideal (undistorted) pixel coordinates of camera-frame points."""
        p = np.atleast_2d(np.asarray(p_cam, dtype=float))
        return np.column_stack(
            [self.f * p[:, 0] / p[:, 2] + self.cx, self.f * p[:, 1] / p[:, 2] + self.cy]
        )

    def distort_pixels(self, u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Forward Brown-Conrady model: ideal pixel -> raw (distorted) pixel."""
        x = (np.asarray(u, dtype=float) - self.cx) / self.f
        y = (np.asarray(v, dtype=float) - self.cy) / self.f
        r2 = x * x + y * y
        radial = 1.0 + self.k1 * r2 + self.k2 * r2 * r2
        xd = x * radial + 2.0 * self.p1 * x * y + self.p2 * (r2 + 2.0 * x * x)
        yd = y * radial + self.p1 * (r2 + 2.0 * y * y) + 2.0 * self.p2 * x * y
        return xd * self.f + self.cx, yd * self.f + self.cy

    def undistort_pixels(
        self, ud: np.ndarray, vd: np.ndarray, iterations: int = 20
    ) -> tuple[np.ndarray, np.ndarray]:
        """Invert :meth:`distort_pixels` by fixed-point iteration."""
        xd = (np.asarray(ud, dtype=float) - self.cx) / self.f
        yd = (np.asarray(vd, dtype=float) - self.cy) / self.f
        x, y = xd.copy(), yd.copy()
        for _ in range(iterations):
            r2 = x * x + y * y
            radial = 1.0 + self.k1 * r2 + self.k2 * r2 * r2
            dx = 2.0 * self.p1 * x * y + self.p2 * (r2 + 2.0 * x * x)
            dy = self.p1 * (r2 + 2.0 * y * y) + 2.0 * self.p2 * x * y
            x = (xd - dx) / radial
            y = (yd - dy) / radial
        return x * self.f + self.cx, y * self.f + self.cy

    def to_dict(self) -> dict:
        return {
            "f": self.f, "cx": self.cx, "cy": self.cy,
            "k1": self.k1, "k2": self.k2, "p1": self.p1, "p2": self.p2,
            "width": self.width, "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> CameraIntrinsics:
        return cls(
            f=float(d["f"]), cx=float(d["cx"]), cy=float(d["cy"]),
            width=int(d["width"]), height=int(d["height"]),
            k1=float(d.get("k1", 0.0)), k2=float(d.get("k2", 0.0)),
            p1=float(d.get("p1", 0.0)), p2=float(d.get("p2", 0.0)),
        )

    @classmethod
    def load(cls, path) -> CameraIntrinsics:
        return cls.from_dict(json.loads(Path(path).read_text()))


def default_intrinsics() -> CameraIntrinsics:
    """Synthetic short-throw camera: 448x450 pixels, ~58 deg horizontal FOV."""
    return CameraIntrinsics(f=400.0, cx=223.5, cy=224.5, width=448, height=450)


@dataclass(frozen=True, eq=False)
class ReflectivityFrame:
    pixels: np.ndarray  # (height, width) uint8
    timestamp: int = 0  # microseconds
    camera_pose: RigidTransform = field(default_factory=RigidTransform.identity)

    def __post_init__(self) -> None:
        if self.pixels.ndim != 2 or self.pixels.dtype != np.uint8:
            raise ValueError("reflectivity pixels must be a 2D uint8 array")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True, eq=False)
class DepthFrame:
    depths: np.ndarray  # (height, width) meters, 0 = invalid
    timestamp: int = 0
    camera_pose: RigidTransform = field(default_factory=RigidTransform.identity)

    def __post_init__(self) -> None:
        if self.depths.ndim != 2:
            raise ValueError("depths must be a 2D array")

    @property
    def width(self) -> int:
        return self.depths.shape[1]

    @property
    def height(self) -> int:
        return self.depths.shape[0]


@dataclass(frozen=True)
class Blob:
    centroid_x: float
    centroid_y: float
    area: int


@dataclass(frozen=True)
class RegionOfInterest:
    """Inclusive pixel bounds in full-resolution coordinates."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self) -> None:
        if self.x_max < self.x_min or self.y_max < self.y_min:
            raise ValueError("empty region of interest")

    @classmethod
    def full(cls, width: int, height: int) -> RegionOfInterest:
        return cls(0, 0, width - 1, height - 1)


# -- undistortion ---------------------------------------------------------


@lru_cache(maxsize=8)
def _undistort_map(intr: CameraIntrinsics):
    v, u = np.mgrid[0 : intr.height, 0 : intr.width].astype(float)
    ud, vd = intr.distort_pixels(u, v)
    x0 = np.floor(ud)
    y0 = np.floor(vd)
    fx = ud - x0
    fy = vd - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    w, h = intr.width, intr.height
    idx, wts = [], []
    for dy, dx, wt in ((0, 0, (1 - fx) * (1 - fy)), (0, 1, fx * (1 - fy)),
                       (1, 0, (1 - fx) * fy), (1, 1, fx * fy)):
        xi, yi = x0 + dx, y0 + dy
        inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        idx.append(np.where(inside, yi * w + xi, 0).ravel())
        wts.append(np.where(inside, wt, 0.0).ravel().astype(np.float32))
    return np.stack(idx), np.stack(wts)


def undistort(pixels: np.ndarray, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Resample a raw 8-bit frame onto the ideal pinhole grid (bilinear).

    Each output pixel pulls from the raw image at its forward-distorted
    location. With all coefficients zero the input is returned unchanged.
    """
    if not intrinsics.has_distortion:
        return pixels
    if pixels.shape != (intrinsics.height, intrinsics.width):
        raise ValueError("frame size does not match intrinsics")
    idx, wts = _undistort_map(intrinsics)
    flat = pixels.ravel().astype(np.float32)
    out = (flat[idx] * wts).sum(axis=0)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8).reshape(pixels.shape)


# -- threshold / pooling / blobs -------------------------------------------


def threshold(pixels: np.ndarray, cutoff: int = THRESHOLD) -> np.ndarray:
    return pixels > cutoff


def downsample_half(mask: np.ndarray) -> np.ndarray:
    """2x2 OR-pooling; output shape is ceil(shape / 2)."""
    h, w = mask.shape
    if h % 2 or w % 2:
        padded = np.zeros((h + h % 2, w + w % 2), dtype=bool)
        padded[:h, :w] = mask
        mask = padded
    H, W = mask.shape
    return mask.reshape(H // 2, 2, W // 2, 2).any(axis=(1, 3))


def _half_window(roi: RegionOfInterest | None, half_shape) -> tuple[int, int, int, int]:
    hh, hw = half_shape
    if roi is None:
        return 0, 0, hw, hh
    x0 = max(roi.x_min // 2, 0)
    y0 = max(roi.y_min // 2, 0)
    x1 = min(roi.x_max // 2 + 1, hw)
    y1 = min(roi.y_max // 2 + 1, hh)
    return x0, y0, x1, y1


def _label(half: np.ndarray, window, min_area: int):
    x0, y0, x1, y1 = window
    sub = half[y0:y1, x0:x1]
    labels, n = ndimage.label(sub, structure=_FOUR_CONNECTED)
    if n == 0:
        return labels, np.zeros(0, dtype=np.int64), np.zeros(0, dtype=bool)
    area = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    keep = area >= min_area
    return labels, area, keep


def detect_blobs(
    mask: np.ndarray, roi: RegionOfInterest | None = None, min_area: int = MIN_BLOB_AREA
) -> list[Blob]:
    """Connected components (4-connectivity) of a half-resolution mask.

    ``roi`` is given in full-resolution pixels. Centroids are the unweighted
    mean of member pixel coordinates scaled by 2 into full resolution; areas
    are half-resolution pixel counts.
    """
    window = _half_window(roi, mask.shape)
    labels, area, keep = _label(mask, window, min_area)
    if not keep.any():
        return []
    n = len(area)
    rows, cols = np.indices(labels.shape)
    flat = labels.ravel()
    sx = np.bincount(flat, weights=cols.ravel(), minlength=n + 1)[1:]
    sy = np.bincount(flat, weights=rows.ravel(), minlength=n + 1)[1:]
    x0, y0 = window[0], window[1]
    return [
        Blob(2.0 * (x0 + sx[k] / area[k]), 2.0 * (y0 + sy[k] / area[k]), int(area[k]))
        for k in range(n)
        if keep[k]
    ]


@dataclass
class MarkerScan:
    blobs: list[Blob]
    touches_border: bool


def find_markers(
    mask: np.ndarray, roi: RegionOfInterest | None = None, min_area: int = MIN_BLOB_AREA
) -> MarkerScan:
    """Detect blobs on the halved mask, then take centroids at full resolution.

    Components are found on the OR-pooled mask exactly as in
    :func:`detect_blobs`; each centroid is then the mean of the full-resolution
    mask pixels covered by that component, which removes the half-pixel
    quantization of the pooled grid. ``touches_border`` reports components
    cut by an ROI edge that is not also a frame edge.
    """
    H, W = mask.shape
    hh, hw = (H + 1) // 2, (W + 1) // 2
    x0, y0, x1, y1 = _half_window(roi, (hh, hw))
    fy0, fx0 = 2 * y0, 2 * x0
    fy1, fx1 = min(2 * y1, H), min(2 * x1, W)
    sub = mask[fy0:fy1, fx0:fx1]
    # pooling the crop is identical to cropping the pooled frame: the crop is 2-aligned
    labels, area, keep = _label(downsample_half(sub), (0, 0, x1 - x0, y1 - y0), min_area)
    touches = False
    if roi is not None and keep.any():
        edge = []
        if x0 > 0:
            edge.append(labels[:, 0])
        if y0 > 0:
            edge.append(labels[0, :])
        if x1 < hw:
            edge.append(labels[:, -1])
        if y1 < hh:
            edge.append(labels[-1, :])
        if edge:
            hit = np.unique(np.concatenate(edge))
            hit = hit[hit > 0]
            touches = bool(np.any(keep[hit - 1]))
    if not keep.any():
        return MarkerScan([], touches)
    n = len(area)
    rows, cols = np.nonzero(sub)
    lab = labels[rows // 2, cols // 2]
    cnt = np.bincount(lab, minlength=n + 1)[1:]
    # frame coordinates, so sums (exact in float64) do not depend on the window
    sx = np.bincount(lab, weights=cols + fx0, minlength=n + 1)[1:]
    sy = np.bincount(lab, weights=rows + fy0, minlength=n + 1)[1:]
    blobs = [
        Blob(sx[k] / cnt[k], sy[k] / cnt[k], int(area[k]))
        for k in range(n)
        if keep[k]
    ]
    return MarkerScan(blobs, touches)


def predict_roi(previous_blobs: list[Blob], width: int, height: int) -> RegionOfInterest:
    """Bounding box of the previous centroids grown by max(20% diagonal, 24 px)."""
    if not previous_blobs:
        raise EmptyHistory("no blobs in the previous frame")
    xs = np.array([b.centroid_x for b in previous_blobs])
    ys = np.array([b.centroid_y for b in previous_blobs])
    bx0, bx1, by0, by1 = xs.min(), xs.max(), ys.min(), ys.max()
    margin = max(ROI_MARGIN_FRACTION * math.hypot(bx1 - bx0, by1 - by0), ROI_MIN_MARGIN)
    return RegionOfInterest(
        int(max(math.floor(bx0 - margin), 0)),
        int(max(math.floor(by0 - margin), 0)),
        int(min(math.ceil(bx1 + margin), width - 1)),
        int(min(math.ceil(by1 + margin), height - 1)),
    )


# -- PGM + JSON-lines frame directories ------------------------------------


def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.dtype == np.uint8:
        maxval, payload = 255, image.tobytes()
    elif image.dtype == np.uint16:
        maxval, payload = 65535, image.astype(">u2").tobytes()
    else:
        raise ValueError(f"unsupported PGM dtype {image.dtype}")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(payload)


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FrameFormatError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval
    if tokens[0] != b"P5":
        raise FrameFormatError(f"{path}: not a binary PGM (P5)")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FrameFormatError(f"{path}: bad PGM header") from exc
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    count = w * h
    itemsize = np.dtype(dtype).itemsize
    if len(data) - pos < count * itemsize:
        raise FrameFormatError(f"{path}: truncated PGM payload")
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=pos).reshape(h, w)
    return arr.astype(np.uint8 if maxval < 256 else np.uint16)


def depth_to_mm(depths: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(depths * 1000.0), 0, 65535).astype(np.uint16)


@dataclass(frozen=True)
class FrameRecord:
    """One line of a frame directory's ``index.jsonl``."""

    frame_index: int
    timestamp: int
    camera_pose: tuple[float, ...]
    reflectivity: str
    depth: str

    def to_json(self) -> str:
        return json.dumps(
            {
                "frame_index": self.frame_index,
                "timestamp_us": self.timestamp,
                "camera_pose": list(self.camera_pose),
                "reflectivity": self.reflectivity,
                "depth": self.depth,
            }
        )

    @classmethod
    def from_json(cls, line: str) -> FrameRecord:
        try:
            d = json.loads(line)
            pose = tuple(float(v) for v in d["camera_pose"])
            if len(pose) != 7:
                raise ValueError("camera_pose needs 7 numbers")
            return cls(int(d["frame_index"]), int(d["timestamp_us"]), pose,
                       str(d["reflectivity"]), str(d["depth"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise FrameFormatError(f"bad index entry: {line.strip()[:80]}") from exc


INDEX_NAME = "index.jsonl"


def write_frame_pair(
    directory, index: int, refl: ReflectivityFrame, depth: DepthFrame
) -> FrameRecord:
    directory = Path(directory)
    rec = FrameRecord(
        index,
        int(refl.timestamp),
        tuple(refl.camera_pose.to_pose7()),
        f"refl_{index:06d}.pgm",
        f"depth_{index:06d}.pgm",
    )
    write_pgm(directory / rec.reflectivity, refl.pixels)
    write_pgm(directory / rec.depth, depth_to_mm(depth.depths))
    return rec


def load_frame_pair(directory, rec: FrameRecord) -> tuple[ReflectivityFrame, DepthFrame]:
    directory = Path(directory)
    pose = RigidTransform.from_pose7(rec.camera_pose)
    pixels = read_pgm(directory / rec.reflectivity)
    mm = read_pgm(directory / rec.depth)
    if pixels.dtype != np.uint8 or mm.dtype != np.uint16:
        raise FrameFormatError(f"frame {rec.frame_index}: expected 8-bit and 16-bit PGMs")
    if pixels.shape != mm.shape:
        raise FrameFormatError(f"frame {rec.frame_index}: reflectivity/depth size mismatch")
    depths = mm.astype(np.float64) / 1000.0
    return (
        ReflectivityFrame(pixels, rec.timestamp, pose),
        DepthFrame(depths, rec.timestamp, pose),
    )


def read_index(directory) -> list[FrameRecord]:
    path = Path(directory) / INDEX_NAME
    if not path.exists():
        raise FrameFormatError(f"missing {path}")
    return [FrameRecord.from_json(line) for line in path.read_text().splitlines() if line.strip()]
