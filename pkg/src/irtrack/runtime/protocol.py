"""Fixed-size binary pose messages.

Layout (little-endian, 78 bytes)::

    0   4s  magic "IRTK"
    4   B   version (1)
    5   B   flags: bit0 predicted, bit1 stale
    6   I   sequence
    10  Q   timestamp, microseconds
    18  3d  position x, y, z (m)
    42  4d  quaternion w, x, y, z
    74  4x  reserved, zero on encode, ignored on decode
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

from ..interpolation import PoseSource, TimedPose

MAGIC = b"IRTK"
VERSION = 1
FLAG_PREDICTED = 0x01
FLAG_STALE = 0x02
UNIT_TOL = 1e-6

_LAYOUT = struct.Struct("<4sBBIQ3d4d4x")
MESSAGE_SIZE = _LAYOUT.size
assert MESSAGE_SIZE == 78


class ProtocolError(ValueError):
    pass


class BadMagic(ProtocolError):
    pass


class BadVersion(ProtocolError):
    pass


class NonUnitQuaternion(ProtocolError):
    pass


class Truncated(ProtocolError):
    pass


@dataclass(frozen=True)
class PoseMessage:
    sequence: int
    timestamp_us: int
    position: tuple[float, float, float]
    quaternion: tuple[float, float, float, float]  # w, x, y, z
    flags: int = 0

    @property
    def predicted(self) -> bool:
        return bool(self.flags & FLAG_PREDICTED)

    @property
    def stale(self) -> bool:
        return bool(self.flags & FLAG_STALE)

    @classmethod
    def from_timed_pose(cls, sequence: int, tp: TimedPose, stale: bool = False) -> PoseMessage:
        flags = FLAG_PREDICTED if tp.source is PoseSource.PREDICTED else 0
        if stale:
            flags |= FLAG_STALE
        q = tp.pose.rotation
        return cls(sequence, int(tp.timestamp), tuple(float(v) for v in tp.pose.translation),
                   (q.w, q.x, q.y, q.z), flags)


def _check_unit(q) -> None:
    n = math.sqrt(sum(v * v for v in q))
    if not abs(n - 1.0) <= UNIT_TOL:
        raise NonUnitQuaternion(f"quaternion norm {n!r}")


def encode_pose(msg: PoseMessage) -> bytes:
    if not 0 <= msg.sequence < 2**32:
        raise ValueError("sequence out of unsigned 32-bit range")
    if not 0 <= msg.timestamp_us < 2**64:
        raise ValueError("timestamp out of unsigned 64-bit range")
    if not 0 <= msg.flags < 256:
        raise ValueError("flags out of byte range")
    _check_unit(msg.quaternion)
    return _LAYOUT.pack(MAGIC, VERSION, msg.flags, msg.sequence, msg.timestamp_us,
                        *msg.position, *msg.quaternion)


def decode_pose(data: bytes) -> PoseMessage:
    if len(data) < MESSAGE_SIZE:
        raise Truncated(f"{len(data)} bytes, need {MESSAGE_SIZE}")
    magic, version, flags, seq, ts, px, py, pz, qw, qx, qy, qz = _LAYOUT.unpack_from(data)
    if magic != MAGIC:
        raise BadMagic(repr(magic))
    if version != VERSION:
        raise BadVersion(str(version))
    q = (qw, qx, qy, qz)
    _check_unit(q)
    return PoseMessage(seq, ts, (px, py, pz), q, flags)


def split_stream(buffer: bytes) -> tuple[list[PoseMessage], bytes]:
    """Decode back-to-back records; returns the messages and the unconsumed tail."""
    n = len(buffer) // MESSAGE_SIZE
    msgs = [decode_pose(buffer[i * MESSAGE_SIZE : (i + 1) * MESSAGE_SIZE]) for i in range(n)]
    return msgs, buffer[n * MESSAGE_SIZE :]
