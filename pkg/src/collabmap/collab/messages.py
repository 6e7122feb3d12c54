"""Agent/server messages and their length-prefixed binary encoding.

Frame layout: ``<u32 length><u8 tag><payload>`` where length counts the tag
and payload. Integers are little-endian int64, reals little-endian float64.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from ..errors import MalformedMessage
from ..features import FrameView
from ..geometry import Pose


class Tag(IntEnum):
    FRAME = 0
    KEYFRAME = 1
    POSE_UPDATE = 2
    END = 3


@dataclass
class FrameSubmission:
    agent_id: int
    frame: FrameView
    tag = Tag.FRAME


@dataclass
class KeyframeSubmission:
    agent_id: int
    frame: FrameView
    pose: Pose
    landmark_ids: np.ndarray  # per keypoint, -1 when untracked
    landmark_xyz: np.ndarray  # per keypoint, NaN when untracked
    tag = Tag.KEYFRAME

    def __post_init__(self):
        n = len(self.frame.keypoints)
        self.landmark_ids = np.asarray(self.landmark_ids, dtype=np.int64).reshape(n)
        self.landmark_xyz = np.asarray(self.landmark_xyz, dtype=float).reshape(n, 3)


@dataclass
class PoseUpdate:
    frame_id: int
    pose: Pose
    tag = Tag.POSE_UPDATE


@dataclass
class EndOfStream:
    agent_id: int
    tag = Tag.END


AgentMessage = FrameSubmission | KeyframeSubmission | PoseUpdate | EndOfStream

_I = struct.Struct("<q")
_HDR = struct.Struct("<IB")


def _pack_frame(f: FrameView) -> bytes:
    kp = np.ascontiguousarray(f.keypoints, dtype="<f8").reshape(-1, 2)
    return struct.pack("<qqdq", f.frame_id, f.agent_id, f.timestamp, len(kp)) + kp.tobytes()


def _pack_pose(p: Pose) -> bytes:
    return np.ascontiguousarray(p.as_array(), dtype="<f8").tobytes()


def encode(msg) -> bytes:
    if isinstance(msg, FrameSubmission):
        body = _I.pack(msg.agent_id) + _pack_frame(msg.frame)
    elif isinstance(msg, KeyframeSubmission):
        body = (_I.pack(msg.agent_id) + _pack_frame(msg.frame) + _pack_pose(msg.pose)
                + np.ascontiguousarray(msg.landmark_ids, dtype="<i8").tobytes()
                + np.ascontiguousarray(msg.landmark_xyz, dtype="<f8").tobytes())
    elif isinstance(msg, PoseUpdate):
        body = _I.pack(msg.frame_id) + _pack_pose(msg.pose)
    elif isinstance(msg, EndOfStream):
        body = _I.pack(msg.agent_id)
    else:
        raise MalformedMessage(f"cannot encode {type(msg).__name__}")
    return _HDR.pack(len(body) + 1, int(msg.tag)) + body


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.buf):
            raise MalformedMessage("truncated payload")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def i64(self) -> int:
        return _I.unpack(self.take(8))[0]

    def f64s(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(float)

    def frame(self) -> FrameView:
        fid, aid, t, n = struct.unpack("<qqdq", self.take(32))
        if n < 0:
            raise MalformedMessage("negative keypoint count")
        kp = self.f64s(2 * n).reshape(n, 2)
        return FrameView(fid, aid, t, kp)

    def pose(self) -> Pose:
        v = self.f64s(7)
        if not np.all(np.isfinite(v)) or np.linalg.norm(v[:4]) == 0:
            raise MalformedMessage("invalid pose")
        return Pose(v[:4], v[4:])


def decode(data: bytes):
    """Decode exactly one framed message."""
    if len(data) < _HDR.size:
        raise MalformedMessage("short header")
    length, tag = _HDR.unpack_from(data)
    if length != len(data) - 4:
        raise MalformedMessage(f"length prefix {length} does not match {len(data) - 4} bytes")
    r = _Reader(bytes(data[_HDR.size:]))
    try:
        tag = Tag(tag)
    except ValueError:
        raise MalformedMessage(f"unknown tag {tag}") from None
    if tag is Tag.FRAME:
        msg = FrameSubmission(r.i64(), r.frame())
    elif tag is Tag.KEYFRAME:
        aid = r.i64()
        f = r.frame()
        pose = r.pose()
        n = len(f.keypoints)
        ids = np.frombuffer(r.take(8 * n), dtype="<i8").astype(np.int64)
        xyz = r.f64s(3 * n).reshape(n, 3)
        msg = KeyframeSubmission(aid, f, pose, ids, xyz)
    elif tag is Tag.POSE_UPDATE:
        msg = PoseUpdate(r.i64(), r.pose())
    else:
        msg = EndOfStream(r.i64())
    if r.pos != len(r.buf):
        raise MalformedMessage("trailing bytes in message")
    return msg


def iter_messages(stream: bytes):
    """Split a byte stream of framed messages."""
    pos = 0
    while pos < len(stream):
        if pos + 4 > len(stream):
            raise MalformedMessage("truncated length prefix")
        (length,) = struct.unpack_from("<I", stream, pos)
        end = pos + 4 + length
        if end > len(stream):
            raise MalformedMessage("truncated message")
        yield decode(stream[pos:end])
        pos = end
