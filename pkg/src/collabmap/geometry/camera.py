"""Pinhole camera model and SE(3) poses (camera-from-world convention)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def in_bounds(self, uv: np.ndarray) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        return (uv[..., 0] >= 0) & (uv[..., 0] < self.width) & (uv[..., 1] >= 0) & (uv[..., 1] < self.height)

    def normalize(self, uv: np.ndarray) -> np.ndarray:
        """Pixels -> normalized image coordinates (x/z, y/z)."""
        uv = np.asarray(uv, dtype=float)
        return np.stack([(uv[..., 0] - self.cx) / self.fx, (uv[..., 1] - self.cy) / self.fy], axis=-1)

    def bearings(self, uv: np.ndarray) -> np.ndarray:
        """Unit viewing rays in the camera frame."""
        xy = self.normalize(uv)
        rays = np.concatenate([xy, np.ones(xy.shape[:-1] + (1,))], axis=-1)
        return rays / np.linalg.norm(rays, axis=-1, keepdims=True)


class Pose:
    """Rigid transform mapping world coordinates into the camera frame.

    ``rotation`` is a unit quaternion in (w, x, y, z) order, kept with w >= 0.
    """

    __slots__ = ("rotation", "translation", "_R")

    def __init__(self, rotation=(1.0, 0.0, 0.0, 0.0), translation=(0.0, 0.0, 0.0)):
        q = np.asarray(rotation, dtype=float).reshape(4)
        n = np.linalg.norm(q)
        if abs(n - 1.0) > 4 * np.finfo(float).eps:  # leave unit inputs bit-exact
            q = q / n
        if q[0] < 0:
            q = -q
        self.rotation = q
        self.translation = np.asarray(translation, dtype=float).reshape(3).copy()
        self._R = None

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_Rt(cls, R, t) -> "Pose":
        q = Rotation.from_matrix(np.asarray(R, dtype=float)).as_quat(scalar_first=True)
        pose = cls(q, t)
        return pose

    @classmethod
    def from_rotvec(cls, rotvec, t) -> "Pose":
        return cls(Rotation.from_rotvec(np.asarray(rotvec, dtype=float)).as_quat(scalar_first=True), t)

    @classmethod
    def from_center(cls, R, center) -> "Pose":
        """Pose with camera-from-world rotation ``R`` located at world point ``center``."""
        R = np.asarray(R, dtype=float)
        return cls.from_Rt(R, -R @ np.asarray(center, dtype=float))

    @property
    def R(self) -> np.ndarray:
        if self._R is None:
            self._R = Rotation.from_quat(self.rotation, scalar_first=True).as_matrix()
        return self._R

    @property
    def t(self) -> np.ndarray:
        return self.translation

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.translation

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    def transform(self, points: np.ndarray) -> np.ndarray:
        """World points (..., 3) -> camera-frame points."""
        return np.asarray(points, dtype=float) @ self.R.T + self.translation

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first, then ``self``."""
        R = self.R @ other.R
        return Pose.from_Rt(R, self.R @ other.translation + self.translation)

    def __matmul__(self, other: "Pose") -> "Pose":
        return self.compose(other)

    def inverse(self) -> "Pose":
        Rt = self.R.T
        return Pose.from_Rt(Rt, -Rt @ self.translation)

    def rotation_angle_to(self, other: "Pose") -> float:
        """Geodesic angle (radians) between two rotations."""
        c = (np.trace(self.R.T @ other.R) - 1.0) / 2.0
        return float(np.arccos(np.clip(c, -1.0, 1.0)))

    def copy(self) -> "Pose":
        return Pose(self.rotation, self.translation)

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.rotation, self.translation])

    def __repr__(self):
        q = np.array2string(self.rotation, precision=6)
        t = np.array2string(self.translation, precision=6)
        return f"Pose(q={q}, t={t})"

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(self.translation, other.translation)

    __hash__ = None


def project(point, pose: Pose, K: CameraIntrinsics):
    """Pinhole projection of one world point; ``None`` when it lies behind the camera."""
    Xc = pose.transform(np.asarray(point, dtype=float))
    if not Xc[2] > 0:
        return None
    return np.array([K.fx * Xc[0] / Xc[2] + K.cx, K.fy * Xc[1] / Xc[2] + K.cy])


def project_points(points: np.ndarray, pose: Pose, K: CameraIntrinsics):
    """Vectorized projection. Returns (uv, depth); uv is NaN where depth <= 0."""
    Xc = pose.transform(points)
    z = Xc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.stack([K.fx * Xc[..., 0] / z + K.cx, K.fy * Xc[..., 1] / z + K.cy], axis=-1)
    uv[z <= 0] = np.nan
    return uv, z


def backproject(pixel, depth: float, pose: Pose, K: CameraIntrinsics) -> np.ndarray:
    """World point at camera-frame depth ``depth`` along the ray of ``pixel``."""
    xy = K.normalize(pixel)
    Xc = np.array([xy[0] * depth, xy[1] * depth, depth])
    return pose.R.T @ (Xc - pose.translation)


def heading_pitch_rotation(heading: float, pitch: float) -> np.ndarray:
    """Camera-from-world rotation for a camera with horizontal ``heading`` and ``pitch``.

    Angles in radians; world z is up, heading 0 looks along +x, pitch -pi/2 is nadir.
    Image x points to the right of the heading, image y towards the rear/ground.
    """
    fwd = np.array([np.cos(heading), np.sin(heading), 0.0])
    up = np.array([0.0, 0.0, 1.0])
    z = np.cos(pitch) * fwd + np.sin(pitch) * up
    x = np.cross(fwd, up)
    y = np.cross(z, x)
    return np.stack([x, y / np.linalg.norm(y), z / np.linalg.norm(z)], axis=0)


def skew(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out
