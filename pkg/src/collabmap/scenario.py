"""Synthetic worlds, flight plans and mission sampling.

World frame: x east, y north, z up. Heading 0 flies along +x, headings grow
counter-clockwise. Camera pitch -90 is nadir.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidConfig, InvalidPlan, UnknownPreset
from .features import FeatureModel, FrameFeatures, detect
from .geometry import CameraIntrinsics, Pose, heading_pitch_rotation

DEFAULT_K = CameraIntrinsics(3500.0, 3500.0, 960.0, 540.0, 1920, 1080)
SIGMA_GNSS = 1.5
GNSS_RATE = 1.0
MODE_RATES = {"sfm": 1.0, "slam": 30.0}
FRAME_ID_STRIDE = 1_000_000


@dataclass
class World:
    landmarks: np.ndarray
    groups: np.ndarray  # group id per landmark, -1 if not repetitive
    extent: tuple
    seed: int
    h_noise: float = 0.0

    def __post_init__(self):
        if len(self.landmarks) == 0:
            raise InvalidConfig("world has no landmarks", "world.density")

    def __len__(self):
        return len(self.landmarks)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.landmarks).tobytes())
        h.update(np.ascontiguousarray(self.groups).tobytes())
        h.update(repr((tuple(self.extent), self.seed, self.h_noise)).encode())
        return h.hexdigest()


@dataclass
class WorldConfig:
    extent: tuple = (0.0, 100.0, 0.0, 100.0)  # x0 x1 y0 y1
    density: float = 0.05
    count: int | None = None  # exact landmark count overrides density
    h_noise: float = 2.0
    repetitive_fraction: float = 0.0
    group_size: int = 4


def generate_world(config: WorldConfig, seed: int) -> World:
    """Uniform landmarks over the extent with uniform height noise in [-h, h]."""
    x0, x1, y0, y1 = (float(v) for v in config.extent)
    if not (x1 > x0 and y1 > y0):
        raise InvalidConfig("extent must have positive area", "world.extent")
    if config.count is None and not config.density > 0:
        raise InvalidConfig("density must be positive", "world.density")
    if config.h_noise < 0:
        raise InvalidConfig("h_noise must be non-negative", "world.h_noise")
    if not 0 <= config.repetitive_fraction <= 1:
        raise InvalidConfig("must be in [0, 1]", "world.repetitive_fraction")
    if config.group_size < 2:
        raise InvalidConfig("groups need at least two members", "world.group_size")
    rng = np.random.default_rng(seed)
    area = (x1 - x0) * (y1 - y0)
    n = int(config.count) if config.count is not None else int(rng.poisson(config.density * area))
    if n <= 0:
        raise InvalidConfig("world would be empty", "world.density")
    xy = np.column_stack([rng.uniform(x0, x1, n), rng.uniform(y0, y1, n)])
    if config.h_noise > 0:
        z = rng.uniform(-config.h_noise, config.h_noise, n)
    else:
        z = np.zeros(n)
    groups = np.full(n, -1, dtype=np.int64)
    n_rep = int(round(config.repetitive_fraction * n)) // config.group_size * config.group_size
    if n_rep:
        members = rng.permutation(n)[:n_rep]
        groups[members] = np.arange(n_rep) // config.group_size
    return World(np.column_stack([xy, z]), groups, (x0, x1, y0, y1), seed, config.h_noise)


@dataclass
class YawManeuver:
    time: float  # seconds after the plan's start
    rate: float  # deg/s, positive turns left
    duration: float

    @property
    def end(self):
        return self.time + self.duration


@dataclass
class FlightPlan:
    """Polyline flight at constant altitude; the vehicle hovers during yaw maneuvers."""

    agent_id: int
    waypoints: np.ndarray
    altitude: float = 80.0
    speed: float = 5.0
    heading_mode: str = "along-track"
    heading: float = 0.0  # degrees, used in fixed mode
    pitch: float = -90.0
    yaw_maneuvers: list = field(default_factory=list)
    frame_rate: float | None = None  # None: rate implied by sampling mode
    start_time: float = 0.0

    def __post_init__(self):
        self.waypoints = np.asarray(self.waypoints, dtype=float).reshape(-1, 2)
        self.yaw_maneuvers = [m if isinstance(m, YawManeuver) else YawManeuver(*m) for m in self.yaw_maneuvers]
        if self.altitude <= 0:
            raise InvalidPlan(f"agent {self.agent_id}: altitude must be positive")
        if self.speed <= 0:
            raise InvalidPlan(f"agent {self.agent_id}: speed must be positive")
        if self.heading_mode not in ("along-track", "fixed"):
            raise InvalidPlan(f"agent {self.agent_id}: unknown heading mode {self.heading_mode!r}")
        if self.frame_rate is not None and self.frame_rate <= 0:
            raise InvalidPlan(f"agent {self.agent_id}: frame rate must be positive")

    @property
    def segment_lengths(self):
        return np.linalg.norm(np.diff(self.waypoints, axis=0), axis=1)

    @property
    def path_length(self) -> float:
        return float(self.segment_lengths.sum())

    @property
    def duration(self) -> float:
        return self.path_length / self.speed + sum(m.duration for m in self.yaw_maneuvers)

    def _moving_time(self, tau):
        hover = sum(min(max(tau - m.time, 0.0), m.duration) for m in self.yaw_maneuvers)
        return tau - hover

    def _yaw_offset(self, tau):
        return sum(m.rate * min(max(tau - m.time, 0.0), m.duration) for m in self.yaw_maneuvers)

    def state(self, t: float):
        """(position, heading in degrees) at absolute time ``t``."""
        tau = t - self.start_time
        s = min(max(self.speed * self._moving_time(tau), 0.0), self.path_length)
        seg = self.segment_lengths
        cum = np.concatenate([[0.0], np.cumsum(seg)])
        k = int(np.searchsorted(cum, s, side="right") - 1)
        k = min(max(k, 0), len(seg) - 1)
        while seg[k] == 0 and k > 0:
            k -= 1
        frac = (s - cum[k]) / seg[k] if seg[k] > 0 else 0.0
        a, b = self.waypoints[k], self.waypoints[k + 1]
        xy = a + frac * (b - a)
        if self.heading_mode == "along-track":
            d = b - a
            base = math.degrees(math.atan2(d[1], d[0]))
        else:
            base = self.heading
        return np.array([xy[0], xy[1], self.altitude]), base + self._yaw_offset(tau)

    def pose(self, t: float) -> Pose:
        center, heading = self.state(t)
        R = heading_pitch_rotation(math.radians(heading), math.radians(self.pitch))
        return Pose.from_center(R, center)

    def frame_times(self, rate: float) -> np.ndarray:
        n = int(math.floor(self.duration * rate + 1e-9))
        return self.start_time + np.arange(n + 1) / rate


@dataclass
class GroundTruthTrack:
    agent_id: int
    times: np.ndarray
    true_positions: np.ndarray
    gnss_positions: np.ndarray

    def __len__(self):
        return len(self.times)


@dataclass
class MissionStream:
    agent_id: int
    frames: list
    track: GroundTruthTrack


def _validate_plan(plan: FlightPlan):
    if len(plan.waypoints) < 2 or plan.path_length <= 0:
        raise InvalidPlan(f"agent {plan.agent_id}: zero-length path")


def sample_mission(world: World, plans, mode: str = "sfm", K: CameraIntrinsics = DEFAULT_K,
                   model: FeatureModel | None = None, seed: int = 0,
                   sigma_gnss: float = SIGMA_GNSS) -> dict:
    """Per-agent feature streams and GNSS tracks.

    Frame ids are ``agent_id * 1e6 + k``. Detection randomness is
    keyed on (seed, agent, frame index, mode) so streams are reproducible.
    """
    if not plans:
        raise InvalidPlan("no flight plans")
    if mode not in MODE_RATES:
        raise InvalidConfig(f"unknown mode {mode!r}", "run.mode")
    model = model or FeatureModel()
    mode_key = 0 if mode == "sfm" else 1
    out = {}
    for plan in plans:
        _validate_plan(plan)
        rate = plan.frame_rate or MODE_RATES[mode]
        frames = []
        for k, t in enumerate(plan.frame_times(rate)):
            rng = np.random.default_rng([seed, plan.agent_id, k, mode_key])
            pose = plan.pose(t)
            frames.append(detect(world, pose, K, model, rng,
                                 frame_id=plan.agent_id * FRAME_ID_STRIDE + k,
                                 agent_id=plan.agent_id, timestamp=float(t)))
        gt_times = plan.frame_times(GNSS_RATE)
        true = np.array([plan.state(t)[0] for t in gt_times])
        grng = np.random.default_rng([seed, plan.agent_id, 7])
        gnss = true + grng.normal(0.0, sigma_gnss, true.shape)
        out[plan.agent_id] = MissionStream(plan.agent_id, frames,
                                           GroundTruthTrack(plan.agent_id, gt_times, true, gnss))
    return out


def footprint(pose: Pose, K: CameraIntrinsics, ground_z: float = 0.0):
    """Ground-plane polygon seen by the camera (shapely), or None above the horizon."""
    from shapely.geometry import Polygon

    corners = np.array([[0, 0], [K.width, 0], [K.width, K.height], [0, K.height]], dtype=float)
    rays = K.bearings(corners) @ pose.R  # world directions
    c = pose.center
    if np.any(rays[:, 2] >= 0):
        return None
    s = (ground_z - c[2]) / rays[:, 2]
    return Polygon(c[:2] + s[:, None] * rays[:, :2])


def consecutive_overlap(poses, K: CameraIntrinsics = DEFAULT_K) -> np.ndarray:
    fps = [footprint(p, K) for p in poses]
    return np.array([a.intersection(b).area / a.area for a, b in zip(fps[:-1], fps[1:])])


# --- presets ---------------------------------------------------------------------------

OBLIQUE_PITCH = -45.0
OBLIQUE_SPEED = 9.0


def _co_directed():
    wc = WorldConfig(extent=(-30.0, 330.0, -35.0, 35.0), count=2000)
    plans = [
        FlightPlan(1, [(0.0, -5.0), (295.0, -5.0)]),
        FlightPlan(2, [(0.0, 5.0), (295.0, 5.0)], start_time=0.5),
    ]
    return wc, plans


def _dataset1():
    L = 250.0
    wc = WorldConfig(extent=(-130.0, L + 130.0, -55.0, 55.0), density=0.05)
    common = dict(altitude=80.0, speed=OBLIQUE_SPEED, pitch=OBLIQUE_PITCH)
    plans = [
        FlightPlan(1, [(0.0, 0.0), (L, 0.0)], **common),
        FlightPlan(2, [(L, 0.0), (0.0, 0.0)], **common),
    ]
    return wc, plans


def _dataset2():
    L = 250.0
    wc = WorldConfig(extent=(-130.0, L + 130.0, -65.0, 65.0), density=0.05)
    common = dict(altitude=80.0, speed=OBLIQUE_SPEED, pitch=OBLIQUE_PITCH)
    plans = [
        FlightPlan(1, [(0.0, -10.0), (L, -10.0)], **common),
        FlightPlan(2, [(L, 0.0), (0.0, 0.0)], **common),
        FlightPlan(3, [(0.0, 10.0), (L, 10.0)], start_time=3.0, **common),
    ]
    return wc, plans


def _yaw_loss():
    # east leg, hover at the corner turning left 90 deg at 60 deg/s, then north;
    # fixed heading so the turn comes only from the maneuver
    wc = WorldConfig(extent=(-40.0, 260.0, -60.0, 240.0), density=0.05)
    plan = FlightPlan(1, [(0.0, 0.0), (90.0, 0.0), (90.0, 80.0)], altitude=80.0, speed=OBLIQUE_SPEED,
                      heading_mode="fixed", heading=0.0, pitch=OBLIQUE_PITCH,
                      yaw_maneuvers=[YawManeuver(10.0, 60.0, 1.5)])
    return wc, [plan]


PRESETS = {
    "co-directed": _co_directed,
    "dataset1-like": _dataset1,
    "dataset2-like": _dataset2,
    "yaw-loss": _yaw_loss,
}
DEFAULT_PRESET = "co-directed"


def preset_config(name: str):
    try:
        return PRESETS[name]()
    except KeyError:
        raise UnknownPreset(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


def preset(name: str, seed: int = 0):
    wc, plans = preset_config(name)
    return generate_world(wc, seed), plans


def with_plans(plans, **changes):
    return [replace(p, **changes) for p in plans]
