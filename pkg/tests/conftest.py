import functools
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from collabmap.config import RunConfig
from collabmap.features import FeatureModel, Matcher, detect
from collabmap.geometry import CameraIntrinsics, Pose, heading_pitch_rotation, project_points
from collabmap.scenario import FRAME_ID_STRIDE, World
from scipy.spatial.transform import Rotation
from collabmap.pipelines import run_pipeline, simulate

settings.register_profile("collabmap", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("collabmap")

K_TEST = CameraIntrinsics(800.0, 800.0, 320.0, 240.0, 640, 480)


def look_at(center, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera at ``center`` looking at ``target`` (x right, y down, z forward)."""
    c, g = np.asarray(center, float), np.asarray(target, float)
    z = g - c
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, (0.0, 1.0, 0.0))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose.from_center(np.stack([x, y, z]), c)


def ring_of_cameras(n, radius=10.0, height=2.0, rng=None):
    rng = rng or np.random.default_rng(0)
    out = []
    for k in range(n):
        a = 2 * np.pi * k / n * 0.25 + rng.normal(0, 0.01)
        c = np.array([radius * np.sin(a), -radius * np.cos(a), height + rng.normal(0, 0.2)])
        out.append(look_at(c, rng.normal(0, 0.3, 3)))
    return out


@functools.lru_cache(maxsize=None)
def _cached(items: tuple, pipeline: str):
    cfg = RunConfig(dict(items))
    scn = simulate(cfg)
    return scn, cfg, run_pipeline(scn, cfg, pipeline)


def cached_run(pipeline: str, **raw):
    """Simulate + run once per distinct configuration within a test session."""
    raw = {k.replace("__", "."): str(v) for k, v in raw.items()}
    raw.setdefault("run.pipeline", pipeline)
    return _cached(tuple(sorted(raw.items())), pipeline)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def synthetic_map(n_frames=8, n_points=120, sigma=0.5, pose_noise=0.01, point_noise=0.05, seed=0,
                  K=K_TEST, gauge=True):
    """A SparseMap of cameras on an arc viewing a point cloud, with perturbed estimates.

    Returns ``(smap, true_poses, true_points)``.
    """
    from collabmap.features import FrameView
    from collabmap.mapper import SparseMap

    rng = np.random.default_rng(seed)
    X = rng.uniform(-2, 2, (n_points, 3))
    poses = ring_of_cameras(n_frames, rng=rng)
    smap = SparseMap(0)
    lids = [None] * n_points
    obs = {j: {} for j in range(n_points)}
    for i, p in enumerate(poses):
        uv, z = project_points(X, p, K)
        ok = (z > 0) & K.in_bounds(uv)
        idx = np.flatnonzero(ok)
        kp = uv[idx] + rng.normal(0, sigma, (len(idx), 2))
        view = FrameView(i, 1, float(i), kp)
        smap.add_frame(view, K)
        noisy = Pose.from_rotvec(Rotation.from_matrix(p.R).as_rotvec() + rng.normal(0, pose_noise, 3),
                                 p.translation + rng.normal(0, 10 * pose_noise, 3))
        smap.register(i, p if (gauge and i == 0) else noisy)
        for k, j in enumerate(idx):
            obs[j][i] = k
    for j in range(n_points):
        if len(obs[j]) >= 2:
            lids[j] = smap.new_landmark(X[j] + rng.normal(0, point_noise, 3), obs[j])
    if gauge:
        smap.fixed_gauge = (0, 1)
    return smap, poses, X


def strip_poses(xs, y=0.0, alt=30.0, heading=0.0, pitch=-90.0):
    R = heading_pitch_rotation(np.radians(heading), np.radians(pitch))
    return [Pose.from_center(R, [x, y, alt]) for x in xs]


def small_world(n=4000, extent=(-30, 130, -25, 25), seed=0):
    rng = np.random.default_rng(seed)
    x0, x1, y0, y1 = extent
    pts = np.column_stack([rng.uniform(x0, x1, n), rng.uniform(y0, y1, n), rng.uniform(-2, 2, n)])
    return World(pts, np.full(n, -1), extent, seed)


def small_scene(poses_by_agent: dict, model=None, world=None, seed=0, dt=1.0):
    """Frames of several agents over one world: ``(world, {agent: [FrameFeatures]}, Matcher)``."""
    model = model or FeatureModel()
    world = world or small_world(seed=seed)
    rng = np.random.default_rng(seed)
    streams = {}
    for aid, poses in sorted(poses_by_agent.items()):
        streams[aid] = [detect(world, p, K_TEST, model, rng, frame_id=aid * FRAME_ID_STRIDE + k, agent_id=aid,
                               timestamp=k * dt + 0.01 * aid)
                        for k, p in enumerate(poses)]
    frames = [f for fs in streams.values() for f in fs]
    return world, streams, Matcher(frames, world, model, seed=seed)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])


