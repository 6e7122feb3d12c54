import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from collabmap.agent import Agent, AgentConfig, Initializing, Lost, Tracking
from collabmap.collab import EndOfStream, KeyframeSubmission, PoseUpdate
from collabmap.errors import OutOfOrderFrame, UnknownFrame
from collabmap.evaluation import align_similarity
from collabmap.features import FeatureModel, FrameFeatures
from collabmap.geometry import Pose

from conftest import K_TEST, small_scene, strip_poses


def _flight(model=None, n=80, step=0.5):
    _, streams, match = small_scene({1: strip_poses(np.arange(n) * step)}, model, dt=1 / 30)
    return streams[1], match


def _run(frames, match, config=None):
    ag = Agent(1, K_TEST, match, config)
    subs = []
    for f in frames:
        state, pose, kf = ag.process_frame(f.public())
        if kf is not None:
            subs.append(kf)
    return ag, subs + ag.finish()


def _rmse(ag, frames):
    by_id = {f.frame_id: f for f in frames}
    rows = ag.trajectory()
    est = np.array([p.center for _, _, p in rows])
    gt = np.array([by_id[f].true_pose.center for _, f, _ in rows])
    s, R, t = align_similarity(est, gt)
    return float(np.sqrt(np.mean(np.sum((s * est @ R.T + t - gt) ** 2, 1))))


def test_noiseless_tracking_is_exact():
    frames, match = _flight()
    ag, msgs = _run(frames, match)
    assert isinstance(ag.state, Tracking)
    assert ag.completeness == 1.0
    assert _rmse(ag, frames) < 1e-6
    assert isinstance(msgs[-1], EndOfStream)
    kfs = [m for m in msgs if isinstance(m, KeyframeSubmission)]
    assert [m.frame.frame_id for m in kfs] == ag.keyframes


def test_noisy_tracking_is_accurate():
    frames, match = _flight(FeatureModel(pixel_sigma=1.0))
    ag, _ = _run(frames, match)
    assert ag.completeness == 1.0
    assert _rmse(ag, frames) < 0.5  # 40 m strip, 800 px focal length


def test_initializes_only_with_enough_parallax():
    frames, match = _flight(n=12, step=0.1)  # 1.1 m baseline at 30 m: under 5 degrees
    ag, _ = _run(frames, match)
    assert isinstance(ag.state, Initializing)
    assert ag.completeness == 0.0
    frames, match = _flight(n=12, step=0.1)
    ag, _ = _run(frames, match, AgentConfig(init_parallax_deg=1.0))
    assert isinstance(ag.state, Tracking)


def test_keyframe_submission_is_held_back_one_keyframe():
    frames, match = _flight()
    ag = Agent(1, K_TEST, match)
    out = []
    for f in frames:
        _, _, kf = ag.process_frame(f.public())
        if kf is not None:
            out.append(kf.frame.frame_id)
            assert kf.frame.frame_id in ag.keyframes[:-1]
    assert ag.finish()[0].frame.frame_id == ag.keyframes[-1]


def test_submission_carries_landmark_positions():
    frames, match = _flight()
    _, msgs = _run(frames, match)
    kf = msgs[1]
    have = kf.landmark_ids >= 0
    assert have.sum() > 20
    assert np.all(np.isfinite(kf.landmark_xyz[have])) and np.all(np.isnan(kf.landmark_xyz[~have]))


def test_lost_when_view_leaves_the_map():
    frames, match = _flight()
    ag = Agent(1, K_TEST, match)
    for f in frames[:40]:
        ag.process_frame(f.public())
    blank = FrameFeatures(1_000_999, 1, 99.0, np.zeros((0, 2)), [], frames[0].true_pose)
    match.add(blank)
    blank = blank.public()
    state, pose, _ = ag.process_frame(blank)
    assert isinstance(state, Lost) and pose is None
    assert state.last_tracked == frames[39].frame_id
    assert ag.inlier_counts[blank.frame_id] == 0


def test_out_of_order_frame():
    frames, match = _flight(n=5)
    ag = Agent(1, K_TEST, match)
    ag.process_frame(frames[1].public())
    with pytest.raises(OutOfOrderFrame):
        ag.process_frame(frames[0].public())


def test_unknown_frame_update():
    frames, match = _flight()
    ag, _ = _run(frames, match)
    with pytest.raises(UnknownFrame):
        ag.apply_pose_update([PoseUpdate(42, Pose.identity())])


@settings(max_examples=20)
@given(st.floats(0.5, 2.0), st.floats(-np.pi, np.pi), st.tuples(*[st.floats(-50, 50)] * 3))
def test_similarity_update_moves_non_keyframes_rigidly(s, angle, t):
    frames, match = _cached_flight()
    ag, _ = _run(frames, match)
    R = Pose.from_rotvec([0, 0, angle], [0, 0, 0]).R
    t = np.array(t)

    def sim(p):
        return Pose.from_center(p.R @ R.T, s * R @ p.center + t)

    before = {f: p for _, f, p in ag.trajectory()}
    ag.apply_pose_update([PoseUpdate(k, sim(before[k])) for k in ag.keyframes])
    for f, p in before.items():
        q = ag.poses[f]
        np.testing.assert_allclose(q.center, s * R @ p.center + t, atol=1e-6)
        np.testing.assert_allclose(q.R, p.R @ R.T, atol=1e-9)
    # map points follow the same similarity
    lm = next(iter(ag.smap.landmarks.values()))
    assert np.isfinite(lm.position).all()


_FLIGHT = None


def _cached_flight():
    global _FLIGHT
    if _FLIGHT is None:
        _FLIGHT = _flight(n=40)
    return _FLIGHT


def test_config_validation():
    for kw in (dict(T_lost=2), dict(keyframe_ratio=1.0), dict(keyframe_max_gap=0)):
        with pytest.raises(ValueError):
            AgentConfig(**kw)
