import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from collabmap.errors import ParseError
from collabmap.features import (
    FeatureModel,
    FrameView,
    Matcher,
    detect,
    match,
    read_features,
    write_features,
    write_provenance,
)
from collabmap.geometry import project_points, ray_angles
from collabmap.scenario import World

from conftest import K_TEST, look_at


def _world(n=300, seed=0, groups=None):
    rng = np.random.default_rng(seed)
    pts = np.column_stack([rng.uniform(-20, 20, n), rng.uniform(-20, 20, n), rng.uniform(-1, 1, n)])
    return World(pts, np.full(n, -1) if groups is None else groups, (-20, 20, -20, 20), seed)


def _pair(angle_deg, world, model, seed=0):
    # two cameras 40 m from the origin whose directions differ by angle_deg
    a = np.radians(angle_deg / 2)
    c1 = 40 * np.array([np.sin(a), 0, np.cos(a)])
    c2 = 40 * np.array([-np.sin(a), 0, np.cos(a)])
    rng = np.random.default_rng(seed)
    f1 = detect(world, look_at(c1, [0, 0, 0]), K_TEST, model, rng, frame_id=1)
    f2 = detect(world, look_at(c2, [0, 0, 0]), K_TEST, model, rng, frame_id=2)
    return f1, f2


def test_detect_noiseless_projects_exactly():
    w = _world()
    pose = look_at([0, 0, 40], [0, 0, 0])
    f = detect(w, pose, K_TEST, FeatureModel(), np.random.default_rng(0))
    uv, z = project_points(w.landmarks[f.provenance], pose, K_TEST)
    np.testing.assert_allclose(f.keypoints, uv, atol=1e-9)
    assert len(f) > 100 and np.all(z > 0)


def test_detect_noise_has_requested_sigma():
    w = _world(3000)
    pose = look_at([0, 0, 60], [0, 0, 0])
    f = detect(w, pose, K_TEST, FeatureModel(pixel_sigma=2.0), np.random.default_rng(1))
    uv, _ = project_points(w.landmarks[f.provenance], pose, K_TEST)
    inner = np.all((uv > 10) & (uv < [K_TEST.width - 10, K_TEST.height - 10]), axis=1)
    assert np.std(f.keypoints[inner] - uv[inner]) == pytest.approx(2.0, rel=0.1)


def test_detection_probability():
    w = _world(3000)
    pose = look_at([0, 0, 60], [0, 0, 0])
    full = detect(w, pose, K_TEST, FeatureModel(), np.random.default_rng(0))
    half = detect(w, pose, K_TEST, FeatureModel(p_detect=0.5), np.random.default_rng(0))
    assert len(half) / len(full) == pytest.approx(0.5, abs=0.05)


@pytest.mark.parametrize("angle,theta_max,expect", [(30, 60, True), (90, 60, False), (90, 150, True)])
def test_viewing_angle_gate(angle, theta_max, expect):
    w = _world()
    f1, f2 = _pair(angle, w, FeatureModel(theta_max=theta_max))
    ms = match(f1, f2, FeatureModel(theta_max=theta_max), np.random.default_rng(0), w)
    assert (len(ms) > 50) == expect
    if len(ms):
        lm = f1.provenance[ms.pairs[:, 0]]
        ang = np.degrees(ray_angles(f1.true_pose.center, f2.true_pose.center, w.landmarks[lm]))
        assert np.all(ang <= theta_max)


def test_clean_matches_share_landmarks():
    w = _world()
    f1, f2 = _pair(20, w, FeatureModel())
    ms = match(f1, f2, FeatureModel(), np.random.default_rng(0), w)
    assert ms.labels.all()
    np.testing.assert_array_equal(f1.provenance[ms.pairs[:, 0]], f2.provenance[ms.pairs[:, 1]])


def test_outliers_are_labelled_and_one_to_one():
    w = _world()
    model = FeatureModel(outlier_rate=0.3)
    f1, f2 = _pair(20, w, model)
    ms = match(f1, f2, model, np.random.default_rng(0), w)
    same = f1.provenance[ms.pairs[:, 0]] == f2.provenance[ms.pairs[:, 1]]
    np.testing.assert_array_equal(same, ms.labels)
    assert (~ms.labels).sum() > 0
    assert len(np.unique(ms.pairs[:, 0])) == len(ms) == len(np.unique(ms.pairs[:, 1]))


def test_repetitive_swaps_stay_within_group():
    n = 300
    groups = np.arange(n) // 3
    w = _world(n, groups=groups)
    model = FeatureModel(repetitive_confusion=0.5)
    f1, f2 = _pair(20, w, model)
    ms = match(f1, f2, model, np.random.default_rng(0), w)
    bad = ~ms.labels
    assert bad.sum() > 10
    la, lb = f1.provenance[ms.pairs[bad, 0]], f2.provenance[ms.pairs[bad, 1]]
    np.testing.assert_array_equal(groups[la], groups[lb])


@given(st.integers(0, 10_000))
def test_matcher_symmetric_and_cached(seed):
    w = _world(200)
    model = FeatureModel(outlier_rate=0.2, pixel_sigma=0.5)
    f1, f2 = _pair(25, w, model, seed=seed % 7)
    m = Matcher([f1, f2], w, model, seed=seed)
    ab, ba = m(1, 2), m(2, 1)
    np.testing.assert_array_equal(ab, ba[:, ::-1])
    assert not ab.flags.writeable
    m2 = Matcher([f2, f1], w, model, seed=seed)
    np.testing.assert_array_equal(m2(1, 2), ab)
    assert 0 <= m.similarity(1, 2) <= 1


def test_public_view_hides_ground_truth():
    w = _world()
    f1, _ = _pair(10, w, FeatureModel())
    v = f1.public()
    assert isinstance(v, FrameView)
    assert not hasattr(v, "provenance") and not hasattr(v, "true_pose")
    with pytest.raises(ValueError):
        v.keypoints[0, 0] = 1.0


def test_model_validation():
    for kw in (dict(theta_max=0), dict(p_detect=1.5), dict(outlier_rate=-0.1), dict(pixel_sigma=-1)):
        with pytest.raises(ValueError):
            FeatureModel(**kw)


def test_text_roundtrip(tmp_path):
    w = _world()
    f1, f2 = _pair(10, w, FeatureModel(pixel_sigma=0.7))
    write_features([f1, f2], tmp_path / "a.features")
    write_provenance([f1, f2], tmp_path / "a.prov")
    back = read_features(tmp_path / "a.features", tmp_path / "a.prov")
    for a, b in zip([f1, f2], back):
        assert (a.frame_id, a.agent_id, a.timestamp) == (b.frame_id, b.agent_id, b.timestamp)
        np.testing.assert_array_equal(a.keypoints, b.keypoints)
        np.testing.assert_array_equal(a.provenance, b.provenance)
        np.testing.assert_allclose(a.true_pose.as_array(), b.true_pose.as_array())
    bare = read_features(tmp_path / "a.features")
    assert np.all(bare[0].provenance == -1) and bare[0].true_pose is None


def test_parse_error_reports_line(tmp_path):
    p = tmp_path / "bad.features"
    p.write_text("frame 1 1 0.0 2\n1.0 2.0\nnot a number\n")
    with pytest.raises(ParseError) as e:
        read_features(p)
    assert e.value.line == 3
    p.write_text("garbage\n")
    with pytest.raises(ParseError) as e:
        read_features(p)
    assert e.value.line == 1
