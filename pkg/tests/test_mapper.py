import numpy as np
import pytest

from collabmap.errors import EmptyReconstruction
from collabmap.features import FeatureModel, Matcher
from collabmap.evaluation import align_similarity
from collabmap.geometry import Pose, heading_pitch_rotation
from collabmap.mapper import MapperOptions, MatchGraph, SparseMap, reconstruct_offline

from conftest import K_TEST, small_scene, strip_poses
from oracles import verified_components


def _strip(xs, **kw):
    return strip_poses(xs, **kw)


def _scene(poses, model=FeatureModel(), seed=0):
    world, streams, match = small_scene({1: poses}, model, seed=seed)
    return world, streams[1], match


def _aligned_rmse(smap, frames):
    by_id = {f.frame_id: f for f in frames}
    ids = smap.registered_ids
    est = np.array([smap.frames[f].pose.center for f in ids])
    gt = np.array([by_id[f].true_pose.center for f in ids])
    s, R, t = align_similarity(est, gt)
    return float(np.sqrt(np.mean(np.sum((s * est @ R.T + t - gt) ** 2, axis=1))))


def test_noiseless_strip_is_exact():
    _, frames, match = _scene(_strip(np.arange(0, 40, 4.0)))
    maps = reconstruct_offline(frames, match, K_TEST)
    assert len(maps) == 1 and maps[0].n_registered() == len(frames)
    assert _aligned_rmse(maps[0], frames) < 1e-6
    assert maps[0].rms_reprojection() < 1e-6
    assert maps[0].audit() == []


def test_noisy_strip_reprojection_matches_noise():
    model = FeatureModel(pixel_sigma=1.0)
    _, frames, match = _scene(_strip(np.arange(0, 40, 4.0)), model)
    maps = reconstruct_offline(frames, match, K_TEST)
    assert len(maps) == 1 and maps[0].n_registered() == len(frames)
    assert 0.5 < maps[0].rms_reprojection() < 1.5
    assert _aligned_rmse(maps[0], frames) < 0.2


def test_outliers_are_rejected():
    model = FeatureModel(pixel_sigma=0.5, outlier_rate=0.2)
    _, frames, match = _scene(_strip(np.arange(0, 40, 4.0)), model)
    maps = reconstruct_offline(frames, match, K_TEST)
    assert maps[0].n_registered() == len(frames)
    assert maps[0].rms_reprojection() < 1.0
    assert _aligned_rmse(maps[0], frames) < 0.2


def test_disjoint_strips_give_separate_maps_matching_oracle():
    poses = _strip(np.arange(0, 24, 4.0)) + _strip(np.arange(80, 104, 4.0))
    _, frames, match = _scene(poses)
    for k, f in enumerate(frames):
        f.frame_id = 1_000_000 + k
    match = Matcher(frames, match.world, match.model)
    maps = reconstruct_offline(frames, match, K_TEST)
    got = sorted((set(m.registered_ids) for m in maps), key=min)
    views = {f.frame_id: f.public() for f in frames}
    assert got == verified_components(views, match, K_TEST)
    assert len(got) == 2


def test_viewing_angle_limit_splits_opposed_headings():
    # same ground, opposite heading: the matcher refuses pairs past theta_max only for oblique views
    R1 = heading_pitch_rotation(0.0, np.radians(-45.0))
    R2 = heading_pitch_rotation(np.pi, np.radians(-45.0))
    poses = [Pose.from_center(R1, [x - 30, 0, 30]) for x in range(0, 24, 3)]
    poses += [Pose.from_center(R2, [x + 30, 0, 30]) for x in range(0, 24, 3)]
    narrow = FeatureModel(theta_max=60.0)
    _, frames, match = _scene(poses, narrow)
    maps = reconstruct_offline(frames, match, K_TEST)
    assert len(maps) == 2
    wide = FeatureModel(theta_max=150.0)
    _, frames, match = _scene(poses, wide)
    maps = reconstruct_offline(frames, match, K_TEST)
    assert len(maps) == 1 and maps[0].n_registered() == len(frames)


def test_empty_input():
    with pytest.raises(EmptyReconstruction):
        reconstruct_offline([], lambda a, b: np.zeros((0, 2), int), K_TEST)


def test_match_graph_components():
    g = MatchGraph()
    g.add_edge(1, 2, np.zeros((20, 2), int))
    g.add_edge(3, 4, np.zeros((20, 2), int))
    g.add_node(5)
    comps = sorted(map(sorted, g.components()))
    assert [1, 2] in comps and [3, 4] in comps
    np.testing.assert_array_equal(g.pairs(2, 1), g.pairs(1, 2)[:, ::-1])


def test_sparse_map_bookkeeping():
    smap = SparseMap()
    _, frames, _ = _scene(_strip([0.0, 4.0]))
    for f in frames:
        smap.add_frame(f.public(), K_TEST)
        smap.register(f.frame_id, f.true_pose)
    a, b = (f.frame_id for f in frames)
    lid = smap.new_landmark([0, 0, 0], {a: 0, b: 1})
    assert smap.n_observations() == 2
    smap.remove_observation(lid, a)
    assert smap.frames[a].kp_landmark[0] == -1
    smap.remove_landmark(lid)
    assert smap.n_observations() == 0 and lid not in smap.landmarks


def test_mapper_options_seed_is_deterministic():
    model = FeatureModel(pixel_sigma=1.0, outlier_rate=0.1)
    _, frames, match = _scene(_strip(np.arange(0, 28, 4.0)), model)
    a = reconstruct_offline(frames, match, K_TEST, MapperOptions(seed=3))
    b = reconstruct_offline(frames, match, K_TEST, MapperOptions(seed=3))
    for m, n in zip(a, b):
        for f in m.registered_ids:
            np.testing.assert_array_equal(m.frames[f].pose.as_array(), n.frames[f].pose.as_array())
