import math

import numpy as np
import pytest

from conftest import looking_into, random_constraint_map
from ocreloc.errors import EmptyVisibleSetError, PnPError
from ocreloc.geometry import PinholeCamera, Pose, pose_error, project, so3_exp
from ocreloc.mapping import LandmarkMap
from ocreloc.pnp import Matches, PnPConfig
from ocreloc.refine import (
    RefinerConfig,
    estimate_uncertainty_mc,
    filter_reprojection,
    match_2d3d_knn,
    refine_iteratively,
    visible_landmarks,
)
from ocreloc.retrieval import initial_pose
from ocreloc.synthetic import oracle_visible

CAM = PinholeCamera(500.0, 500.0, 320.0, 240.0, 640, 480)


def _one_landmark(L=5.0, theta=0.4, normal=(0, 0, 1.0), X=(0, 0, 0.0), label=0, desc=None):
    return LandmarkMap(
        [], ids=[0], xyz=[X], colors=[(0, 0, 0)], labels=[label],
        descriptors=[desc if desc is not None else np.eye(4)[0]], track_offsets=[0, 0],
        track_image_ids=[], track_kp=[], max_distance=[L], normals=[normal], theta=[theta],
        mean_reproj_err=[0.0], degenerate=[False], local_dim=4, global_dim=4,
    )


def _looking_down_from(height):
    # camera on the +z axis looking at the origin
    return Pose.look_at([0, 0, height], [0, 0, 0], up=(0, 1, 0))


def test_visible_cone_examples():
    m = _one_landmark()
    assert visible_landmarks(m, _looking_down_from(0.9 * 5), CAM).tolist() == [0]
    assert visible_landmarks(m, _looking_down_from(1.5 * 5), CAM).tolist() == []
    # inside the cone but facing away: behind the camera
    away = Pose.look_at([0, 0, 4.5], [0, 0, 10], up=(0, 1, 0))
    assert visible_landmarks(m, away, CAM).tolist() == []


def test_visible_angle_rule():
    m = _one_landmark(L=10.0, theta=0.4)
    cfg = RefinerConfig(angle_slack=0.1)
    for deg, want in [(10, True), (16, True), (18, False), (40, False)]:
        a = math.radians(deg)
        C = 5 * np.array([math.sin(a), 0, math.cos(a)])
        got = visible_landmarks(m, Pose.look_at(C, [0, 0, 0], up=(0, 1, 0)), CAM, cfg)
        assert (len(got) == 1) is want, deg


def test_degenerate_cone_always_passes_angle():
    m = _one_landmark(L=10.0, theta=2 * math.pi, normal=(0, 0, 1.0))
    m.degenerate[:] = True
    assert len(visible_landmarks(m, Pose.look_at([0, 0, -5], [0, 0, 0], up=(0, 1, 0)), CAM)) == 1


def test_visible_matches_oracle():
    rng = np.random.default_rng(0)
    cfg = RefinerConfig()
    nonempty = 0
    for _ in range(30):
        n = int(10 ** rng.uniform(1, 4))
        m = random_constraint_map(rng, n)
        pose = looking_into(rng)
        got = visible_landmarks(m, pose, CAM, cfg)
        np.testing.assert_array_equal(got, oracle_visible(m, pose, CAM, cfg))
        nonempty += len(got) > 0
    assert nonempty > 15


def test_visible_empty_case():
    m = _one_landmark()
    far = _looking_down_from(100.0)
    assert len(visible_landmarks(m, far, CAM)) == 0 == len(oracle_visible(m, far, CAM, RefinerConfig()))


def test_visible_on_scene_covers_observed(scene, gt_map):
    # a query may see a few landmarks from outside their mapping cones
    for q in scene.queries:
        vis = set(visible_landmarks(gt_map, scene.query_gt[q.name], q.camera).tolist())
        truth = scene.query_correspondences[q.name]
        seen = set(truth[truth >= 0].tolist())
        assert len(seen & vis) >= 0.95 * len(seen)


class _Q:
    def __init__(self, desc, labels, xy=None):
        self.descriptors = np.asarray(desc, dtype=np.float32)
        self.labels = np.asarray(labels)
        self.xy = np.zeros((len(self.labels), 2)) if xy is None else xy


def test_2d3d_exact_descriptor_match():
    m = random_constraint_map(np.random.default_rng(1), 50)
    q = _Q([m.descriptors[7]], [0])
    out = match_2d3d_knn(q, np.arange(50), m)
    assert list(out.landmark_idx) == [7] and out.distance[0] == pytest.approx(0, abs=1e-6)


def test_2d3d_label_conflict():
    m = random_constraint_map(np.random.default_rng(2), 50)
    m.labels[7] = 9
    assert len(match_2d3d_knn(_Q([m.descriptors[7]], [4]), np.arange(50), m)) == 0
    assert len(match_2d3d_knn(_Q([m.descriptors[7]], [4]), np.arange(50), m, RefinerConfig(use_semantics=False))) == 1


def test_2d3d_empty_visible_signal():
    m = random_constraint_map(np.random.default_rng(3), 5)
    with pytest.raises(EmptyVisibleSetError):
        match_2d3d_knn(_Q([m.descriptors[0]], [0]), np.zeros(0, dtype=int), m)


def test_2d3d_on_noiseless_queries(scene, gt_map):
    for q in scene.queries:
        truth = scene.query_correspondences[q.name]
        vis = visible_landmarks(gt_map, scene.query_gt[q.name], q.camera)
        out = match_2d3d_knn(q, vis, gt_map)
        correct = np.sum(truth[out.query_idx] == out.landmark_idx)
        assert correct >= 0.95 * np.sum(truth >= 0)


def test_filter_reprojection_examples():
    m = _one_landmark(X=(0, 0, 5.0))
    pose = Pose.identity()
    matches = Matches([0, 1, 2], [0, 0, 0], [0, 0, 0])
    xy = np.array([[323.0, 244.0], [329.0, 252.0], [320.0, 240.0]])  # 5 px, 15 px, 0 px
    kept = filter_reprojection(matches, pose, CAM, xy, m, 10.0)
    assert kept.query_idx.tolist() == [0, 2]
    behind = filter_reprojection(matches, Pose.from_center(np.eye(3), [0, 0, 10.0]), CAM, xy, m, 1e9)
    assert len(behind) == 0


def test_filter_reprojection_idempotent_and_monotone(scene, gt_map):
    q = scene.queries[0]
    rng = np.random.default_rng(4)
    n = 200
    matches = Matches(rng.integers(0, q.num_keypoints, n), rng.integers(0, len(gt_map), n), np.zeros(n))
    pose = scene.query_gt[q.name]
    prev = None
    for d in (1.0, 5.0, 50.0, 500.0):
        k = filter_reprojection(matches, pose, q.camera, q.xy, gt_map, d)
        assert filter_reprojection(k, pose, q.camera, q.xy, gt_map, d).same_as(k)
        if prev is not None:
            assert set(zip(prev.query_idx, prev.landmark_idx)) <= set(zip(k.query_idx, k.landmark_idx))
        prev = k


def _true_matches(scene, q):
    truth = scene.query_correspondences[q.name]
    qi = np.flatnonzero(truth >= 0)
    return Matches(qi, truth[qi], np.zeros(len(qi)))


def test_mc_noiseless(scene, gt_map):
    q = scene.queries[0]
    pose = scene.query_gt[q.name]
    st, sr = estimate_uncertainty_mc(_true_matches(scene, q), pose, q.camera, q.xy, gt_map)
    assert st < 1e-6 and sr < 1e-5


def test_mc_outliers_raise_uncertainty(scene, gt_map):
    q = scene.queries[2]
    pose = scene.query_gt[q.name]
    clean = _true_matches(scene, q)
    rng = np.random.default_rng(5)
    xy = q.xy
    # 30% outliers: landmarks paired with pixels near their projection but off by up to 6 px
    n_out = int(0.3 * len(clean) / 0.7)
    lm = rng.choice(len(gt_map), n_out)
    uv = np.array([project(q.camera, pose, gt_map.xyz[i]) for i in lm])
    ok = np.array([u is not None for u in uv])
    # wrong pixels a few px off the true projection
    bad_xy = np.vstack([xy, np.stack(uv[ok]) + rng.uniform(-6, 6, (ok.sum(), 2))])
    extra_q = np.arange(len(xy), len(bad_xy))
    noisy = Matches(
        np.concatenate([clean.query_idx, extra_q]),
        np.concatenate([clean.landmark_idx, lm[ok]]),
        np.zeros(len(clean) + len(extra_q)),
    )
    s_clean = estimate_uncertainty_mc(clean, pose, q.camera, q.xy, gt_map)
    s_noisy = estimate_uncertainty_mc(noisy, pose, q.camera, bad_xy, gt_map)
    assert s_noisy[0] > s_clean[0]


def test_mc_determinism_and_precondition(scene, gt_map):
    q = scene.queries[3]
    pose = scene.query_gt[q.name]
    m = _true_matches(scene, q)
    xy = q.xy + np.random.default_rng(6).normal(0, 1.0, q.xy.shape)
    a = estimate_uncertainty_mc(m, pose, q.camera, xy, gt_map)
    b = estimate_uncertainty_mc(m, pose, q.camera, xy, gt_map)
    assert np.array(a).tobytes() == np.array(b).tobytes()
    with pytest.raises(PnPError):
        estimate_uncertainty_mc(m.subset(slice(0, 7)), pose, q.camera, xy, gt_map)


def test_refine_fixed_point(scene, gt_map, gt_index):
    q = scene.queries[0]
    init, _ = initial_pose(q, gt_map, index=gt_index)
    out = refine_iteratively(init, q, gt_map)
    assert 1 <= out.rounds <= 2
    assert pose_error(out.pose, scene.query_gt[q.name])[0] < 1e-6
    assert pose_error(out.pose, init.pose)[0] < 1e-6


def test_refine_far_initial_pose(scene, gt_map, gt_index):
    q = scene.queries[0]
    init, _ = initial_pose(q, gt_map, index=gt_index)
    gt = scene.query_gt[q.name]
    lost = init.with_(pose=Pose.from_center(gt.R, gt.center + np.array([50.0, 0, 0])))
    out = refine_iteratively(lost, q, gt_map)
    assert out.rounds == 0 and "empty_visible" in out.flags
    assert out.pose is lost.pose


def test_refine_terminates_and_sigma_nonincreasing():
    from ocreloc.mapping import build_map
    from ocreloc.synthetic import NoiseConfig, SceneConfig, add_noise, generate_scene

    s = add_noise(generate_scene(SceneConfig(seed=4, n_queries=10)), NoiseConfig(pixel_sigma=1.0, seed=4))
    m = build_map(s.db_images, s.tracks)
    cfg = RefinerConfig(max_rounds=4)
    for q in s.queries:
        init, _ = initial_pose(q, m)
        out = refine_iteratively(init, q, m, cfg)
        assert 0 <= out.rounds <= cfg.max_rounds
        acc = [(h.sigma_t, h.sigma_r) for h in out.history if h.accepted]
        for (a0, b0), (a1, b1) in zip(acc, acc[1:]):
            assert a1 <= a0 and b1 <= b0
        if out.rounds:
            assert out.uncertainty == acc[-1]
        again = refine_iteratively(init, q, m, cfg)
        assert again.to_bytes() == out.to_bytes()


def test_refine_improves_perturbed_start():
    from ocreloc.mapping import build_map
    from ocreloc.synthetic import NoiseConfig, SceneConfig, add_noise, generate_scene

    s = add_noise(generate_scene(SceneConfig(seed=6, n_queries=20)), NoiseConfig(pixel_sigma=1.0, seed=6))
    m = build_map(s.db_images, s.tracks)
    rng = np.random.default_rng(7)
    no_worse = strictly = 0
    for q in s.queries:
        gt = s.query_gt[q.name]
        # 0.5 m and 2 degrees off, in random directions
        d = rng.normal(size=3)
        axis = rng.normal(size=3)
        start_pose = Pose.from_center(
            so3_exp(axis / np.linalg.norm(axis) * math.radians(2)) @ gt.R, gt.center + 0.5 * d / np.linalg.norm(d)
        )
        init, _ = initial_pose(q, m)
        start = init.with_(pose=start_pose)
        e0 = pose_error(start_pose, gt)[0]
        out = refine_iteratively(start, q, m)
        no_worse += pose_error(out.pose, gt)[0] <= e0
        # a wider gate lets the first round find matches from this far off
        wide = refine_iteratively(start, q, m, RefinerConfig(reproj_threshold_px=40.0))
        strictly += pose_error(wide.pose, gt)[0] < e0
    assert no_worse >= 16 and strictly >= 16


def test_config_validation():
    with pytest.raises(ValueError):
        RefinerConfig(mc_fractions=(0.0,))
    with pytest.raises(ValueError):
        RefinerConfig(distance_slack=0.9)
    with pytest.raises(ValueError):
        RefinerConfig(max_rounds=0)
