import math

import numpy as np
import pytest

from ocreloc.errors import EmptyMapError, GeometryError, IngestError
from ocreloc.geometry import Pose
from ocreloc.mapping import (
    MapBuildConfig,
    Track,
    build_map,
    compute_observation_constraints,
    vote_semantic_label,
)
from ocreloc.synthetic import NoiseConfig, SceneConfig, add_noise, generate_scene, observation_constraints_batch


def test_constraints_single_view():
    oc = compute_observation_constraints([0, 0, 0], [[0, 0, 5]])
    assert oc.max_distance == 5.0 and oc.theta == 0.0 and not oc.degenerate
    np.testing.assert_array_equal(oc.normal, [0, 0, 1])


def test_constraints_two_orthogonal_views():
    oc = compute_observation_constraints([0, 0, 0], [[1, 0, 0], [0, 1, 0]])
    assert oc.max_distance == 1.0
    np.testing.assert_allclose(oc.normal, [math.sqrt(0.5), math.sqrt(0.5), 0], atol=1e-15)
    assert oc.theta == pytest.approx(math.pi / 2, abs=1e-9)


def test_constraints_opposing_views_degenerate():
    oc = compute_observation_constraints([0, 0, 0], [[1, 0, 0], [-1, 0, 0]])
    assert oc.degenerate and oc.theta == 2 * math.pi
    assert np.linalg.norm(oc.normal) == 1.0


def test_constraints_errors():
    with pytest.raises(GeometryError):
        compute_observation_constraints([0, 0, 0], np.empty((0, 3)))
    with pytest.raises(GeometryError):
        compute_observation_constraints([0, 0, 0], [[0, 0, 0], [1, 0, 0]])


def test_constraints_batch_matches_scalar():
    rng = np.random.default_rng(0)
    counts = rng.integers(1, 6, size=300)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    X = rng.normal(size=(300, 3))
    C = rng.normal(size=(offsets[-1], 3)) * 5
    L, n, th, deg = observation_constraints_batch(X, offsets, C)
    for i in range(300):
        oc = compute_observation_constraints(X[i], C[offsets[i] : offsets[i + 1]])
        assert L[i] == pytest.approx(oc.max_distance, abs=1e-12)
        np.testing.assert_allclose(n[i], oc.normal, atol=1e-12)
        # arccos near 1 amplifies rounding: 1e-16 in the cosine is ~1e-8 rad
        assert th[i] == pytest.approx(oc.theta, abs=1e-7)
        assert deg[i] == oc.degenerate


@pytest.mark.parametrize(
    "labels, want", [([2, 2, 3], 2), ([1, 2], 1), ([0, 0], 0), ([], 0), ([0, 5, 0], 5), ([4, 4, 1, 1, 0, 0, 0], 1)]
)
def test_vote_semantic_label(labels, want):
    assert vote_semantic_label(labels) == want


def test_vote_is_permutation_invariant():
    rng = np.random.default_rng(1)
    for _ in range(200):
        labels = list(rng.integers(0, 4, size=int(rng.integers(0, 9))))
        assert vote_semantic_label(labels) == vote_semantic_label(rng.permutation(labels))


def test_build_noiseless_matches_ground_truth(scene):
    m = build_map(scene.db_images, scene.tracks)
    assert len(m) == 200 == m.build_stats.kept
    assert np.max(np.linalg.norm(m.xyz - scene.landmarks_xyz, axis=1)) < 1e-6
    for i in range(len(m)):
        oc = compute_observation_constraints(scene.landmarks_xyz[i], m.centers_for(i))
        assert m.max_distance[i] == pytest.approx(oc.max_distance, abs=1e-6)
        np.testing.assert_allclose(m.normals[i], oc.normal, atol=1e-6)
        assert m.theta[i] == pytest.approx(oc.theta, abs=1e-6)
        assert m.labels[i] == scene.landmark_labels[i]
    # noiseless tracks share one descriptor, so the landmark keeps it
    np.testing.assert_allclose(m.descriptors, scene.landmark_descriptors, atol=1e-6)


def test_track_cone_invariant(scene):
    m = build_map(scene.db_images, scene.tracks)
    for i, lm in enumerate(m.landmarks()):
        C = m.centers_for(i)
        d = np.linalg.norm(C - lm.X, axis=1)
        assert np.all(d <= lm.max_distance)
        cosines = np.clip(((C - lm.X) / d[:, None]) @ lm.normal, -1, 1)
        assert np.all(np.arccos(cosines) <= lm.theta / 2 + 1e-9)


def test_build_is_deterministic(scene):
    a = build_map(scene.db_images, scene.tracks)
    b = build_map(scene.db_images, scene.tracks)
    assert a.equals(b)


def test_identical_poses_track_dropped(scene):
    im = scene.db_images[0]
    twin = type(im)(999, "twin", im.camera, im.pose, im.xy, im.descriptors, im.labels, im.scores, im.global_descriptor)
    tracks = list(scene.tracks[:5]) + [Track(((im.id, 0), (999, 0)))]
    m = build_map(list(scene.db_images) + [twin], tracks)
    assert len(m) == 5
    assert m.build_stats.dropped == {"degenerate_baseline": 1}


def test_noisy_build_respects_reprojection_filter():
    s = add_noise(generate_scene(SceneConfig(seed=3)), NoiseConfig(pixel_sigma=1.0, seed=3))
    m = build_map(s.db_images, s.tracks, MapBuildConfig(max_reproj_px=4.0))
    assert len(m) > 150
    assert np.all(m.mean_reproj_err <= 4.0) and np.all(m.mean_reproj_err >= 0)
    strict = build_map(s.db_images, s.tracks, MapBuildConfig(max_reproj_px=1.0))
    assert len(strict) < len(m)
    assert strict.build_stats.dropped.get("reprojection", 0) == len(s.tracks) - len(strict)


def test_build_errors(scene):
    with pytest.raises(IngestError):
        build_map(scene.db_images, [Track(((12345, 0), (1, 0)))])
    with pytest.raises(IngestError):
        build_map(scene.db_images, [Track(((1, 10**6), (2, 0)))])
    with pytest.raises(EmptyMapError):
        build_map(scene.db_images, [])


def test_track_rejects_repeated_image():
    with pytest.raises(ValueError):
        Track(((1, 0), (1, 3)))


def test_keypoint_landmark_lookup(gt_map, scene):
    im = scene.db_images[0]
    lut = gt_map.keypoint_landmarks(im.id)
    assert len(lut) == im.num_keypoints
    for li in lut[lut >= 0]:
        s, e = gt_map.track_offsets[li], gt_map.track_offsets[li + 1]
        assert im.id in gt_map.track_image_ids[s:e]


def test_gt_map_pose_center_type(gt_map):
    assert all(isinstance(im.pose, Pose) for im in gt_map.images)
