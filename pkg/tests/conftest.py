import numpy as np
import pytest

from ocreloc.geometry import PinholeCamera, Pose
from ocreloc.retrieval import GlobalIndex
from ocreloc.synthetic import SceneConfig, generate_scene


@pytest.fixture(scope="session")
def scene():
    """Default noiseless scene: 200 landmarks, 20 db images, 50 queries."""
    return generate_scene(SceneConfig(seed=0))


@pytest.fixture(scope="session")
def gt_map(scene):
    return scene.gt_map


@pytest.fixture(scope="session")
def gt_index(gt_map):
    return GlobalIndex(gt_map)


@pytest.fixture
def cam():
    return PinholeCamera(500.0, 500.0, 320.0, 240.0, 640, 480)


def random_pose(rng, center_scale=5.0):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    return Pose(q, rng.normal(size=3) * center_scale)


def points_in_front(rng, cam, pose, n, depth=(4.0, 12.0), margin=20.0):
    """World points that project inside the image at the given depth range."""
    u = rng.uniform(margin, cam.width - margin, n)
    v = rng.uniform(margin, cam.height - margin, n)
    z = rng.uniform(*depth, n)
    Xc = np.column_stack([(u - cam.cx) / cam.fx * z, (v - cam.cy) / cam.fy * z, z])
    return (Xc - pose.t) @ pose.R


def random_constraint_map(rng, n, extent=20.0, local_dim=8):
    """Landmarks with random cones and no database images, for visibility checks."""
    from ocreloc.mapping import LandmarkMap

    X = rng.uniform(-extent, extent, size=(n, 3))
    normals = rng.normal(size=(n, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    degenerate = rng.random(n) < 0.05
    theta = np.where(degenerate, 2 * np.pi, rng.uniform(0, np.pi, n))
    desc = rng.normal(size=(n, local_dim))
    desc /= np.linalg.norm(desc, axis=1, keepdims=True)
    return LandmarkMap(
        [], ids=np.arange(n), xyz=X, colors=np.zeros((n, 3)), labels=rng.integers(0, 5, n),
        descriptors=desc, track_offsets=np.zeros(n + 1), track_image_ids=[], track_kp=[],
        max_distance=rng.uniform(1, 2 * extent, n), normals=normals, theta=theta,
        mean_reproj_err=np.zeros(n), degenerate=degenerate, local_dim=local_dim, global_dim=4,
    )


def looking_into(rng, extent=20.0):
    """A pose inside the box facing a random point in it."""
    C = rng.uniform(-extent, extent, 3)
    target = rng.uniform(-extent, extent, 3)
    while np.linalg.norm(target - C) < 1.0:
        target = rng.uniform(-extent, extent, 3)
    return Pose.look_at(C, target)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, detail = RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
