"""Deterministic synthetic scenes with known ground truth, noise injection and
brute-force oracles for testing the localization pipeline.

Two layouts are available. ``orbit`` scatters landmarks in a box watched by
cameras on a horizontal arc; ``corridor`` lines two long walls with
landmarks and walks cameras down the middle, which scales to maps with
1e5+ landmarks while each image still sees only a slice of the scene.

Every landmark carries a surface normal and is only observed from cameras
within ``facing_angle_deg`` of it, so visible-field cones are informative.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import OcrelocError
from .geometry import PinholeCamera, Pose, project, project_points
from .mapping import (
    DEGENERATE_MEAN_NORM,
    DEGENERATE_NORMAL,
    FULL_ANGLE,
    ImageRecord,
    LandmarkMap,
    Track,
    vote_semantic_label,
)

BORDER_PX = 4.0


@dataclass
class SceneConfig:
    n_landmarks: int = 200
    n_db_images: int = 20
    n_queries: int = 50
    extent: float = 10.0
    layout: str = "orbit"
    fx: float = 500.0
    fy: float = 500.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480
    local_dim: int = 32
    global_dim: int = 64
    n_semantic_classes: int = 8
    seed: int = 0
    min_covisible: int = 30
    facing_angle_deg: float = 75.0
    distractor_fraction: float = 0.1
    orbit_arc_deg: float = 150.0
    max_view_distance: float = math.inf
    corridor_width: float = 8.0
    corridor_height: float = 6.0
    global_noise: float = 0.01

    def __post_init__(self):
        if min(self.n_landmarks, self.n_db_images, self.n_queries) < 1:
            raise ValueError("scene counts must be >= 1")
        if not self.extent > 0:
            raise ValueError("extent must be > 0")
        if self.layout not in ("orbit", "corridor"):
            raise ValueError(f"unknown layout {self.layout!r}")

    @property
    def camera(self) -> PinholeCamera:
        return PinholeCamera(self.fx, self.fy, self.cx, self.cy, self.width, self.height)


@dataclass
class NoiseConfig:
    pixel_sigma: float = 0.0
    descriptor_sigma: float = 0.0
    label_flip_rate: float = 0.0
    outlier_match_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.pixel_sigma < 0 or self.descriptor_sigma < 0:
            raise ValueError("noise sigmas must be >= 0")
        if not 0 <= self.label_flip_rate <= 1 or not 0 <= self.outlier_match_rate < 1:
            raise ValueError("label_flip_rate must be in [0, 1], outlier_match_rate in [0, 1)")

    @property
    def is_zero(self) -> bool:
        return not (self.pixel_sigma or self.descriptor_sigma or self.label_flip_rate or self.outlier_match_rate)


@dataclass(eq=False)
class Scene:
    cfg: SceneConfig
    landmarks_xyz: np.ndarray
    landmark_normals: np.ndarray
    landmark_descriptors: np.ndarray
    landmark_labels: np.ndarray
    db_images: list
    tracks: list
    queries: list
    query_gt: dict
    # per query: landmark index of every keypoint, -1 for distractors
    query_correspondences: dict
    gt_map: Optional[LandmarkMap] = None
    palette: dict = field(default_factory=dict)

    @property
    def camera(self) -> PinholeCamera:
        return self.cfg.camera

    def query_by_name(self, name: str) -> ImageRecord:
        for q in self.queries:
            if q.name == name:
                return q
        raise KeyError(name)


# --- layouts ------------------------------------------------------------------

class _Orbit:
    def __init__(self, cfg: SceneConfig):
        self.cfg = cfg
        E = cfg.extent
        self.radius = 1.5 * E
        self.half_arc = math.radians(cfg.orbit_arc_deg) / 2

    def sample_landmarks(self, rng, n):
        E = self.cfg.extent
        X = rng.uniform([-E / 2, -E / 2, -E / 4], [E / 2, E / 2, E / 4], size=(n, 3))
        # face a random point of the camera arc
        ang = -math.pi / 2 + rng.uniform(-self.half_arc, self.half_arc, n)
        target = np.column_stack([self.radius * np.cos(ang), self.radius * np.sin(ang), np.zeros(n)])
        nrm = target - X
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        nrm += rng.normal(0, 0.3, (n, 3))
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        return X, nrm

    def pose_at(self, ang, dr, dz, target_jitter):
        E = self.cfg.extent
        r = self.radius + dr
        C = np.array([r * math.cos(ang), r * math.sin(ang), dz])
        return Pose.look_at(C, target_jitter)

    def db_poses(self, rng, n):
        E = self.cfg.extent
        base = np.linspace(-self.half_arc, self.half_arc, n) if n > 1 else np.zeros(1)
        step = (2 * self.half_arc / (n - 1)) if n > 1 else 0.0
        poses = []
        for a in base:
            ang = -math.pi / 2 + a + rng.uniform(-0.2, 0.2) * step
            poses.append(self.pose_at(ang, rng.uniform(-0.05, 0.05) * E, rng.uniform(-0.1, 0.1) * E,
                                      rng.uniform(-0.05, 0.05, 3) * E))
        return poses

    def query_pose(self, rng):
        E = self.cfg.extent
        ang = -math.pi / 2 + rng.uniform(-self.half_arc, self.half_arc)
        return self.pose_at(ang, rng.uniform(-0.1, 0.1) * E, rng.uniform(-0.1, 0.1) * E,
                            rng.uniform(-0.08, 0.08, 3) * E)

    def anchor(self, rng):
        return self.query_pose(rng)


class _Corridor:
    eye_height = 1.6

    def __init__(self, cfg: SceneConfig):
        self.cfg = cfg
        self.length = cfg.extent
        self.half_w = cfg.corridor_width / 2

    def sample_landmarks(self, rng, n):
        side = np.where(rng.random(n) < 0.5, -1.0, 1.0)
        x = rng.uniform(0, self.length, n)
        y = side * (self.half_w + rng.uniform(-0.2, 0.2, n))
        z = rng.uniform(0, self.cfg.corridor_height, n)
        X = np.column_stack([x, y, z])
        nrm = np.column_stack([np.zeros(n), -side, np.zeros(n)]) + rng.normal(0, 0.25, (n, 3))
        nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
        return X, nrm

    def pose_at(self, x, side, yaw, dy, dz):
        C = np.array([x, dy, self.eye_height + dz])
        d = np.array([math.sin(yaw), side * math.cos(yaw), 0.0])
        return Pose.look_at(C, C + d)

    def db_poses(self, rng, n):
        poses = []
        xs = np.linspace(0, self.length, (n + 1) // 2)
        for i in range(n):
            x = xs[i // 2] + rng.uniform(-0.1, 0.1)
            side = 1.0 if i % 2 == 0 else -1.0
            poses.append(self.pose_at(x, side, rng.uniform(-0.2, 0.2), rng.uniform(-0.3, 0.3), rng.uniform(-0.1, 0.1)))
        return poses

    def query_pose(self, rng):
        side = 1.0 if rng.random() < 0.5 else -1.0
        return self.pose_at(rng.uniform(0, self.length), side, rng.uniform(-0.3, 0.3),
                            rng.uniform(-0.5, 0.5), rng.uniform(-0.15, 0.15))

    def anchor(self, rng):
        return self.query_pose(rng)


def _layout(cfg: SceneConfig):
    return _Orbit(cfg) if cfg.layout == "orbit" else _Corridor(cfg)


def observed_mask(cfg: SceneConfig, pose: Pose, X: np.ndarray, normals: np.ndarray):
    """Which landmarks a camera at ``pose`` observes, and their pixels."""
    cam = cfg.camera
    uv, front = project_points(cam, pose, X)
    C = pose.center
    d = C - X
    dist = np.linalg.norm(d, axis=1)
    facing = np.einsum("ij,ij->i", normals, d) >= math.cos(math.radians(cfg.facing_angle_deg)) * dist
    with np.errstate(invalid="ignore"):
        inside = (
            front
            & (uv[:, 0] >= BORDER_PX) & (uv[:, 0] <= cam.width - BORDER_PX)
            & (uv[:, 1] >= BORDER_PX) & (uv[:, 1] <= cam.height - BORDER_PX)
        )
    return inside & facing & (dist <= cfg.max_view_distance), uv


def _random_unit(rng, n, d):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


class _GlobalEncoder:
    """Smooth viewpoint encoding: RBF on camera center times a heading kernel."""

    def __init__(self, cfg: SceneConfig, layout, rng):
        self.cfg = cfg
        anchors = [layout.anchor(rng) for _ in range(cfg.global_dim)]
        self.centers = np.array([p.center for p in anchors])
        self.dirs = np.array([p.R[2] for p in anchors])
        D = np.linalg.norm(self.centers[:, None] - self.centers[None], axis=-1)
        np.fill_diagonal(D, np.inf)
        nn = np.min(D, axis=1) if len(anchors) > 1 else np.array([cfg.extent])
        self.bandwidth = 1.5 * float(np.median(nn)) + 1e-9
        self.heading_tau = 0.25

    def encode(self, pose: Pose, rng) -> np.ndarray:
        C, f = pose.center, pose.R[2]
        d2 = np.sum((self.centers - C) ** 2, axis=1)
        v = np.exp(-d2 / (2 * self.bandwidth**2)) * np.exp((self.dirs @ f - 1.0) / self.heading_tau)
        v = v + rng.normal(0, self.cfg.global_noise, len(v))
        n = np.linalg.norm(v)
        if n < 1e-12:
            v = np.full(len(v), 1.0)
            n = np.linalg.norm(v)
        return (v / n).astype(np.float32)


def _make_image(image_id, name, cfg, pose, lm_idx, uv, desc, labels, gd, rng, with_pose=True):
    """Keypoints for observed landmarks plus distractors, in shuffled order."""
    n_obs = len(lm_idx)
    n_dis = int(round(cfg.distractor_fraction * n_obs))
    D = cfg.local_dim
    xy = np.vstack([uv, rng.uniform([BORDER_PX, BORDER_PX], [cfg.width - BORDER_PX, cfg.height - BORDER_PX], (n_dis, 2))])
    dsc = np.vstack([desc[lm_idx], _random_unit(rng, n_dis, D)]).astype(np.float32)
    lbl = np.concatenate([labels[lm_idx], rng.integers(1, cfg.n_semantic_classes + 1, n_dis)])
    corr = np.concatenate([lm_idx, np.full(n_dis, -1)])
    perm = rng.permutation(len(xy))
    rec = ImageRecord(
        image_id, name, cfg.camera, pose if with_pose else None,
        xy[perm], dsc[perm], lbl[perm], np.ones(len(xy)), gd,
    )
    return rec, corr[perm]


def generate_scene(cfg: Optional[SceneConfig] = None) -> Scene:
    """Build a synthetic scene; identical configs give bit-identical scenes."""
    cfg = cfg or SceneConfig()
    ss = np.random.SeedSequence(cfg.seed)
    r_lm, r_db, r_q, r_enc, r_kp = (np.random.default_rng(s) for s in ss.spawn(5))
    layout = _layout(cfg)
    db_poses = layout.db_poses(r_db, cfg.n_db_images)

    # rejection-sample landmarks until each is observed by >= 2 database images
    X = np.zeros((0, 3))
    N = np.zeros((0, 3))
    attempts = 0
    while len(X) < cfg.n_landmarks:
        attempts += 1
        if attempts > 10_000:
            raise OcrelocError("could not place landmarks seen by two database images")
        need = cfg.n_landmarks - len(X)
        Xc, Nc = layout.sample_landmarks(r_lm, max(2 * need, 64))
        count = np.zeros(len(Xc), dtype=int)
        for p in db_poses:
            count += observed_mask(cfg, p, Xc, Nc)[0]
        ok = np.flatnonzero(count >= 2)[:need]
        X = np.vstack([X, Xc[ok]])
        N = np.vstack([N, Nc[ok]])

    desc = _random_unit(r_lm, cfg.n_landmarks, cfg.local_dim).astype(np.float32)
    labels = r_lm.integers(1, cfg.n_semantic_classes + 1, cfg.n_landmarks)
    encoder = _GlobalEncoder(cfg, layout, r_enc)

    db_images = []
    obs: list[list[tuple[int, int]]] = [[] for _ in range(cfg.n_landmarks)]
    for i, pose in enumerate(db_poses):
        mask, uv = observed_mask(cfg, pose, X, N)
        lm_idx = np.flatnonzero(mask)
        rec, corr = _make_image(
            i + 1, f"db/{i:05d}.png", cfg, pose, lm_idx, uv[lm_idx], desc, labels,
            encoder.encode(pose, r_enc), r_kp,
        )
        db_images.append(rec)
        for kp in np.flatnonzero(corr >= 0):
            obs[int(corr[kp])].append((rec.id, int(kp)))
    tracks = [Track(tuple(sorted(o)), point_id=j + 1, color=_label_color(labels[j])) for j, o in enumerate(obs)]

    queries, gt, corrs = [], {}, {}
    for qi in range(cfg.n_queries):
        for attempt in range(10_000):
            pose = layout.query_pose(r_q)
            mask, uv = observed_mask(cfg, pose, X, N)
            if mask.sum() >= cfg.min_covisible:
                break
        else:
            raise OcrelocError(f"query {qi}: fewer than {cfg.min_covisible} covisible landmarks after 10^4 tries")
        lm_idx = np.flatnonzero(mask)
        name = f"query/{qi:05d}.png"
        rec, corr = _make_image(
            -(qi + 1), name, cfg, pose, lm_idx, uv[lm_idx], desc, labels,
            encoder.encode(pose, r_enc), r_kp, with_pose=False,
        )
        queries.append(rec)
        gt[name] = pose
        corrs[name] = corr

    palette = {0: "unknown", **{k: f"class_{k}" for k in range(1, cfg.n_semantic_classes + 1)}}
    scene = Scene(cfg, X, N, desc, labels, db_images, tracks, queries, gt, corrs, None, palette)
    scene.gt_map = ground_truth_map(scene)
    return scene


def _label_color(label: int) -> tuple[int, int, int]:
    h = (int(label) * 2654435761) & 0xFFFFFF
    return ((h >> 16) & 255, (h >> 8) & 255, h & 255)


def observation_constraints_batch(X: np.ndarray, offsets: np.ndarray, centers: np.ndarray):
    """Vectorized observation constraints for many points.

    ``centers[offsets[i]:offsets[i+1]]`` are the camera centers of point ``i``.
    Same definitions as :func:`ocreloc.mapping.compute_observation_constraints`.
    """
    n = len(X)
    counts = np.diff(offsets)
    owner = np.repeat(np.arange(n), counts)
    d = centers - X[owner]
    dist = np.linalg.norm(d, axis=1)
    dirs = d / dist[:, None]
    L = np.maximum.reduceat(dist, offsets[:-1]) if n else np.zeros(0)
    mean = np.add.reduceat(dirs, offsets[:-1], axis=0) / counts[:, None] if n else np.zeros((0, 3))
    mnorm = np.linalg.norm(mean, axis=1)
    degen = mnorm < DEGENERATE_MEAN_NORM
    normals = np.where(degen[:, None], DEGENERATE_NORMAL, mean / np.where(degen, 1.0, mnorm)[:, None])
    ang = np.arccos(np.clip(np.einsum("ij,ij->i", dirs, normals[owner]), -1.0, 1.0))
    theta = 2.0 * np.maximum.reduceat(ang, offsets[:-1]) if n else np.zeros(0)
    theta = np.where(degen, FULL_ANGLE, theta)
    return L, normals, theta, degen


def ground_truth_map(scene: Scene) -> LandmarkMap:
    """Landmark map at the true point positions, with constraints from the true camera centers."""
    images = {im.id: im for im in scene.db_images}
    offsets = np.zeros(len(scene.tracks) + 1, dtype=np.int64)
    offsets[1:] = np.cumsum([len(t) for t in scene.tracks])
    t_img = np.array([i for t in scene.tracks for i, _ in t.elements], dtype=np.int64)
    t_kp = np.array([k for t in scene.tracks for _, k in t.elements], dtype=np.int64)
    centers_by_image = {i: im.pose.center for i, im in images.items()}
    centers = np.array([centers_by_image[i] for i in t_img]).reshape(-1, 3)
    X = scene.landmarks_xyz
    L, normals, theta, degen = observation_constraints_batch(X, offsets, centers)
    # landmark descriptor = normalized mean of its track descriptors, label by vote
    D = scene.cfg.local_dim
    base = np.cumsum([0] + [im.num_keypoints for im in scene.db_images])
    row_of = {im.id: base[j] for j, im in enumerate(scene.db_images)}
    rows = np.array([row_of[i] for i in t_img.tolist()], dtype=np.int64) + t_kp
    all_desc = np.vstack([im.descriptors for im in scene.db_images]).astype(np.float64)
    all_lbl = np.concatenate([im.labels for im in scene.db_images])
    sums = np.add.reduceat(all_desc[rows].reshape(-1, D), offsets[:-1], axis=0)
    desc = (sums / np.linalg.norm(sums, axis=1, keepdims=True)).astype(np.float32)
    lbl = all_lbl[rows]
    labels = np.array([vote_semantic_label(lbl[a:b]) for a, b in zip(offsets[:-1], offsets[1:])], dtype=np.int64)
    return LandmarkMap(
        scene.db_images,
        ids=np.array([t.point_id for t in scene.tracks]),
        xyz=X,
        colors=np.array([t.color for t in scene.tracks]),
        labels=labels,
        descriptors=desc,
        track_offsets=offsets,
        track_image_ids=t_img,
        track_kp=t_kp,
        max_distance=L,
        normals=normals,
        theta=theta,
        mean_reproj_err=np.zeros(len(X)),
        degenerate=degen,
        palette=scene.palette,
        local_dim=D,
        global_dim=scene.cfg.global_dim,
    )


def _perturb_image(im: ImageRecord, noise: NoiseConfig, rng, n_classes, outlier_desc=None, true_corr=None):
    xy, desc, labels = im.xy, im.descriptors, im.labels
    if noise.pixel_sigma:
        xy = xy + rng.normal(0, noise.pixel_sigma, xy.shape)
        c = im.camera
        xy = np.column_stack([np.clip(xy[:, 0], 0, c.width - 1e-3), np.clip(xy[:, 1], 0, c.height - 1e-3)])
    if noise.descriptor_sigma:
        d = desc.astype(np.float64) + rng.normal(0, noise.descriptor_sigma, desc.shape)
        desc = (d / np.linalg.norm(d, axis=1, keepdims=True)).astype(np.float32)
    if noise.label_flip_rate:
        flip = rng.random(len(labels)) < noise.label_flip_rate
        # uniformly random *other* class in 1..n_classes
        offs = rng.integers(1, n_classes, len(labels))
        flipped = (labels - 1 + offs) % n_classes + 1
        labels = np.where(flip & (labels > 0), flipped, labels)
    if noise.outlier_match_rate and outlier_desc is not None:
        tracked = np.flatnonzero(true_corr >= 0)
        swap = tracked[rng.random(len(tracked)) < noise.outlier_match_rate]
        if len(tracked) > 1 and len(swap):
            # confuse each chosen keypoint with the landmark imaged closest to it
            P = im.xy[tracked]
            d2 = np.sum((im.xy[swap][:, None, :] - P[None, :, :]) ** 2, axis=-1)
            d2[np.arange(len(swap)), np.searchsorted(tracked, swap)] = np.inf
            other = true_corr[tracked[np.argmin(d2, axis=1)]]
            desc = desc.copy()
            desc[swap] = outlier_desc[other]
    return ImageRecord(im.id, im.name, im.camera, im.pose, xy, desc, labels, im.scores, im.global_descriptor)


def add_noise(scene: Scene, noise: NoiseConfig) -> Scene:
    """Copy of ``scene`` with perturbed keypoints; the zero config returns it unchanged.

    Pixel jitter is Gaussian and clipped to the image; descriptors get
    Gaussian jitter and are re-normalized; labels flip to a uniformly random
    other class. ``outlier_match_rate`` swaps that fraction of query keypoint
    descriptors for the descriptor of a different landmark (the keypoint keeps
    its own label) to plant gross wrong matches. Ground truth is untouched.
    """
    if noise.is_zero:
        return scene
    ss = np.random.SeedSequence([noise.seed, 0x5EED])
    r_db, r_q = (np.random.default_rng(s) for s in ss.spawn(2))
    k = scene.cfg.n_semantic_classes
    db = [_perturb_image(im, replace(noise, outlier_match_rate=0.0), r_db, k) for im in scene.db_images]
    qs = [
        _perturb_image(q, noise, r_q, k, scene.landmark_descriptors, scene.query_correspondences[q.name])
        for q in scene.queries
    ]
    out = replace(scene, db_images=db, queries=qs)
    out.gt_map = ground_truth_map(out)
    return out


# --- oracles -------------------------------------------------------------------

def oracle_visible(m: LandmarkMap, pose: Pose, cam: PinholeCamera, cfg) -> np.ndarray:
    """Landmark-by-landmark re-check of the visible-field conditions."""
    C = [float(c) for c in pose.center]
    out = []
    for i in range(len(m)):
        X = m.xyz[i]
        d = [C[0] - float(X[0]), C[1] - float(X[1]), C[2] - float(X[2])]
        dist = math.sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
        if not dist <= float(m.max_distance[i]) * cfg.distance_slack:
            continue
        if not m.degenerate[i]:
            n = m.normals[i]
            c = (float(n[0]) * d[0] + float(n[1]) * d[1] + float(n[2]) * d[2]) / dist
            if not math.acos(min(1.0, max(-1.0, c))) <= float(m.theta[i]) / 2.0 + cfg.angle_slack:
                continue
        uv = project(cam, pose, X)
        if uv is None or not (0 <= uv[0] < cam.width and 0 <= uv[1] < cam.height):
            continue
        out.append(i)
    return np.array(out, dtype=np.int64)


def oracle_knn(query, database, k: int) -> list[tuple[int, float]]:
    """Exhaustive sort by (distance, index)."""
    q = [float(x) for x in query]
    rows = []
    for i, row in enumerate(database):
        rows.append((math.sqrt(sum((float(a) - b) ** 2 for a, b in zip(row, q))), i))
    rows.sort()
    return [(i, d) for d, i in rows[: max(0, min(k, len(rows)))]]
