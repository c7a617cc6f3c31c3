"""Observation-constraints landmark maps.

A :class:`LandmarkMap` is stored column-wise (one array per landmark field,
tracks in CSR form) so maps with 1e5+ landmarks stay cheap to cull and
serialize. :meth:`LandmarkMap.landmark` gives a per-landmark view.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Optional, Sequence

import numpy as np

from .errors import EmptyMapError, GeometryError, IngestError
from .geometry import PinholeCamera, Pose, reprojection_errors, triangulate

log = logging.getLogger(__name__)

DEGENERATE_NORMAL = np.array([0.0, 0.0, 1.0])
DEGENERATE_MEAN_NORM = 1e-6
FULL_ANGLE = 2.0 * math.pi


@dataclass(frozen=True)
class Keypoint:
    px: tuple[float, float]
    descriptor: np.ndarray
    semantic_label: int = 0
    score: float = 1.0


@dataclass(eq=False)
class ImageRecord:
    """A calibrated image with keypoints and a global descriptor.

    ``pose`` is ``None`` for query images. Keypoint attributes are parallel
    arrays: ``xy`` (N, 2), ``descriptors`` (N, D) float32, ``labels`` (N,),
    ``scores`` (N,).
    """

    id: int
    name: str
    camera: PinholeCamera
    pose: Optional[Pose]
    xy: np.ndarray
    descriptors: np.ndarray
    labels: np.ndarray
    scores: np.ndarray
    global_descriptor: np.ndarray

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=np.float64).reshape(-1, 2)
        n = len(self.xy)
        desc = np.asarray(self.descriptors, dtype=np.float32)
        dim = desc.shape[-1] if desc.ndim == 2 else (desc.size // n if n else 0)
        self.descriptors = desc.reshape(n, dim)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(n)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(n)
        self.global_descriptor = np.asarray(self.global_descriptor, dtype=np.float32).reshape(-1)

    @classmethod
    def from_keypoints(cls, id, name, camera, pose, keypoints: Sequence[Keypoint], global_descriptor, dim=None):
        if keypoints:
            xy = [k.px for k in keypoints]
            desc = np.array([np.asarray(k.descriptor, dtype=np.float32) for k in keypoints])
        else:
            xy = np.zeros((0, 2))
            desc = np.zeros((0, dim or 0), dtype=np.float32)
        return cls(
            id, name, camera, pose, xy, desc,
            [k.semantic_label for k in keypoints], [k.score for k in keypoints],
            global_descriptor,
        )

    @property
    def num_keypoints(self) -> int:
        return len(self.xy)

    @property
    def local_dim(self) -> int:
        return self.descriptors.shape[1]

    def keypoint(self, i: int) -> Keypoint:
        return Keypoint(
            (float(self.xy[i, 0]), float(self.xy[i, 1])),
            self.descriptors[i],
            int(self.labels[i]),
            float(self.scores[i]),
        )

    def without_pose(self) -> "ImageRecord":
        return ImageRecord(
            self.id, self.name, self.camera, None, self.xy, self.descriptors,
            self.labels, self.scores, self.global_descriptor,
        )


@dataclass(frozen=True)
class Track:
    """(image id, keypoint index) observations of one scene point."""

    elements: tuple[tuple[int, int], ...]
    point_id: Optional[int] = None
    color: tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        elements = tuple((int(i), int(k)) for i, k in self.elements)
        object.__setattr__(self, "elements", elements)
        image_ids = [i for i, _ in elements]
        if len(set(image_ids)) != len(image_ids):
            raise ValueError(f"track {self.point_id} observes an image more than once")

    def __len__(self) -> int:
        return len(self.elements)


class ObservationConstraints(NamedTuple):
    max_distance: float
    normal: np.ndarray
    theta: float
    degenerate: bool


@dataclass(frozen=True, eq=False)
class Landmark:
    id: int
    X: np.ndarray
    color: tuple[int, int, int]
    semantic_label: int
    descriptor: np.ndarray
    track: Track
    max_distance: float
    normal: np.ndarray
    theta: float
    mean_reproj_err: float
    degenerate: bool = False


def compute_observation_constraints(X, centers) -> ObservationConstraints:
    """Visible-field cone of a point seen from the camera ``centers``.

    Returns the farthest viewing distance, the normalized mean viewing
    direction (point to camera), and twice the largest angle between that
    direction and any single view. When the views cancel out (mean direction
    shorter than 1e-6) the cone covers every direction: ``theta = 2*pi`` with a
    fixed placeholder normal and ``degenerate=True``.
    """
    X = np.asarray(X, dtype=float).reshape(3)
    C = np.asarray(centers, dtype=float).reshape(-1, 3)
    if len(C) == 0:
        raise GeometryError("observation constraints need at least one camera center")
    diff = C - X
    dist = np.sqrt(diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1] + diff[:, 2] * diff[:, 2])
    if np.any(dist <= 1e-9):
        raise GeometryError("camera center coincides with the point", kind="coincident_center")
    dirs = diff / dist[:, None]
    mean_dir = dirs.mean(axis=0)
    norm = float(np.linalg.norm(mean_dir))
    L = float(dist.max())
    if norm < DEGENERATE_MEAN_NORM:
        return ObservationConstraints(L, DEGENERATE_NORMAL.copy(), FULL_ANGLE, True)
    n = mean_dir / norm
    cosines = np.clip(dirs @ n, -1.0, 1.0)
    theta = 2.0 * float(np.max(np.arccos(cosines)))
    return ObservationConstraints(L, n, theta, False)


def vote_semantic_label(labels: Iterable[int]) -> int:
    """Most frequent non-zero label; ties go to the smaller id, nothing known gives 0."""
    counts = Counter(int(x) for x in labels if int(x) != 0)
    if not counts:
        return 0
    best = max(counts.values())
    return min(lbl for lbl, c in counts.items() if c == best)


@dataclass
class MapBuildConfig:
    max_reproj_px: float = 4.0


@dataclass
class BuildStats:
    kept: int = 0
    dropped: dict = field(default_factory=dict)
    mean_reproj_err: float = 0.0

    @property
    def total_dropped(self) -> int:
        return sum(self.dropped.values())


class LandmarkMap:
    """Posed database images plus landmarks with observation constraints."""

    def __init__(
        self,
        images: Sequence[ImageRecord],
        ids: np.ndarray,
        xyz: np.ndarray,
        colors: np.ndarray,
        labels: np.ndarray,
        descriptors: np.ndarray,
        track_offsets: np.ndarray,
        track_image_ids: np.ndarray,
        track_kp: np.ndarray,
        max_distance: np.ndarray,
        normals: np.ndarray,
        theta: np.ndarray,
        mean_reproj_err: np.ndarray,
        degenerate: np.ndarray,
        palette: Optional[Mapping[int, str]] = None,
        local_dim: Optional[int] = None,
        global_dim: Optional[int] = None,
    ):
        self.images = list(images)
        n = len(ids)
        self.ids = np.asarray(ids, dtype=np.int64).reshape(n)
        self.xyz = np.asarray(xyz, dtype=np.float64).reshape(n, 3)
        self.colors = np.asarray(colors, dtype=np.uint8).reshape(n, 3)
        self.labels = np.asarray(labels, dtype=np.int64).reshape(n)
        if local_dim is None:
            local_dim = self.images[0].local_dim if self.images else np.shape(descriptors)[-1]
        if global_dim is None:
            global_dim = len(self.images[0].global_descriptor) if self.images else 0
        self.local_dim = int(local_dim)
        self.global_dim = int(global_dim)
        self.descriptors = np.asarray(descriptors, dtype=np.float32).reshape(n, self.local_dim)
        self.track_offsets = np.asarray(track_offsets, dtype=np.int64).reshape(n + 1)
        self.track_image_ids = np.asarray(track_image_ids, dtype=np.int64)
        self.track_kp = np.asarray(track_kp, dtype=np.int64)
        self.max_distance = np.asarray(max_distance, dtype=np.float64).reshape(n)
        self.normals = np.asarray(normals, dtype=np.float64).reshape(n, 3)
        self.theta = np.asarray(theta, dtype=np.float64).reshape(n)
        self.mean_reproj_err = np.asarray(mean_reproj_err, dtype=np.float64).reshape(n)
        self.degenerate = np.asarray(degenerate, dtype=bool).reshape(n)
        self.palette = dict(palette or {0: "unknown"})
        self.build_stats: Optional[BuildStats] = None
        self._image_index = {im.id: i for i, im in enumerate(self.images)}
        if len(self._image_index) != len(self.images):
            raise ValueError("duplicate image ids in map")
        if len({im.name for im in self.images}) != len(self.images):
            raise ValueError("duplicate image names in map")
        if len(np.unique(self.ids)) != n:
            raise ValueError("duplicate landmark ids in map")
        self._kp_lookup: dict[int, np.ndarray] = {}
        self._gd_matrix = None

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def num_landmarks(self) -> int:
        return len(self.ids)

    def image_index(self, image_id: int) -> int:
        return self._image_index[image_id]

    def image_by_id(self, image_id: int) -> ImageRecord:
        return self.images[self._image_index[image_id]]

    def track(self, i: int) -> Track:
        s, e = self.track_offsets[i], self.track_offsets[i + 1]
        return Track(
            tuple(zip(self.track_image_ids[s:e].tolist(), self.track_kp[s:e].tolist())),
            point_id=int(self.ids[i]),
            color=tuple(int(c) for c in self.colors[i]),
        )

    def landmark(self, i: int) -> Landmark:
        return Landmark(
            id=int(self.ids[i]),
            X=self.xyz[i],
            color=tuple(int(c) for c in self.colors[i]),
            semantic_label=int(self.labels[i]),
            descriptor=self.descriptors[i],
            track=self.track(i),
            max_distance=float(self.max_distance[i]),
            normal=self.normals[i],
            theta=float(self.theta[i]),
            mean_reproj_err=float(self.mean_reproj_err[i]),
            degenerate=bool(self.degenerate[i]),
        )

    def landmarks(self):
        return [self.landmark(i) for i in range(len(self))]

    def keypoint_landmarks(self, image_id: int) -> np.ndarray:
        """Landmark index for every keypoint of an image, -1 where untracked."""
        lut = self._kp_lookup.get(image_id)
        if lut is None:
            im = self.image_by_id(image_id)
            lut = np.full(im.num_keypoints, -1, dtype=np.int64)
            sel = np.flatnonzero(self.track_image_ids == image_id)
            owners = np.searchsorted(self.track_offsets, sel, side="right") - 1
            lut[self.track_kp[sel]] = owners
            self._kp_lookup[image_id] = lut
        return lut

    def global_descriptor_matrix(self) -> np.ndarray:
        if self._gd_matrix is None:
            self._gd_matrix = np.array(
                [im.global_descriptor for im in self.images], dtype=np.float64
            ).reshape(len(self.images), self.global_dim)
        return self._gd_matrix

    def centers_for(self, i: int) -> np.ndarray:
        s, e = self.track_offsets[i], self.track_offsets[i + 1]
        return np.array([self.image_by_id(int(j)).pose.center for j in self.track_image_ids[s:e]])

    def equals(self, other: "LandmarkMap") -> bool:
        """Field-for-field equality, bit-exact on floating values."""
        return map_difference(self, other) is None


def _same(a: np.ndarray, b: np.ndarray) -> bool:
    a = np.asarray(a)
    b = np.asarray(b)
    return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()


def map_difference(a: LandmarkMap, b: LandmarkMap) -> Optional[str]:
    """Name of the first differing field, or ``None`` when the maps are identical."""
    for attr in (
        "ids", "xyz", "colors", "labels", "descriptors", "track_offsets", "track_image_ids",
        "track_kp", "max_distance", "normals", "theta", "mean_reproj_err", "degenerate",
    ):
        if not _same(getattr(a, attr), getattr(b, attr)):
            return attr
    if (a.local_dim, a.global_dim) != (b.local_dim, b.global_dim):
        return "dims"
    if a.palette != b.palette:
        return "palette"
    if len(a.images) != len(b.images):
        return "images"
    for ia, ib in zip(a.images, b.images):
        if (ia.id, ia.name, ia.camera) != (ib.id, ib.name, ib.camera):
            return f"image {ia.id} header"
        if (ia.pose is None) != (ib.pose is None):
            return f"image {ia.id} pose"
        if ia.pose is not None and not (_same(ia.pose.q, ib.pose.q) and _same(ia.pose.t, ib.pose.t)):
            return f"image {ia.id} pose"
        for attr in ("xy", "descriptors", "labels", "scores", "global_descriptor"):
            if not _same(getattr(ia, attr), getattr(ib, attr)):
                return f"image {ia.id} {attr}"
    return None


def _landmark_descriptor(descs: np.ndarray) -> np.ndarray:
    mean = descs.astype(np.float64).mean(axis=0)
    n = np.linalg.norm(mean)
    # all-zero descriptors (SFM text without sidecar) stay zero
    return (mean / n if n > 1e-12 else np.zeros_like(mean)).astype(np.float32)


def build_map(
    images: Sequence[ImageRecord],
    tracks: Sequence[Track],
    cfg: Optional[MapBuildConfig] = None,
    palette: Optional[Mapping[int, str]] = None,
) -> LandmarkMap:
    """Triangulate every track and attach observation constraints.

    Tracks are dropped when triangulation fails (too few views, degenerate
    baseline, point behind a camera) or the mean reprojection error exceeds
    ``cfg.max_reproj_px``. Drop counts per reason end up in
    ``result.build_stats``.
    """
    cfg = cfg or MapBuildConfig()
    index = {im.id: im for im in images}
    if len(index) != len(images):
        raise ValueError("duplicate image ids")
    if not images:
        raise EmptyMapError("no database images")
    local_dim = images[0].local_dim
    stats = BuildStats()
    cols: dict[str, list] = {k: [] for k in (
        "ids", "xyz", "colors", "labels", "desc", "max_distance", "normals", "theta", "err", "degen",
    )}
    offsets = [0]
    t_img: list[int] = []
    t_kp: list[int] = []

    def drop(reason):
        stats.dropped[reason] = stats.dropped.get(reason, 0) + 1

    for ti, track in enumerate(tracks):
        views = []
        for image_id, kp in track.elements:
            im = index.get(image_id)
            if im is None:
                raise IngestError(f"track {ti} references unknown image id {image_id}")
            if not 0 <= kp < im.num_keypoints:
                raise IngestError(f"track {ti} references keypoint {kp} out of range for image {image_id}")
            if im.pose is None:
                raise IngestError(f"image {image_id} has no pose")
            views.append((im.camera, im.pose, im.xy[kp]))
        try:
            X = triangulate(views)
        except GeometryError as exc:
            drop(exc.kind)
            continue
        errs = np.array([reprojection_errors(c, p, X[None], uv[None])[0] for c, p, uv in views])
        mean_err = float(errs.mean())
        if not np.all(np.isfinite(errs)):
            drop("cheirality")
            continue
        if mean_err > cfg.max_reproj_px:
            drop("reprojection")
            continue
        centers = np.array([p.center for _, p, _ in views])
        try:
            oc = compute_observation_constraints(X, centers)
        except GeometryError as exc:
            drop(exc.kind)
            continue
        descs = np.array([index[i].descriptors[k] for i, k in track.elements])
        cols["ids"].append(track.point_id if track.point_id is not None else ti)
        cols["xyz"].append(X)
        cols["colors"].append(track.color)
        cols["labels"].append(vote_semantic_label(index[i].labels[k] for i, k in track.elements))
        cols["desc"].append(_landmark_descriptor(descs))
        cols["max_distance"].append(oc.max_distance)
        cols["normals"].append(oc.normal)
        cols["theta"].append(oc.theta)
        cols["err"].append(mean_err)
        cols["degen"].append(oc.degenerate)
        for i, k in track.elements:
            t_img.append(i)
            t_kp.append(k)
        offsets.append(len(t_img))

    stats.kept = len(cols["ids"])
    if stats.kept == 0:
        raise EmptyMapError(f"no landmark survived map building (dropped: {stats.dropped})")
    stats.mean_reproj_err = float(np.mean(cols["err"]))
    if stats.dropped:
        log.info("dropped %d of %d tracks: %s", stats.total_dropped, len(tracks), stats.dropped)
    m = LandmarkMap(
        images,
        ids=np.array(cols["ids"]),
        xyz=np.array(cols["xyz"]),
        colors=np.array(cols["colors"]),
        labels=np.array(cols["labels"]),
        descriptors=np.array(cols["desc"], dtype=np.float32).reshape(stats.kept, local_dim),
        track_offsets=np.array(offsets),
        track_image_ids=np.array(t_img),
        track_kp=np.array(t_kp),
        max_distance=np.array(cols["max_distance"]),
        normals=np.array(cols["normals"]),
        theta=np.array(cols["theta"]),
        mean_reproj_err=np.array(cols["err"]),
        degenerate=np.array(cols["degen"]),
        palette=palette,
        local_dim=local_dim,
    )
    m.build_stats = stats
    return m
