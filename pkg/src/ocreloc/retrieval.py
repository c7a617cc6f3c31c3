"""Global-descriptor retrieval, per-candidate FM-PnP, DBSCAN pose clustering
and inlier-based re-ranking."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .descriptors import PcaModel, knn_search, l2_normalize_rows, pca_apply
from .errors import DescriptorError, NoHypothesisError
from .mapping import ImageRecord, LandmarkMap
from .pnp import MatchConfig, Matches, PnPConfig, PoseEstimate, match_2d2d, pnp_ransac


@dataclass
class RetrievalConfig:
    k: int = 20
    eps: float = 2.0
    min_pts: int = 2
    min_matches: int = 12
    pca_dim: Optional[int] = None


@dataclass(eq=False)
class Candidate:
    image_id: int
    distance: float
    estimate: Optional[PoseEstimate] = None

    @property
    def inliers(self) -> int:
        return self.estimate.num_inliers if self.estimate is not None else 0


@dataclass(frozen=True)
class PoseCluster:
    members: tuple[int, ...]
    total_inliers: int
    representative: int
    noise: bool = False


def derived_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(1)[0])


class GlobalIndex:
    """Normalized (optionally PCA-reduced) database global descriptors."""

    def __init__(self, m: LandmarkMap, pca: Optional[PcaModel] = None):
        self.map = m
        self.pca = pca
        self.vectors = self.transform(m.global_descriptor_matrix())

    def transform(self, V: np.ndarray) -> np.ndarray:
        V = l2_normalize_rows(np.atleast_2d(V))
        if self.pca is not None:
            V = l2_normalize_rows(pca_apply(self.pca, V))
        return V

    def query(self, gd: np.ndarray, k: int) -> list[Candidate]:
        gd = np.asarray(gd, dtype=np.float64).reshape(-1)
        if gd.shape[0] != self.map.global_dim:
            raise DescriptorError(f"query global descriptor has dim {gd.shape[0]}, map has {self.map.global_dim}")
        q = self.transform(gd[None])[0]
        return [Candidate(self.map.images[i].id, d) for i, d in knn_search(q, self.vectors, k)]


def retrieve_topk(query_gd, m: LandmarkMap, k: int, pca: Optional[PcaModel] = None) -> list[Candidate]:
    """The ``k`` database images closest to ``query_gd``, nearest first."""
    return GlobalIndex(m, pca).query(query_gd, k)


def fm_pnp(
    query: ImageRecord,
    cand: Candidate,
    m: LandmarkMap,
    match_cfg: Optional[MatchConfig] = None,
    pnp_cfg: Optional[PnPConfig] = None,
    min_matches: int = 12,
) -> Optional[PoseEstimate]:
    """Pose of ``query`` from 2D-2D matches against one retrieved image.

    Matched candidate keypoints are lifted to landmarks through the map's
    tracks; keypoints on no track are dropped. ``None`` when fewer than
    ``min_matches`` lifted matches remain or RANSAC fails.
    """
    pnp_cfg = pnp_cfg or PnPConfig()
    db_image = m.image_by_id(cand.image_id)
    ia, ib, dist = match_2d2d(query, db_image, match_cfg)
    lm = m.keypoint_landmarks(cand.image_id)[ib]
    ok = lm >= 0
    matches = Matches(ia[ok], lm[ok], dist[ok])
    if len(matches) < max(min_matches, 4):
        return None
    cfg = replace(pnp_cfg, seed=derived_seed(pnp_cfg.seed, cand.image_id))
    return pnp_ransac(matches, query.xy, query.camera, m, cfg)


def cluster_poses_dbscan(
    estimates: Sequence[Optional[PoseEstimate]], eps: float, min_pts: int
) -> list[PoseCluster]:
    """DBSCAN over camera centers.

    ``None`` entries (failed candidates) are skipped but keep their index, so
    cluster members index into ``estimates``. Noise points come back as
    singleton clusters with ``noise=True``.
    """
    if not eps > 0 or min_pts < 1:
        raise ValueError("eps must be > 0 and min_pts >= 1")
    valid = [i for i, e in enumerate(estimates) if e is not None]
    if not valid:
        return []
    C = np.array([estimates[i].pose.center for i in valid])
    D = np.sqrt(((C[:, None, :] - C[None, :, :]) ** 2).sum(-1))
    neighbors = [np.flatnonzero(D[i] <= eps) for i in range(len(valid))]
    core = np.array([len(nb) >= min_pts for nb in neighbors])
    labels = np.full(len(valid), -1)
    next_label = 0
    for i in range(len(valid)):
        if labels[i] != -1 or not core[i]:
            continue
        labels[i] = next_label
        frontier = list(neighbors[i])
        while frontier:
            j = frontier.pop(0)
            if labels[j] == -1:
                labels[j] = next_label
                if core[j]:
                    frontier.extend(neighbors[j])
        next_label += 1

    def make(members, noise):
        inl = [estimates[i].num_inliers for i in members]
        rep = members[int(np.argmax(inl))]  # argmax takes the lowest index on ties
        return PoseCluster(tuple(members), int(sum(inl)), rep, noise)

    clusters = [make([valid[i] for i in np.flatnonzero(labels == lbl)], False) for lbl in range(next_label)]
    clusters += [make([valid[i]], True) for i in np.flatnonzero(labels == -1)]
    return clusters


def select_initial_pose(clusters: Sequence[PoseCluster], candidates: Sequence[Candidate]):
    """Pick the cluster with the most inliers and return its best estimate.

    Ties go to the smaller mean retrieval distance, then to the lower
    representative index. Also returns the candidates re-ordered: winning
    cluster members by descending inliers, then the rest in retrieval order.
    """
    clusters = [c for c in clusters if c.members]
    if not clusters:
        raise NoHypothesisError("every retrieved candidate failed FM-PnP")

    def key(c: PoseCluster):
        mean_dist = float(np.mean([candidates[i].distance for i in c.members]))
        return (-c.total_inliers, mean_dist, c.representative)

    win = min(clusters, key=key)
    first = sorted(win.members, key=lambda i: (-candidates[i].inliers, i))
    in_win = set(win.members)
    rest = [i for i in range(len(candidates)) if i not in in_win]
    ordered = [candidates[i] for i in first + rest]
    return candidates[win.representative].estimate, ordered


def initial_pose(
    query: ImageRecord,
    m: LandmarkMap,
    cfg: Optional[RetrievalConfig] = None,
    match_cfg: Optional[MatchConfig] = None,
    pnp_cfg: Optional[PnPConfig] = None,
    index: Optional[GlobalIndex] = None,
):
    """Retrieve, run FM-PnP on every candidate, cluster and select.

    Returns ``(estimate, ordered candidates)``; raises
    :class:`NoHypothesisError` when no candidate yields a pose.
    """
    cfg = cfg or RetrievalConfig()
    index = index or GlobalIndex(m)
    candidates = index.query(query.global_descriptor, cfg.k)
    for c in candidates:
        c.estimate = fm_pnp(query, c, m, match_cfg, pnp_cfg, cfg.min_matches)
    clusters = cluster_poses_dbscan([c.estimate for c in candidates], cfg.eps, cfg.min_pts)
    return select_initial_pose(clusters, candidates)
