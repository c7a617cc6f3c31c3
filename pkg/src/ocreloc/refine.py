"""Iterative pose refinement against the whole map using observation
constraints, with Monte-Carlo sampling uncertainty as the stopping test."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple, Optional

import numpy as np

from .descriptors import ratio_test, two_nearest
from .errors import EmptyVisibleSetError, PnPError, UnstableUncertaintyError
from .geometry import PinholeCamera, Pose, pose_error, project_points, reprojection_errors
from .mapping import ImageRecord, LandmarkMap
from .pnp import Matches, PnPConfig, PoseEstimate, labels_compatible, pnp_ransac
from .retrieval import derived_seed


@dataclass
class RefinerConfig:
    reproj_threshold_px: float = 10.0
    distance_slack: float = 1.1
    angle_slack: float = 0.1
    mc_fractions: tuple[float, ...] = (30.0, 50.0, 70.0)
    mc_trials: int = 10
    max_rounds: int = 10
    ratio: float = 0.8
    use_semantics: bool = True
    seed: int = 0

    def __post_init__(self):
        self.mc_fractions = tuple(float(f) for f in self.mc_fractions)
        if not all(0 < f <= 100 for f in self.mc_fractions) or not self.mc_fractions:
            raise ValueError("mc_fractions must lie in (0, 100]")
        if self.distance_slack < 1 or self.angle_slack < 0:
            raise ValueError("distance_slack must be >= 1 and angle_slack >= 0")
        if self.max_rounds < 1 or self.mc_trials < 1:
            raise ValueError("max_rounds and mc_trials must be >= 1")


class RoundRecord(NamedTuple):
    round: int
    num_visible: int
    num_matches: int
    num_inliers: int
    sigma_t: float
    sigma_r: float
    accepted: bool


def visible_landmarks(m: LandmarkMap, pose: Pose, cam: PinholeCamera, cfg: Optional[RefinerConfig] = None) -> np.ndarray:
    """Indices of landmarks whose visible field contains the camera.

    A landmark is kept when the camera center is within ``L * distance_slack``
    of it, the direction to the camera is within ``theta / 2 + angle_slack``
    of its mean viewing direction (always true for degenerate cones), and it
    projects inside the image in front of the camera.
    """
    cfg = cfg or RefinerConfig()
    if len(m) == 0:
        return np.zeros(0, dtype=np.int64)
    C = pose.center
    X = m.xyz
    dx = C[0] - X[:, 0]
    dy = C[1] - X[:, 1]
    dz = C[2] - X[:, 2]
    dist = np.sqrt(dx * dx + dy * dy + dz * dz)
    ok = dist <= m.max_distance * cfg.distance_slack
    n = m.normals
    with np.errstate(divide="ignore", invalid="ignore"):
        cosang = (n[:, 0] * dx + n[:, 1] * dy + n[:, 2] * dz) / dist
    ang = np.arccos(np.clip(cosang, -1.0, 1.0))
    ok &= m.degenerate | (ang <= m.theta / 2.0 + cfg.angle_slack)
    idx = np.flatnonzero(ok)
    uv, front = project_points(cam, pose, X[idx])
    with np.errstate(invalid="ignore"):
        inside = front & cam.in_bounds(uv[:, 0], uv[:, 1])
    return idx[inside]


def match_2d3d_knn(query: ImageRecord, visible: np.ndarray, m: LandmarkMap, cfg: Optional[RefinerConfig] = None) -> Matches:
    """Match every query keypoint to its nearest visible landmark descriptor.

    Ratio test on the two nearest neighbours, then (with
    ``cfg.use_semantics``) the label compatibility check.
    """
    cfg = cfg or RefinerConfig()
    visible = np.asarray(visible, dtype=np.int64)
    if len(visible) == 0:
        raise EmptyVisibleSetError("no landmark is visible from the current pose")
    idx, dist = two_nearest(query.descriptors, m.descriptors[visible])
    keep = ratio_test(dist, cfg.ratio)
    if cfg.use_semantics:
        keep &= labels_compatible(query.labels, m.labels[visible][idx[:, 0]])
    qi = np.flatnonzero(keep)
    return Matches(qi, visible[idx[qi, 0]], dist[qi, 0])


def filter_reprojection(matches: Matches, pose: Pose, cam: PinholeCamera, query_xy, m: LandmarkMap, d: float) -> Matches:
    """Keep matches reprojecting within ``d`` pixels; points behind the camera are dropped."""
    if len(matches) == 0:
        return matches
    err = reprojection_errors(cam, pose, m.xyz[matches.landmark_idx], np.asarray(query_xy)[matches.query_idx])
    return matches.subset(err <= d)


def estimate_uncertainty_mc(
    matches: Matches,
    pose: Pose,
    cam: PinholeCamera,
    query_xy,
    m: LandmarkMap,
    cfg: Optional[RefinerConfig] = None,
    pnp_cfg: Optional[PnPConfig] = None,
    stream: int = 0,
) -> tuple[float, float]:
    """Sampling uncertainty of ``pose`` given ``matches``.

    For every fraction and trial, a random subset of the matches is solved
    with PnP-RANSAC; the result is the RMS camera-center distance and the RMS
    rotation angle (degrees) between those sub-poses and ``pose``. Failed
    sub-solves are skipped; if more than half fail the estimate is unstable.
    """
    cfg = cfg or RefinerConfig()
    pnp_cfg = pnp_cfg or PnPConfig()
    n = len(matches)
    if n < 8:
        raise PnPError(f"uncertainty estimation needs >= 8 matches, got {n}")
    dts, drs = [], []
    total = failed = 0
    for fi, frac in enumerate(cfg.mc_fractions):
        size = math.ceil(frac / 100.0 * n - 1e-9)
        for trial in range(cfg.mc_trials):
            total += 1
            seed = derived_seed(cfg.seed, stream, fi, trial)
            if size < 4:
                failed += 1
                continue
            rng = np.random.default_rng(seed)
            sel = np.sort(rng.choice(n, size, replace=False))
            sub_cfg = replace(pnp_cfg, seed=seed, min_inliers=max(4, min(pnp_cfg.min_inliers, math.ceil(size / 2))))
            est = pnp_ransac(matches.subset(sel), query_xy, cam, m, sub_cfg)
            if est is None:
                failed += 1
                continue
            dt, dr = pose_error(est.pose, pose)
            dts.append(dt)
            drs.append(dr)
    if 2 * failed > total:
        raise UnstableUncertaintyError(f"{failed} of {total} Monte-Carlo sub-solves failed")
    return math.sqrt(float(np.mean(np.square(dts)))), math.sqrt(float(np.mean(np.square(drs))))


def refine_iteratively(
    initial: PoseEstimate,
    query: ImageRecord,
    m: LandmarkMap,
    cfg: Optional[RefinerConfig] = None,
    pnp_cfg: Optional[PnPConfig] = None,
) -> PoseEstimate:
    """Alternate visibility culling, 2D-3D matching, reprojection filtering and
    PnP until the sampling uncertainty stops shrinking.

    Each round's pose is accepted only if neither uncertainty component
    exceeds the previous accepted round's; the first round always accepts.
    A rejected round or any failing step ends the loop and the last accepted
    estimate is returned, annotated with its round number, the per-round
    history and a flag naming the stop reason. If round 1 fails the initial
    estimate comes back with ``rounds=0``.
    """
    cfg = cfg or RefinerConfig()
    pnp_cfg = pnp_cfg or PnPConfig()
    cam = query.camera
    current = initial.with_(rounds=0)
    prev_sigma: Optional[tuple[float, float]] = None
    history: list[RoundRecord] = []
    reason = "max_rounds"

    for r in range(1, cfg.max_rounds + 1):
        visible = visible_landmarks(m, current.pose, cam, cfg)
        if len(visible) == 0:
            reason = "empty_visible"
            break
        matches = match_2d3d_knn(query, visible, m, cfg)
        matches = filter_reprojection(matches, current.pose, cam, query.xy, m, cfg.reproj_threshold_px)
        if len(matches) < max(8, pnp_cfg.min_inliers):
            reason = "too_few_matches"
            break
        est = pnp_ransac(matches, query.xy, cam, m, replace(pnp_cfg, seed=derived_seed(cfg.seed, r)))
        if est is None:
            reason = "pnp_failed"
            break
        try:
            sigma = estimate_uncertainty_mc(matches, est.pose, cam, query.xy, m, cfg, pnp_cfg, stream=r)
        except (UnstableUncertaintyError, PnPError):
            reason = "mc_unstable"
            break
        accept = prev_sigma is None or (sigma[0] <= prev_sigma[0] and sigma[1] <= prev_sigma[1])
        history.append(RoundRecord(r, len(visible), len(matches), est.num_inliers, sigma[0], sigma[1], accept))
        if not accept:
            reason = "uncertainty_increased"
            break
        fixed_point = (
            current.rounds > 0
            and est.pose.as_array().tobytes() == current.pose.as_array().tobytes()
            and est.inliers.same_as(current.inliers)
        )
        current = est.with_(uncertainty=sigma, rounds=r)
        prev_sigma = sigma
        if fixed_point:
            # an identical round would repeat forever
            reason = "fixed_point"
            break

    return current.with_(flags=current.flags + (reason,), history=tuple(history))
