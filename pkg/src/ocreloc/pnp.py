"""2D-2D / 2D-3D matching with semantic consistency, P3P inside RANSAC,
and Gauss-Newton pose refinement."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterator, NamedTuple, Optional

import numpy as np

from .descriptors import ratio_test, squared_distances, two_nearest_sq
from .errors import PnPError
from .geometry import MIN_DEPTH, PinholeCamera, Pose, so3_exp


class Match2D3D(NamedTuple):
    query_idx: int
    landmark_idx: int
    distance: float


@dataclass(frozen=True, eq=False)
class Matches:
    """Parallel arrays of query keypoint index, landmark index and descriptor distance.

    Landmark references are row indices into the map, not landmark ids.
    """

    query_idx: np.ndarray
    landmark_idx: np.ndarray
    distance: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.query_idx, dtype=np.int64).reshape(-1)
        object.__setattr__(self, "query_idx", q)
        object.__setattr__(self, "landmark_idx", np.asarray(self.landmark_idx, dtype=np.int64).reshape(len(q)))
        object.__setattr__(self, "distance", np.asarray(self.distance, dtype=np.float64).reshape(len(q)))

    @classmethod
    def empty(cls) -> "Matches":
        return cls(np.zeros(0), np.zeros(0), np.zeros(0))

    @classmethod
    def from_list(cls, items) -> "Matches":
        items = list(items)
        if not items:
            return cls.empty()
        q, l, d = zip(*items)
        return cls(np.array(q), np.array(l), np.array(d))

    def __len__(self) -> int:
        return len(self.query_idx)

    def __iter__(self) -> Iterator[Match2D3D]:
        for q, l, d in zip(self.query_idx.tolist(), self.landmark_idx.tolist(), self.distance.tolist()):
            yield Match2D3D(q, l, d)

    def subset(self, sel) -> "Matches":
        return Matches(self.query_idx[sel], self.landmark_idx[sel], self.distance[sel])

    def same_as(self, other: "Matches") -> bool:
        return (
            np.array_equal(self.query_idx, other.query_idx)
            and np.array_equal(self.landmark_idx, other.landmark_idx)
            and self.distance.tobytes() == other.distance.tobytes()
        )


@dataclass(eq=False)
class PoseEstimate:
    pose: Pose
    inliers: Matches
    num_iterations: int = 0
    uncertainty: Optional[tuple[float, float]] = None  # (sigma_t meters, sigma_r degrees)
    rounds: int = 0
    flags: tuple[str, ...] = ()
    converged: bool = True
    history: tuple = ()

    @property
    def num_inliers(self) -> int:
        return len(self.inliers)

    def with_(self, **kw) -> "PoseEstimate":
        return replace(self, **kw)

    def to_bytes(self) -> bytes:
        """Canonical byte encoding, used to check determinism."""
        parts = [
            self.pose.q.tobytes(), self.pose.t.tobytes(),
            self.inliers.query_idx.tobytes(), self.inliers.landmark_idx.tobytes(),
            self.inliers.distance.tobytes(),
            np.array([self.num_iterations, self.rounds], dtype=np.int64).tobytes(),
            np.array(self.uncertainty if self.uncertainty else (np.nan, np.nan)).tobytes(),
            "|".join(self.flags).encode(), bytes([self.converged]),
        ]
        return b"".join(parts)


@dataclass
class MatchConfig:
    ratio: float = 0.8
    mutual: bool = True
    use_semantics: bool = True


@dataclass
class PnPConfig:
    inlier_px: float = 8.0
    confidence: float = 0.999
    max_iters: int = 5000
    min_inliers: int = 12
    seed: int = 0


def labels_compatible(a, b) -> np.ndarray:
    """Equal labels, or either side unknown (0)."""
    a = np.asarray(a)
    b = np.asarray(b)
    return (a == b) | (a == 0) | (b == 0)


def match_2d2d(a, b, cfg: Optional[MatchConfig] = None):
    """Match keypoints of image ``a`` against image ``b``.

    ``a`` and ``b`` expose ``descriptors`` and ``labels``. A pair is kept when
    it passes the ratio test on the two nearest neighbours in ``b``, the labels
    are compatible, and (with ``cfg.mutual``) ``a``'s keypoint is also the
    nearest neighbour of its match. Returns ``(index_a, index_b, distance)``
    arrays ordered by ``index_a``.
    """
    cfg = cfg or MatchConfig()
    da = np.asarray(a.descriptors, dtype=np.float64)
    db = np.asarray(b.descriptors, dtype=np.float64)
    if da.shape[1] != db.shape[1]:
        raise ValueError(f"descriptor dims differ: {da.shape[1]} vs {db.shape[1]}")
    empty = (np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0))
    if len(da) == 0 or len(db) == 0:
        return empty
    d2 = squared_distances(da, db)
    idx, dist = two_nearest_sq(d2)
    keep = ratio_test(dist, cfg.ratio)
    nn = idx[:, 0]
    if cfg.use_semantics:
        keep &= labels_compatible(np.asarray(a.labels), np.asarray(b.labels)[nn])
    if cfg.mutual:
        back = np.argmin(d2, axis=0)
        keep &= back[nn] == np.arange(len(da))
    ia = np.flatnonzero(keep)
    return ia, nn[ia], dist[ia, 0]


def semantic_filter(matches: Matches, query_labels, landmark_labels) -> Matches:
    """Keep matches whose query-keypoint and landmark labels are compatible."""
    if len(matches) == 0:
        return matches
    ql = np.asarray(query_labels)[matches.query_idx]
    ll = np.asarray(landmark_labels)[matches.landmark_idx]
    return matches.subset(labels_compatible(ql, ll))


# --- minimal solver -----------------------------------------------------------

def _absolute_orientation(P: np.ndarray, Q: np.ndarray):
    """R, t minimizing |R P + t - Q| (Kabsch)."""
    mp, mq = P.mean(axis=0), Q.mean(axis=0)
    H = (P - mp).T @ (Q - mq)
    U, _, Vt = np.linalg.svd(H)
    R = Vt.T @ U.T
    if np.linalg.det(R) < 0:
        Vt[2] = -Vt[2]
        R = Vt.T @ U.T
    return R, mq - R @ mp


def p3p(bearings: np.ndarray, points: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """All camera poses consistent with three bearing/point correspondences.

    Grunert's formulation: the ratio of the first and third ray depths solves
    a quartic, after which depths follow in closed form and the pose comes
    from aligning the three camera-frame points with the world points.
    Returns up to four ``(R, t)`` world-to-camera solutions.
    """
    j = np.asarray(bearings, dtype=float)
    P = np.asarray(points, dtype=float)
    (x0, y0, z0), (x1, y1, z1), (x2, y2, z2) = P.tolist()
    a = math.sqrt((x1 - x2) ** 2 + (y1 - y2) ** 2 + (z1 - z2) ** 2)
    b = math.sqrt((x0 - x2) ** 2 + (y0 - y2) ** 2 + (z0 - z2) ** 2)
    c = math.sqrt((x0 - x1) ** 2 + (y0 - y1) ** 2 + (z0 - z1) ** 2)
    if min(a, b, c) < 1e-12:
        return []
    e1 = (x1 - x0, y1 - y0, z1 - z0)
    e2 = (x2 - x0, y2 - y0, z2 - z0)
    cross = (e1[1] * e2[2] - e1[2] * e2[1], e1[2] * e2[0] - e1[0] * e2[2], e1[0] * e2[1] - e1[1] * e2[0])
    if math.sqrt(sum(v * v for v in cross)) < 1e-12 * max(a, b, c) ** 2:
        return []
    j0, j1, j2 = j.tolist()
    ca = j1[0] * j2[0] + j1[1] * j2[1] + j1[2] * j2[2]
    cb = j0[0] * j2[0] + j0[1] * j2[1] + j0[2] * j2[2]
    cg = j0[0] * j1[0] + j0[1] * j1[1] + j0[2] * j1[2]
    a2, c2 = a * a / (b * b), c * c / (b * b)
    amc, apc = a2 - c2, a2 + c2
    coeffs = [
        (amc - 1) ** 2 - 4 * c2 * ca**2,
        4 * (amc * (1 - amc) * cb - (1 - apc) * ca * cg + 2 * c2 * ca**2 * cb),
        2 * (amc**2 - 1 + 2 * amc**2 * cb**2 + 2 * (1 - c2) * ca**2
             - 4 * apc * ca * cb * cg + 2 * (1 - a2) * cg**2),
        4 * (-amc * (1 + amc) * cb + 2 * a2 * cg**2 * cb - (1 - apc) * ca * cg),
        (1 + amc) ** 2 - 4 * a2 * cg**2,
    ]
    if not all(math.isfinite(x) for x in coeffs) or max(abs(x) for x in coeffs) < 1e-300:
        return []
    k4, k3, k2, k1, k0 = coeffs
    roots = np.roots(coeffs)
    sols = []
    for r in roots.tolist():
        if abs(r.imag) > 1e-6 * max(1.0, abs(r.real)):
            continue
        v = r.real
        if v <= 0:
            continue
        # one Newton step on the quartic tightens companion-matrix roots
        p = (((k4 * v + k3) * v + k2) * v + k1) * v + k0
        dp = ((4 * k4 * v + 3 * k3) * v + 2 * k2) * v + k1
        if dp != 0:
            v_new = v - p / dp
            if v_new > 0:
                v = v_new
        den = 2 * (cg - v * ca)
        if abs(den) < 1e-12:
            continue
        u = ((-1 + amc) * v * v - 2 * amc * cb * v + 1 + amc) / den
        if u <= 0:
            continue
        s1_sq = b * b / (1 + v * v - 2 * v * cb)
        if not s1_sq > 0:
            continue
        s1 = math.sqrt(s1_sq)
        Q = np.array([s1 * j[0], u * s1 * j[1], v * s1 * j[2]])
        R, t = _absolute_orientation(P, Q)
        sols.append((R, t))
    return sols


# --- nonlinear refinement -------------------------------------------------------

class RefineResult(NamedTuple):
    pose: Pose
    cost: float
    converged: bool
    iterations: int


def _residuals(cam, R, t, X, xy):
    Xc = X @ R.T + t
    z = Xc[:, 2]
    r = np.empty((len(X), 2))
    r[:, 0] = cam.fx * Xc[:, 0] / z + cam.cx - xy[:, 0]
    r[:, 1] = cam.fy * Xc[:, 1] / z + cam.cy - xy[:, 1]
    return r, Xc


def refine_pose_nonlinear(
    pose: Pose,
    xy: np.ndarray,
    X: np.ndarray,
    cam: PinholeCamera,
    max_iters: int = 20,
    min_decrease: float = 1e-10,
) -> RefineResult:
    """Gauss-Newton on the 6-DoF pose minimizing total squared reprojection error.

    Steps that fail to lower the cost are rejected, so the returned cost never
    exceeds the starting cost. Singular normal equations return the input
    pose with ``converged=False``.
    """
    xy = np.asarray(xy, dtype=float)
    X = np.asarray(X, dtype=float)
    if len(X) < 4:
        raise PnPError(f"pose refinement needs >= 4 correspondences, got {len(X)}")
    R, t = pose.R, pose.t.copy()
    r, Xc = _residuals(cam, R, t, X, xy)
    if np.any(Xc[:, 2] <= MIN_DEPTH):
        return RefineResult(pose, math.inf, False, 0)
    cost = cost_in = float(np.sum(r * r))
    it = 0
    for it in range(1, max_iters + 1):
        # left perturbation x_c -> x_c + w x x_c + dt, written out per row
        x, y, iz = Xc[:, 0], Xc[:, 1], 1.0 / Xc[:, 2]
        xz, yz = x * iz, y * iz
        J = np.empty((len(X), 2, 6))
        J[:, 0, 0] = -cam.fx * xz * yz
        J[:, 0, 1] = cam.fx * (1.0 + xz * xz)
        J[:, 0, 2] = -cam.fx * yz
        J[:, 0, 3] = cam.fx * iz
        J[:, 0, 4] = 0.0
        J[:, 0, 5] = -cam.fx * xz * iz
        J[:, 1, 0] = -cam.fy * (1.0 + yz * yz)
        J[:, 1, 1] = cam.fy * xz * yz
        J[:, 1, 2] = cam.fy * xz
        J[:, 1, 3] = 0.0
        J[:, 1, 4] = cam.fy * iz
        J[:, 1, 5] = -cam.fy * yz * iz
        J = J.reshape(-1, 6)
        H = J.T @ J
        g = J.T @ r.reshape(-1)
        try:
            ev = np.linalg.eigvalsh(H)
            if not ev[0] > 0 or ev[-1] > 1e14 * ev[0]:
                raise np.linalg.LinAlgError
            delta = np.linalg.solve(H, -g)
        except np.linalg.LinAlgError:
            if it == 1:
                return RefineResult(pose, cost, False, 0)
            break
        dR = so3_exp(delta[:3])
        R_new = dR @ R
        t_new = dR @ t + delta[3:]
        r_new, Xc_new = _residuals(cam, R_new, t_new, X, xy)
        if np.any(Xc_new[:, 2] <= MIN_DEPTH):
            break
        cost_new = float(np.sum(r_new * r_new))
        if not cost_new < cost:
            break
        decrease = cost - cost_new
        R, t, r, Xc, cost = R_new, t_new, r_new, Xc_new, cost_new
        if decrease < min_decrease:
            break
    out = Pose.from_Rt(R, t)
    r_out, _ = _residuals(cam, out.R, out.t, X, xy)
    cost_out = float(np.sum(r_out * r_out))
    # the quaternion round trip can nudge the cost; never hand back a worse pose
    if cost_out > cost_in:
        return RefineResult(pose, cost_in, True, it)
    return RefineResult(out, cost_out, True, it)


# --- RANSAC -------------------------------------------------------------------

def _errors(cam: PinholeCamera, pose: Pose, X: np.ndarray, xy: np.ndarray) -> np.ndarray:
    Xc = X @ pose.R.T + pose.t
    z = Xc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        err = np.hypot(cam.fx * Xc[:, 0] / z + cam.cx - xy[:, 0], cam.fy * Xc[:, 1] / z + cam.cy - xy[:, 1])
    err[~(z > MIN_DEPTH)] = np.inf
    return err


def _landmark_xyz(landmarks) -> np.ndarray:
    return landmarks.xyz if hasattr(landmarks, "xyz") else np.asarray(landmarks, dtype=float)


def _adaptive_bound(inlier_ratio: float, confidence: float, sample_size: int = 4) -> float:
    w = inlier_ratio**sample_size
    if w >= 1.0:
        return 0
    if w <= 0.0:
        return math.inf
    return math.ceil(math.log(1.0 - confidence) / math.log(1.0 - w))


def pnp_ransac(
    matches: Matches,
    query_xy: np.ndarray,
    cam: PinholeCamera,
    landmarks,
    cfg: Optional[PnPConfig] = None,
) -> Optional[PoseEstimate]:
    """Robust absolute pose from 2D-3D matches.

    Each hypothesis solves P3P on three sampled matches and keeps the
    solution that best reprojects a fourth; a hypothesis is discarded when
    any of the four points lands behind the camera or the fourth point misses
    by more than ``cfg.inlier_px``. The iteration budget adapts to the best
    inlier ratio seen so far. The winning pose is refined with Gauss-Newton on
    its inliers, and the returned inlier set is recomputed under the returned
    pose. Returns ``None`` when fewer than ``cfg.min_inliers`` survive.
    """
    cfg = cfg or PnPConfig()
    n = len(matches)
    if n < 4:
        raise PnPError(f"PnP needs at least 4 matches, got {n}")
    xy = np.asarray(query_xy, dtype=float)[matches.query_idx]
    X = _landmark_xyz(landmarks)[matches.landmark_idx]
    bearings = cam.bearing(xy)
    rng = np.random.default_rng(cfg.seed)
    thr = cfg.inlier_px

    best_count, best_score, best_R, best_t = 0, math.inf, None, None
    needed = cfg.max_iters
    it = 0
    while it < min(needed, cfg.max_iters):
        it += 1
        sample = rng.choice(n, 4, replace=False)
        chosen = None
        chosen_err = math.inf
        for R, t in p3p(bearings[sample[:3]], X[sample[:3]]):
            Xc = X[sample] @ R.T + t
            if np.any(Xc[:, 2] <= MIN_DEPTH):
                continue
            u = cam.fx * Xc[3, 0] / Xc[3, 2] + cam.cx
            v = cam.fy * Xc[3, 1] / Xc[3, 2] + cam.cy
            e = math.hypot(u - xy[sample[3], 0], v - xy[sample[3], 1])
            if e < chosen_err:
                chosen, chosen_err = (R, t), e
        if chosen is None or chosen_err > thr:
            continue
        R, t = chosen
        Xc = X @ R.T + t
        z = Xc[:, 2]
        front = z > MIN_DEPTH
        with np.errstate(divide="ignore", invalid="ignore"):
            err = np.hypot(cam.fx * Xc[:, 0] / z + cam.cx - xy[:, 0], cam.fy * Xc[:, 1] / z + cam.cy - xy[:, 1])
        inl = front & (err <= thr)
        count = int(inl.sum())
        score = float(np.sum(np.where(inl, err, thr)))
        if count > best_count or (count == best_count and score < best_score):
            best_count, best_score, best_R, best_t = count, score, R, t
            needed = _adaptive_bound(count / n, cfg.confidence)

    if best_R is None or best_count < cfg.min_inliers:
        return None

    pose = Pose.from_Rt(best_R, best_t)
    converged = True
    inl = _errors(cam, pose, X, xy) <= thr
    for _ in range(3):
        if inl.sum() < 4:
            break
        res = refine_pose_nonlinear(pose, xy[inl], X[inl], cam)
        converged = res.converged
        pose = res.pose
        new_inl = _errors(cam, pose, X, xy) <= thr
        if np.array_equal(new_inl, inl):
            break
        inl = new_inl
    inl = _errors(cam, pose, X, xy) <= thr
    if inl.sum() < cfg.min_inliers:
        return None
    return PoseEstimate(pose, matches.subset(inl), num_iterations=it, converged=converged)
