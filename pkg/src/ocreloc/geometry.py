"""Rigid transforms, pinhole projection, triangulation and pose-error metrics.

Conventions used throughout the package:

* a :class:`Pose` maps world points into the camera frame,
  ``x_cam = R(q) @ X + t``, with the quaternion stored as ``(w, x, y, z)``;
* pixel coordinates have their origin at the top-left image corner;
* there is no lens distortion model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import GeometryError, NotVisibleError

MIN_DEPTH = 1e-9


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """Shepperd's method; the returned quaternion has ``w >= 0``."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


def skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues' formula for the rotation vector ``w``."""
    theta = math.sqrt(float(w @ w))
    K = skew(w)
    if theta < 1e-12:
        return np.eye(3) + K
    return np.eye(3) + (math.sin(theta) / theta) * K + ((1 - math.cos(theta)) / theta**2) * (K @ K)


def rotation_angle(R: np.ndarray) -> float:
    """Angle of a rotation matrix in radians, in ``[0, pi]``.

    Uses atan2 of the skew and symmetric parts, which stays accurate for
    angles near 0 and pi where a bare arccos of the trace does not.
    """
    s = 0.5 * math.sqrt(
        (R[2, 1] - R[1, 2]) ** 2 + (R[0, 2] - R[2, 0]) ** 2 + (R[1, 0] - R[0, 1]) ** 2
    )
    c = 0.5 * (R[0, 0] + R[1, 1] + R[2, 2] - 1.0)
    return math.atan2(s, min(1.0, max(-1.0, c)))


@dataclass(frozen=True, eq=False)
class Pose:
    """World-to-camera rigid transform."""

    q: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float).reshape(4)
        t = np.asarray(self.t, dtype=float).reshape(3)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n < 1e-12 or not np.all(np.isfinite(t)):
            raise GeometryError("pose needs a finite non-zero quaternion and finite translation")
        if abs(n - 1.0) > 1e-12:
            q = q / n
        else:
            q = q.copy()
        q.setflags(write=False)
        t = t.copy()
        t.setflags(write=False)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", t)
        R = quat_to_rotmat(q)
        R.setflags(write=False)
        object.__setattr__(self, "_R", R)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.array([1.0, 0, 0, 0]), np.zeros(3))

    @classmethod
    def from_Rt(cls, R: np.ndarray, t: np.ndarray) -> "Pose":
        return cls(rotmat_to_quat(R), t)

    @classmethod
    def from_center(cls, R: np.ndarray, center: np.ndarray) -> "Pose":
        """Build from a world-to-camera rotation and the camera center."""
        R = np.asarray(R, dtype=float)
        return cls.from_Rt(R, -R @ np.asarray(center, dtype=float))

    @classmethod
    def look_at(cls, center, target, up=(0.0, 0.0, 1.0)) -> "Pose":
        """Camera at ``center`` with its +z axis pointing at ``target``."""
        center = np.asarray(center, dtype=float)
        z = np.asarray(target, dtype=float) - center
        z /= np.linalg.norm(z)
        x = np.cross(z, np.asarray(up, dtype=float))
        if np.linalg.norm(x) < 1e-9:
            x = np.cross(z, [1.0, 0.0, 0.0])
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        return cls.from_center(np.stack([x, y, z]), center)

    @property
    def R(self) -> np.ndarray:
        return self._R

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Transform world point(s) of shape (3,) or (N, 3) into the camera frame."""
        X = np.asarray(X, dtype=float)
        return X @ self.R.T + self.t

    def inverse(self) -> "Pose":
        R = self.R
        return Pose.from_Rt(R.T, -R.T @ self.t)

    def compose(self, other: "Pose") -> "Pose":
        """``self`` after ``other``: x -> self(other(x))."""
        R = self.R
        return Pose.from_Rt(R @ other.R, R @ other.t + self.t)

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.q, self.t])

    def __repr__(self) -> str:
        q = ", ".join(f"{v:.6g}" for v in self.q)
        t = ", ".join(f"{v:.6g}" for v in self.t)
        return f"Pose(q=[{q}], t=[{t}])"


@dataclass(frozen=True)
class PinholeCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if self.width < 1 or self.height < 1:
            raise GeometryError(f"image size must be at least 1x1, got {self.width}x{self.height}")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def bearing(self, uv: np.ndarray) -> np.ndarray:
        """Unit viewing rays in the camera frame for pixel(s) ``uv``."""
        uv = np.atleast_2d(np.asarray(uv, dtype=float))
        rays = np.column_stack(
            [(uv[:, 0] - self.cx) / self.fx, (uv[:, 1] - self.cy) / self.fy, np.ones(len(uv))]
        )
        return rays / np.linalg.norm(rays, axis=1, keepdims=True)

    def in_bounds(self, u, v):
        return (u >= 0) & (u < self.width) & (v >= 0) & (v < self.height)


def camera_coords(pose: Pose, X: np.ndarray) -> np.ndarray:
    """Camera-frame coordinates of points ``X`` (N, 3).

    Written out component by component so scalar and batched callers round
    identically; the visibility oracles rely on that.
    """
    R = pose.R
    t = pose.t
    X = np.asarray(X, dtype=float)
    x, y, z = X[..., 0], X[..., 1], X[..., 2]
    xc = R[0, 0] * x + R[0, 1] * y + R[0, 2] * z + t[0]
    yc = R[1, 0] * x + R[1, 1] * y + R[1, 2] * z + t[1]
    zc = R[2, 0] * x + R[2, 1] * y + R[2, 2] * z + t[2]
    return np.stack([xc, yc, zc], axis=-1)


def project_points(cam: PinholeCamera, pose: Pose, X: np.ndarray):
    """Batched projection; returns ``(uv, in_front)``.

    ``uv`` rows for points behind the camera are NaN.
    """
    Xc = camera_coords(pose, np.atleast_2d(X))
    z = Xc[:, 2]
    front = z > MIN_DEPTH
    with np.errstate(divide="ignore", invalid="ignore"):
        u = np.where(front, cam.fx * Xc[:, 0] / z + cam.cx, np.nan)
        v = np.where(front, cam.fy * Xc[:, 1] / z + cam.cy, np.nan)
    return np.column_stack([u, v]), front


def project(cam: PinholeCamera, pose: Pose, X) -> Optional[np.ndarray]:
    """Pixel of world point ``X``, or ``None`` when it is at or behind the camera.

    No clipping to the image bounds is applied.
    """
    xc, yc, zc = camera_coords(pose, np.asarray(X, dtype=float))
    if not zc > MIN_DEPTH:
        return None
    return np.array([cam.fx * xc / zc + cam.cx, cam.fy * yc / zc + cam.cy])


def unproject(cam: PinholeCamera, pose: Pose, uv) -> tuple[np.ndarray, np.ndarray]:
    """World-frame ray ``(origin, unit direction)`` through pixel ``uv``."""
    d_cam = cam.bearing(uv)[0]
    return pose.center, pose.R.T @ d_cam


def reprojection_error(cam: PinholeCamera, pose: Pose, X, obs) -> float:
    uv = project(cam, pose, X)
    if uv is None:
        raise NotVisibleError("point is at or behind the camera")
    return float(math.hypot(uv[0] - obs[0], uv[1] - obs[1]))


def reprojection_errors(cam: PinholeCamera, pose: Pose, X: np.ndarray, obs: np.ndarray) -> np.ndarray:
    """Per-point pixel errors; ``inf`` for points behind the camera."""
    uv, front = project_points(cam, pose, X)
    err = np.hypot(uv[:, 0] - obs[:, 0], uv[:, 1] - obs[:, 1])
    err[~front] = np.inf
    return err


def _projection_jacobian(cam: PinholeCamera, Xc: np.ndarray) -> np.ndarray:
    """d(u, v)/d(camera point), shape (N, 2, 3)."""
    x, y, z = Xc[:, 0], Xc[:, 1], Xc[:, 2]
    iz = 1.0 / z
    J = np.zeros((len(Xc), 2, 3))
    J[:, 0, 0] = cam.fx * iz
    J[:, 0, 2] = -cam.fx * x * iz * iz
    J[:, 1, 1] = cam.fy * iz
    J[:, 1, 2] = -cam.fy * y * iz * iz
    return J


def triangulate(
    views: Sequence[tuple[PinholeCamera, Pose, np.ndarray]],
    max_iters: int = 10,
    min_decrease: float = 1e-12,
) -> np.ndarray:
    """Linear multiview triangulation followed by Gauss-Newton refinement.

    Cameras stay fixed; only the point moves. Raises :class:`GeometryError`
    for fewer than two views, a degenerate baseline, or a solution behind
    any of the cameras.
    """
    if len(views) < 2:
        raise GeometryError("triangulation needs at least 2 views", kind="too_few_views")
    centers = np.array([pose.center for _, pose, _ in views])
    if np.max(np.linalg.norm(centers - centers[0], axis=1)) < 1e-9:
        raise GeometryError("camera centers coincide", kind="degenerate_baseline")

    # Homogeneous DLT in normalized image coordinates.
    rows = []
    for cam, pose, uv in views:
        xn = (uv[0] - cam.cx) / cam.fx
        yn = (uv[1] - cam.cy) / cam.fy
        P = np.hstack([pose.R, pose.t[:, None]])
        r1 = xn * P[2] - P[0]
        r2 = yn * P[2] - P[1]
        rows.append(r1 / np.linalg.norm(r1))
        rows.append(r2 / np.linalg.norm(r2))
    _, _, Vt = np.linalg.svd(np.array(rows))
    h = Vt[-1]
    if abs(h[3]) < 1e-15:
        raise GeometryError("triangulated point at infinity", kind="degenerate_baseline")
    X = h[:3] / h[3]

    obs = np.array([uv for _, _, uv in views], dtype=float)

    def residuals(X):
        res = np.empty(2 * len(views))
        zs = np.empty(len(views))
        for i, (cam, pose, _) in enumerate(views):
            xc = pose.R @ X + pose.t
            zs[i] = xc[2]
            res[2 * i] = cam.fx * xc[0] / xc[2] + cam.cx - obs[i, 0]
            res[2 * i + 1] = cam.fy * xc[1] / xc[2] + cam.cy - obs[i, 1]
        return res, zs

    res, zs = residuals(X)
    if np.any(zs <= MIN_DEPTH):
        raise GeometryError("triangulated point is behind a camera", kind="cheirality")
    cost = float(res @ res)
    for _ in range(max_iters):
        J = np.empty((2 * len(views), 3))
        for i, (cam, pose, _) in enumerate(views):
            R = pose.R
            xc = R @ X + pose.t
            J[2 * i : 2 * i + 2] = _projection_jacobian(cam, xc[None])[0] @ R
        try:
            dx = np.linalg.solve(J.T @ J, -J.T @ res)
        except np.linalg.LinAlgError:
            break
        X_new = X + dx
        res_new, zs_new = residuals(X_new)
        cost_new = float(res_new @ res_new)
        if not np.all(zs_new > MIN_DEPTH) or not cost_new < cost:
            break
        decrease = cost - cost_new
        X, res, cost = X_new, res_new, cost_new
        if decrease < min_decrease:
            break
    return X


def pose_error(a: Pose, b: Pose) -> tuple[float, float]:
    """(camera-center distance in meters, relative rotation angle in degrees)."""
    dt = float(np.linalg.norm(a.center - b.center))
    dr = math.degrees(rotation_angle(a.R @ b.R.T))
    return dt, dr
