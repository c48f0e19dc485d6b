"""Camera models and rigid poses, plus the depth warps built on them.

Conventions
-----------
* Pixel ``(x, y)`` has its center at integer coordinates; column first.
* A pose ``T = (R, t)`` maps points from its own frame into the parent
  frame: ``p_parent = R @ p + t``.  Camera trajectories are world-from-camera.
* Rotations are stored as rotation vectors (axis * angle, radians).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import BehindCameraError, CalibrationError, DepthError

SMALL_ANGLE = 1e-8


def skew(v):
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rodrigues_to_matrix(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    theta2 = float(q @ q)
    theta = np.sqrt(theta2)
    K = skew(q)
    if theta < SMALL_ANGLE:
        # second-order Taylor expansion of sin(t)/t and (1 - cos(t))/t^2
        a = 1.0 - theta2 / 6.0
        b = 0.5 - theta2 / 24.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta2
    return np.eye(3) + a * K + b * (K @ K)


def matrix_to_rodrigues(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    w = 0.5 * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    cos_t = np.clip((np.trace(R) - 1.0) * 0.5, -1.0, 1.0)
    sin_t = np.linalg.norm(w)
    theta = np.arctan2(sin_t, cos_t)
    if theta < 1e-6:
        return w * (1.0 + theta * theta / 6.0)
    if np.pi - theta > 1e-3:
        return w * (theta / sin_t)
    # near pi the antisymmetric part vanishes; read a a^T off the symmetric part
    A = (0.5 * (R + R.T) - cos_t * np.eye(3)) / (1.0 - cos_t)
    i = int(np.argmax(np.diag(A)))
    axis = A[i] / np.sqrt(A[i, i])
    axis /= np.linalg.norm(axis)
    if axis @ w < 0:
        axis = -axis
    return axis * theta


def matrix_to_quaternion(R) -> np.ndarray:
    """Hamilton unit quaternion ``(x, y, z, w)`` with ``w >= 0``."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s, 0.25 * s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array([0.25 * s, (R[0, 1] + R[1, 0]) / s,
                      (R[0, 2] + R[2, 0]) / s, (R[2, 1] - R[1, 2]) / s])
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array([(R[0, 1] + R[1, 0]) / s, 0.25 * s,
                      (R[1, 2] + R[2, 1]) / s, (R[0, 2] - R[2, 0]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array([(R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s,
                      0.25 * s, (R[1, 0] - R[0, 1]) / s])
    q /= np.linalg.norm(q)
    if q[3] < 0:
        q = -q
    return q


def quaternion_to_matrix(quat) -> np.ndarray:
    x, y, z, w = np.asarray(quat, dtype=np.float64) / np.linalg.norm(quat)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


@dataclass(frozen=True, eq=False)
class PoseSE3:
    """Rigid transform parameterized by translation and rotation vector."""

    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    q: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        t = np.array(self.t, dtype=np.float64).reshape(3)
        q = np.array(self.q, dtype=np.float64).reshape(3)
        t.flags.writeable = False
        q.flags.writeable = False
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "q", q)

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls()

    @classmethod
    def from_Rt(cls, R, t) -> "PoseSE3":
        # R is re-derived from the rotation vector, which projects away any
        # drift from orthonormality; composing poses would otherwise amplify it
        return cls(t, matrix_to_rodrigues(R))

    @classmethod
    def from_matrix(cls, T) -> "PoseSE3":
        T = np.asarray(T, dtype=np.float64)
        return cls.from_Rt(T[:3, :3], T[:3, 3])

    @classmethod
    def from_vector(cls, theta) -> "PoseSE3":
        theta = np.asarray(theta, dtype=np.float64)
        return cls(theta[:3], theta[3:])

    @classmethod
    def from_quaternion(cls, t, quat) -> "PoseSE3":
        return cls.from_Rt(quaternion_to_matrix(quat), t)

    @cached_property
    def R(self) -> np.ndarray:
        return rodrigues_to_matrix(self.q)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.t, self.q])

    def quaternion(self) -> np.ndarray:
        return matrix_to_quaternion(self.R)

    @property
    def angle(self) -> float:
        return float(np.linalg.norm(self.q))

    def inverse(self) -> "PoseSE3":
        Rt = self.R.T
        return PoseSE3.from_Rt(Rt, -Rt @ self.t)

    def __matmul__(self, other: "PoseSE3") -> "PoseSE3":
        return PoseSE3.from_Rt(self.R @ other.R, self.R @ other.t + self.t)

    def transform(self, points) -> np.ndarray:
        """Apply to points of shape (3,) or (N, 3)."""
        P = np.asarray(points, dtype=np.float64)
        return P @ self.R.T + self.t

    def __repr__(self):
        return f"PoseSE3(t={self.t.tolist()}, q={self.q.tolist()})"


@dataclass(frozen=True)
class PinholeCamera:
    """Pinhole intrinsics with 4-coefficient radial-tangential distortion.

    ``dist`` is ``(k1, k2, p1, p2)``.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    dist: tuple = (0.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "dist", tuple(float(d) for d in self.dist))
        if len(self.dist) != 4:
            raise CalibrationError("distortion needs exactly 4 coefficients")
        if not (self.fx > 0 and self.fy > 0):
            raise CalibrationError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise CalibrationError("principal point outside the image")

    @property
    def size(self):
        return (self.width, self.height)

    @property
    def has_distortion(self) -> bool:
        return any(d != 0.0 for d in self.dist)

    def distort(self, xn, yn):
        if not self.has_distortion:
            return xn, yn
        k1, k2, p1, p2 = self.dist
        r2 = xn * xn + yn * yn
        radial = 1.0 + k1 * r2 + k2 * r2 * r2
        xd = xn * radial + 2.0 * p1 * xn * yn + p2 * (r2 + 2.0 * xn * xn)
        yd = yn * radial + p1 * (r2 + 2.0 * yn * yn) + 2.0 * p2 * xn * yn
        return xd, yd

    def distort_jacobian(self, xn, yn):
        """Entries (a, b, c, d) of d(xd, yd)/d(xn, yn) = [[a, b], [c, d]]."""
        k1, k2, p1, p2 = self.dist
        r2 = xn * xn + yn * yn
        radial = 1.0 + k1 * r2 + k2 * r2 * r2
        dr = 2.0 * k1 + 4.0 * k2 * r2
        a = radial + dr * xn * xn + 2.0 * p1 * yn + 6.0 * p2 * xn
        b = dr * xn * yn + 2.0 * p1 * xn + 2.0 * p2 * yn
        c = dr * xn * yn + 2.0 * p1 * xn + 2.0 * p2 * yn
        d = radial + dr * yn * yn + 6.0 * p1 * yn + 2.0 * p2 * xn
        return a, b, c, d

    def undistort(self, xd, yd, iters: int = 20):
        if not self.has_distortion:
            return xd, yd
        xn = np.array(xd, dtype=np.float64, copy=True)
        yn = np.array(yd, dtype=np.float64, copy=True)
        for _ in range(iters):
            ex, ey = self.distort(xn, yn)
            ex = ex - xd
            ey = ey - yd
            a, b, c, d = self.distort_jacobian(xn, yn)
            det = a * d - b * c
            dx = (d * ex - b * ey) / det
            dy = (a * ey - c * ex) / det
            xn = xn - dx
            yn = yn - dy
            if np.max(np.abs(dx), initial=0.0) < 1e-15 and np.max(np.abs(dy), initial=0.0) < 1e-15:
                break
        return xn, yn

    def project_points(self, P):
        """Vectorized projection of (N, 3) points; returns (uv, valid)."""
        P = np.asarray(P, dtype=np.float64).reshape(-1, 3)
        z = P[:, 2]
        valid = z > 0
        zs = np.where(valid, z, 1.0)
        xd, yd = self.distort(P[:, 0] / zs, P[:, 1] / zs)
        uv = np.empty((len(P), 2))
        uv[:, 0] = self.fx * xd + self.cx
        uv[:, 1] = self.fy * yd + self.cy
        return uv, valid

    def project_jacobian(self, P):
        """Projection and its Jacobian d(u, v)/dP, shape (N, 2, 3)."""
        P = np.asarray(P, dtype=np.float64).reshape(-1, 3)
        inv_z = 1.0 / P[:, 2]
        xn = P[:, 0] * inv_z
        yn = P[:, 1] * inv_z
        J = np.zeros((len(P), 2, 3))
        if self.has_distortion:
            xd, yd = self.distort(xn, yn)
            a, b, c, d = self.distort_jacobian(xn, yn)
        else:
            xd, yd = xn, yn
            a = d = 1.0
            b = c = 0.0
        # dn/dP = [[1/z, 0, -x/z^2], [0, 1/z, -y/z^2]]
        J[:, 0, 0] = self.fx * a * inv_z
        J[:, 0, 1] = self.fx * b * inv_z
        J[:, 0, 2] = -self.fx * (a * xn + b * yn) * inv_z
        J[:, 1, 0] = self.fy * c * inv_z
        J[:, 1, 1] = self.fy * d * inv_z
        J[:, 1, 2] = -self.fy * (c * xn + d * yn) * inv_z
        uv = np.stack([self.fx * xd + self.cx, self.fy * yd + self.cy], axis=1)
        return uv, J

    def backproject_points(self, uv, z):
        uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
        z = np.asarray(z, dtype=np.float64)
        xn, yn = self.undistort((uv[:, 0] - self.cx) / self.fx, (uv[:, 1] - self.cy) / self.fy)
        return np.stack([xn * z, yn * z, np.broadcast_to(z, xn.shape)], axis=1)

    def contains(self, uv) -> np.ndarray:
        """True where a sub-pixel location can be bilinearly sampled."""
        uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
        return ((uv[:, 0] >= 0) & (uv[:, 0] <= self.width - 1)
                & (uv[:, 1] >= 0) & (uv[:, 1] <= self.height - 1))


@dataclass(frozen=True)
class ExtrinsicCalib:
    """``T_ed`` maps depth-camera coordinates into event-camera coordinates."""

    T_ed: PoseSE3

    @classmethod
    def identity(cls):
        return cls(PoseSE3.identity())

    @classmethod
    def from_matrix(cls, T, tol: float = 1e-6):
        T = np.asarray(T, dtype=np.float64).reshape(4, 4)
        if not np.allclose(T[3], [0, 0, 0, 1], atol=0, rtol=0):
            raise CalibrationError("bottom row of T_ed must be 0 0 0 1")
        R = T[:3, :3]
        if np.max(np.abs(R.T @ R - np.eye(3))) > tol:
            raise CalibrationError("rotation block of T_ed is not orthonormal")
        if np.linalg.det(R) < 0:
            raise CalibrationError("rotation block of T_ed has det -1")
        return cls(PoseSE3.from_matrix(T))


def project(cam: PinholeCamera, P) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64)
    uv, valid = cam.project_points(P)
    if not np.all(valid):
        raise BehindCameraError("point at or behind the camera plane (z <= 0)")
    return uv[0] if P.ndim == 1 else uv


def backproject(cam: PinholeCamera, pixel, z) -> np.ndarray:
    pixel = np.asarray(pixel, dtype=np.float64)
    z_arr = np.asarray(z, dtype=np.float64)
    if np.any(z_arr <= 0):
        raise DepthError("depth must be positive")
    P = cam.backproject_points(pixel, z_arr)
    return P[0] if pixel.ndim == 1 else P


@dataclass
class DepthWarp:
    pixel: np.ndarray
    z: np.ndarray
    behind: np.ndarray
    out_of_bounds: np.ndarray

    @property
    def valid(self):
        return np.logical_not(np.logical_or(self.behind, self.out_of_bounds))


def warp_depth_pixel(calib: ExtrinsicCalib, cam_d: PinholeCamera, cam_e: PinholeCamera,
                     x_d, z_d) -> DepthWarp:
    """Move depth-camera pixels with depth ``z_d`` into the event camera.

    Works on one pixel or on arrays of them; behind-camera points are
    flagged rather than raised.
    """
    x_d = np.asarray(x_d, dtype=np.float64)
    single = x_d.ndim == 1
    z_d = np.atleast_1d(np.asarray(z_d, dtype=np.float64))
    if np.any(z_d <= 0):
        raise DepthError("depth must be positive")
    P_d = cam_d.backproject_points(x_d.reshape(-1, 2), z_d)
    P_e = calib.T_ed.transform(P_d)
    uv, front = cam_e.project_points(P_e)
    oob = front & ~cam_e.contains(uv)
    uv[~front] = np.nan
    out = DepthWarp(uv, P_e[:, 2].copy(), ~front, oob)
    if single:
        out = DepthWarp(uv[0], out.z[0], bool(out.behind[0]), bool(out.out_of_bounds[0]))
    return out


def warp_map_point(cam_e: PinholeCamera, P_ref, T_rel: PoseSE3):
    """Project reference-frame points into the current frame.

    ``T_rel`` is the current camera expressed in the reference frame, so
    points move by its inverse.  Returns ``(uv, valid)``; ``valid`` is False
    for points that end up behind the camera.
    """
    P_ref = np.asarray(P_ref, dtype=np.float64)
    Rt = T_rel.R.T
    P_cur = (P_ref.reshape(-1, 3) - T_rel.t) @ Rt.T
    uv, valid = cam_e.project_points(P_cur)
    if P_ref.ndim == 1:
        return uv[0], bool(valid[0])
    return uv, valid
