"""Pinhole camera model, rigid transforms, and two-view geometry helpers.

Conventions used throughout the package:

- image coordinates follow OpenCV: u right, v down, origin at the top-left
  corner; the camera looks along +z in its own frame.
- a ``Pose`` is the rigid map ``y = R x + t``.  Keyframes store the
  world-from-camera pose, so the camera center in world coordinates is the
  translation component.
- keypoint coordinates are always expressed at octave-0 resolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCameraError, DegenerateRayError, InvalidDepthError

_EPS_DEPTH = 1e-12
_ORTHO_TOL = 1e-9


def _as_float_array(value, shape, name):
    arr = np.asarray(value, dtype=np.float64)
    if arr.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
    arr = arr.copy()
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics with the octave-0 image size."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def contains(self, uv, margin: float = 0.0):
        """Vectorized test that pixel coordinates lie inside the image."""
        uv = np.asarray(uv, dtype=np.float64)
        u, v = uv[..., 0], uv[..., 1]
        return (
            (u >= margin)
            & (u <= self.width - 1 - margin)
            & (v >= margin)
            & (v <= self.height - 1 - margin)
        )


@dataclass(frozen=True)
class ImagePoint:
    """A keypoint at octave-0 resolution with its detection octave."""

    u: float
    v: float
    octave: int = 0

    def __post_init__(self):
        if self.octave < 0:
            raise ValueError("octave must be non-negative")

    @property
    def uv(self) -> np.ndarray:
        return np.array([self.u, self.v])


def so3_hat(w) -> np.ndarray:
    """Skew-symmetric matrix such that so3_hat(w) @ v == cross(w, v)."""
    w = np.asarray(w, dtype=np.float64)
    return np.array(
        [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]]
    )


def so3_exp(w) -> np.ndarray:
    """Rodrigues formula: rotation matrix from an axis-angle vector."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w)
    K = so3_hat(w)
    if theta < 1e-10:
        # second-order series keeps exp/log round trips accurate near zero
        return np.eye(3) + K + 0.5 * (K @ K)
    K = K / theta
    s, c = math.sin(theta), math.cos(theta)
    return np.eye(3) + s * K + (1.0 - c) * (K @ K)


def so3_log(R) -> np.ndarray:
    """Axis-angle vector of a rotation matrix (inverse of so3_exp)."""
    R = np.asarray(R, dtype=np.float64)
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = math.acos(cos_theta)
    if theta < 1e-10:
        return np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
    if theta > math.pi - 1e-6:
        # near pi the off-diagonal formula degrades; use the symmetric part
        A = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.maximum(np.diagonal(A), 0.0))
        # fix signs from the largest component
        k = int(np.argmax(axis))
        if axis[k] > 0:
            axis = A[:, k] / axis[k]
            axis = axis / np.linalg.norm(axis)
        return axis * theta
    vee = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return vee * theta / (2.0 * math.sin(theta))


def orthonormalize_rotation(R) -> np.ndarray:
    """Project a near-rotation matrix back onto SO(3) via SVD."""
    U, _, Vt = np.linalg.svd(np.asarray(R, dtype=np.float64))
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(U @ Vt))
    return U @ D @ Vt


@dataclass(frozen=True)
class Pose:
    """Rigid transform ``y = rotation @ x + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = _as_float_array(self.rotation, (3, 3), "rotation")
        t = _as_float_array(self.translation, (3,), "translation")
        gram = R.T @ R
        gram[0, 0] -= 1.0
        gram[1, 1] -= 1.0
        gram[2, 2] -= 1.0
        if float(np.max(np.abs(gram))) > _ORTHO_TOL:
            raise ValueError("rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise ValueError("rotation determinant is not +1 within 1e-9")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_axis_angle(cls, w, t=(0.0, 0.0, 0.0)) -> "Pose":
        return cls(so3_exp(w), np.asarray(t, dtype=np.float64))

    def apply(self, points) -> np.ndarray:
        """Transform one (3,) point or a stack (..., 3) of points."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def compose(self, other: "Pose") -> "Pose":
        """self ∘ other: apply ``other`` first, then ``self``."""
        return Pose(
            orthonormalize_rotation(self.rotation @ other.rotation),
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def almost_equal(self, other: "Pose", tol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, atol=tol)
            and np.allclose(self.translation, other.translation, atol=tol)
        )

    def depth_of(self, points) -> np.ndarray:
        """Camera-frame depth of world point(s) under this world-from-camera
        pose, without building the inverse transform."""
        p = np.asarray(points, dtype=np.float64)
        return (p - self.translation) @ self.rotation[:, 2]


def rotation_to_quaternion(R) -> np.ndarray:
    """Unit quaternion (qx, qy, qz, qw) of a rotation matrix."""
    R = np.asarray(R, dtype=np.float64)
    t = np.trace(R)
    if t > 0:
        s = math.sqrt(t + 1.0) * 2.0
        qw = 0.25 * s
        qx = (R[2, 1] - R[1, 2]) / s
        qy = (R[0, 2] - R[2, 0]) / s
        qz = (R[1, 0] - R[0, 1]) / s
    else:
        i = int(np.argmax(np.diagonal(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = math.sqrt(max(R[i, i] - R[j, j] - R[k, k] + 1.0, 0.0)) * 2.0
        q = np.zeros(4)
        q[i] = 0.25 * s
        q[3] = (R[k, j] - R[j, k]) / s
        q[j] = (R[j, i] + R[i, j]) / s
        q[k] = (R[k, i] + R[i, k]) / s
        qx, qy, qz, qw = q
    q = np.array([qx, qy, qz, qw])
    if qw < 0:
        q = -q
    return q / np.linalg.norm(q)


def quaternion_to_rotation(q) -> np.ndarray:
    """Rotation matrix of a quaternion given as (qx, qy, qz, qw)."""
    x, y, z, w = np.asarray(q, dtype=np.float64)
    n = math.sqrt(x * x + y * y + z * z + w * w)
    x, y, z, w = x / n, y / n, z / n, w / n
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def project(p, cam: CameraIntrinsics) -> np.ndarray:
    """Project camera-frame point(s) to pixel coordinates.

    Raises BehindCameraError if any depth is non-positive.
    """
    p = np.asarray(p, dtype=np.float64)
    z = p[..., 2]
    if np.any(z <= _EPS_DEPTH):
        raise BehindCameraError()
    uv = np.empty(p.shape[:-1] + (2,))
    uv[..., 0] = cam.fx * p[..., 0] / z + cam.cx
    uv[..., 1] = cam.fy * p[..., 1] / z + cam.cy
    return uv


def backproject(uv, z, cam: CameraIntrinsics) -> np.ndarray:
    """Lift pixel coordinates to a camera-frame point at depth ``z``."""
    uv = np.asarray(uv, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if np.any(z <= 0):
        raise InvalidDepthError("backprojection depth must be positive")
    p = np.empty(np.broadcast_shapes(uv.shape[:-1], z.shape) + (3,))
    p[..., 0] = (uv[..., 0] - cam.cx) * z / cam.fx
    p[..., 1] = (uv[..., 1] - cam.cy) * z / cam.fy
    p[..., 2] = z
    return p


def unit_ray(uv, cam: CameraIntrinsics) -> np.ndarray:
    """Camera-frame ray direction ((u-cx)/fx, (v-cy)/fy, 1) for pixel(s)."""
    uv = np.asarray(uv, dtype=np.float64)
    d = np.empty(uv.shape[:-1] + (3,))
    d[..., 0] = (uv[..., 0] - cam.cx) / cam.fx
    d[..., 1] = (uv[..., 1] - cam.cy) / cam.fy
    d[..., 2] = 1.0
    return d


def reproject(uv, z, rel: Pose, cam: CameraIntrinsics) -> np.ndarray:
    """Map pixel(s) of one view into another: project(rel @ backproject)."""
    return project(rel.apply(backproject(uv, z, cam)), cam)


def projection_jacobian(p, cam: CameraIntrinsics) -> np.ndarray:
    """2x3 Jacobian of ``project`` at camera-frame point(s) ``p``."""
    p = np.asarray(p, dtype=np.float64)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    J = np.zeros(p.shape[:-1] + (2, 3))
    J[..., 0, 0] = cam.fx / z
    J[..., 0, 2] = -cam.fx * x / (z * z)
    J[..., 1, 1] = cam.fy / z
    J[..., 1, 2] = -cam.fy * y / (z * z)
    return J


def deformation_gradient(uv, z, rel: Pose, cam: CameraIntrinsics) -> np.ndarray:
    """2x2 Jacobian of the cross-view reprojection map w.r.t. pixel coords.

    The depth is held fixed; for pure forward motion of an on-axis point
    the result is an isotropic scaling by z/(z+t).
    """
    q = rel.apply(backproject(uv, z, cam))
    if q[2] <= _EPS_DEPTH:
        raise BehindCameraError()
    d_back = np.array([[z / cam.fx, 0.0], [0.0, z / cam.fy], [0.0, 0.0]])
    return projection_jacobian(q, cam) @ rel.rotation @ d_back


def isotropic_scale(gradient, method: str = "det") -> float:
    """Scalar magnitude of a 2x2 deformation gradient.

    ``det`` (default) is exact for isotropic scalings; ``opnorm`` and
    ``trace`` are alternatives for anisotropic cases.
    """
    M = np.asarray(gradient, dtype=np.float64)
    if method == "det":
        return math.sqrt(abs(M[0, 0] * M[1, 1] - M[0, 1] * M[1, 0]))
    if method == "opnorm":
        return float(np.linalg.svd(M, compute_uv=False)[0])
    if method == "trace":
        return abs(M[0, 0] + M[1, 1]) / 2.0
    raise ValueError(f"unknown scalarization method {method!r}")


def parallax_angle(ray_i, ray_j) -> float:
    """Angle in [0, pi] between two viewing rays."""
    a = np.asarray(ray_i, dtype=np.float64)
    b = np.asarray(ray_j, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-15 or nb < 1e-15:
        raise DegenerateRayError("parallax of a zero-norm ray is undefined")
    return math.acos(float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0)))


def parallax_angles(rays_i, rays_j) -> np.ndarray:
    """Vectorized parallax between row-paired stacks of rays."""
    a = np.asarray(rays_i, dtype=np.float64)
    b = np.asarray(rays_j, dtype=np.float64)
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    cosang = np.einsum("...k,...k->...", a, b) / (na * nb)
    return np.arccos(np.clip(cosang, -1.0, 1.0))


def ray_from_observation(uv, pose_wc: Pose, cam: CameraIntrinsics) -> np.ndarray:
    """World-frame viewing ray of an observation (not normalized)."""
    return unit_ray(uv, cam) @ pose_wc.rotation.T
