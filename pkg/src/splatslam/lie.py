"""SE(3) poses and the se(3) tangent operations used by tracking and mapping.

Conventions (fixed project-wide):

* A :class:`Pose` is camera-from-world: ``p_c = R @ p_w + t``.
* Tangent vectors are ordered ``(rho, omega)``: translation first, rotation second.
* Perturbations are left-multiplicative, ``T <- exp(tau) @ T``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

SMALL_ANGLE = 1e-8
NEAR_PI = 1e-9
# below this the (theta - sin) and V^-1 coefficients lose digits to cancellation
SERIES_ANGLE = 1e-3
ORTHO_TOL = 1e-10


class NearSingularRotationWarning(RuntimeWarning):
    """Rotation angle is within numerical reach of pi; log is not unique there."""


def skew(v) -> np.ndarray:
    """Hat operator: ``skew(v) @ w == np.cross(v, w)``."""
    x, y, z = np.asarray(v, dtype=float).reshape(3)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def skew_batch(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform camera-from-world."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> Pose:
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: Pose) -> Pose:
        """``self @ other``: apply ``other`` first.

        Rounding drift in the product rotation is projected back onto SO(3) once it
        exceeds ``ORTHO_TOL``; long chains (tracking steps, constant-velocity
        extrapolation) would otherwise amplify it.
        """
        rot = self.rotation @ other.rotation
        if np.abs(rot.T @ rot - np.eye(3)).max() > ORTHO_TOL:
            u, _, vt = np.linalg.svd(rot)
            rot = u @ vt
        return Pose(rot, self.rotation @ other.translation + self.translation)

    __matmul__ = compose

    def inverse(self) -> Pose:
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def retract(self, tau) -> Pose:
        return exp(tau) @ self

    def orthonormality_error(self) -> float:
        return float(np.abs(self.rotation.T @ self.rotation - np.eye(3)).max())

    def __repr__(self) -> str:
        return f"Pose(t={np.round(self.translation, 6).tolist()}, R={np.round(self.rotation, 6).tolist()})"


def _rodrigues_coeffs(theta: float) -> tuple[float, float, float]:
    """Coefficients of [w], [w]^2 in R and of [w], [w]^2 in V."""
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        return 1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0
    t2 = theta * theta
    half = math.sin(0.5 * theta) / theta
    if theta < SERIES_ANGLE:
        c = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    else:
        c = (theta - math.sin(theta)) / (theta * t2)
    return math.sin(theta) / theta, 2.0 * half * half, c


def so3_exp(omega) -> np.ndarray:
    omega = np.asarray(omega, dtype=float).reshape(3)
    theta = float(np.linalg.norm(omega))
    a, b, _ = _rodrigues_coeffs(theta)
    w = skew(omega)
    return np.eye(3) + a * w + b * (w @ w)


def exp(tau) -> Pose:
    """Closed-form SE(3) exponential of a ``(rho, omega)`` tangent."""
    tau = np.asarray(tau, dtype=float).reshape(6)
    rho, omega = tau[:3], tau[3:]
    theta = float(np.linalg.norm(omega))
    a, b, c = _rodrigues_coeffs(theta)
    w = skew(omega)
    w2 = w @ w
    rot = np.eye(3) + a * w + b * w2
    v = np.eye(3) + b * w + c * w2
    return Pose(rot, v @ rho)


def so3_log(rot: np.ndarray) -> np.ndarray:
    rot = np.asarray(rot, dtype=float)
    cos_theta = float(np.clip((np.trace(rot) - 1.0) / 2.0, -1.0, 1.0))
    theta = math.atan2(0.5 * float(np.linalg.norm(vee(rot - rot.T))), cos_theta)
    if theta < SMALL_ANGLE:
        # first order: R - R^T = 2 [w]
        return 0.5 * vee(rot - rot.T)
    if math.pi - theta < NEAR_PI:
        warnings.warn(f"rotation angle {theta!r} is within {NEAR_PI} of pi", NearSingularRotationWarning, stacklevel=3)
    if math.pi - theta < 1e-4:
        # sin(theta) ~ 0: recover the axis from the symmetric part
        sym = 0.5 * (rot + rot.T) - cos_theta * np.eye(3)
        k = int(np.argmax(np.diag(sym)))
        axis = sym[:, k] / math.sqrt(max(sym[k, k], 1e-300))
        axis /= np.linalg.norm(axis)
        anti = vee(rot - rot.T)
        if anti @ axis < 0.0:
            axis = -axis
        return theta * axis
    return theta / (2.0 * math.sin(theta)) * vee(rot - rot.T)


def log(pose: Pose) -> np.ndarray:
    """Inverse of :func:`exp` for rotation angles below pi."""
    omega = so3_log(pose.rotation)
    theta = float(np.linalg.norm(omega))
    w = skew(omega)
    if theta < SMALL_ANGLE:
        coeff = 1.0 / 12.0
    elif theta < SERIES_ANGLE:
        t2 = theta * theta
        coeff = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    else:
        a, b, _ = _rodrigues_coeffs(theta)
        coeff = (1.0 - a / (2.0 * b)) / (theta * theta)
    v_inv = np.eye(3) - 0.5 * w + coeff * (w @ w)
    return np.concatenate([v_inv @ pose.translation, omega])


def point_pose_jacobian(p_c) -> np.ndarray:
    """d p_c / d tau for the left perturbation, as ``[I | -skew(p_c)]`` (3x6)."""
    jac = np.zeros((3, 6))
    jac[:, :3] = np.eye(3)
    jac[:, 3:] = -skew(p_c)
    return jac


def rotation_pose_jacobian(rot: np.ndarray) -> np.ndarray:
    """d vec(W) / d tau for the left perturbation (9x6).

    ``vec`` stacks the columns of ``W``; the block for column ``i`` is
    ``[0 | skew(W[:, i]).T]``, i.e. ``d W[:, i] = omega x W[:, i]``.
    """
    rot = np.asarray(rot, dtype=float)
    jac = np.zeros((9, 6))
    for i in range(3):
        jac[3 * i:3 * i + 3, 3:] = skew(rot[:, i]).T
    return jac


def quat_wxyz_to_rotmat(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rotmat_to_quat_wxyz(rot: np.ndarray) -> np.ndarray:
    from scipy.spatial.transform import Rotation

    x, y, z, w = Rotation.from_matrix(rot).as_quat()
    q = np.array([w, x, y, z])
    return q if w >= 0 else -q


def pose_distance(a: Pose, b: Pose) -> tuple[float, float]:
    """(translation error in m, rotation error in rad) between two poses."""
    delta = a @ b.inverse()
    ang = float(np.linalg.norm(so3_log(delta.rotation)))
    return float(np.linalg.norm(a.center() - b.center())), ang
