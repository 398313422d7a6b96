"""Scene data model: Gaussians, camera, frames, and the 3D -> 2D projection."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .lie import Pose, rotation_pose_jacobian, skew_batch
from .optim import Adam

Z_NEAR = 0.01
Z_FAR = 100.0
COV2D_FLOOR = 0.3
CULL_SIGMA = 3.0

PARAM_NAMES = ("position", "quaternion", "log_scale", "opacity_logit", "color", "mask_logit")


def sigmoid(x):
    return expit(np.asarray(x, dtype=float))


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 5000.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def backproject(self, u, v, depth) -> np.ndarray:
        """Camera-frame points for pixel coords ``(u, v)`` at ``depth`` metres."""
        x = (np.asarray(u, dtype=float) - self.cx) / self.fx * depth
        y = (np.asarray(v, dtype=float) - self.cy) / self.fy * depth
        return np.stack([x, y, np.asarray(depth, dtype=float)], axis=-1)


@dataclass
class Gaussian:
    position: np.ndarray
    rotation_q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    log_scale: np.ndarray = field(default_factory=lambda: np.zeros(3))
    opacity_logit: float = 0.0
    color: np.ndarray = field(default_factory=lambda: np.full(3, 0.5))
    mask_logit: float = 10.0


@dataclass
class Frame:
    index: int
    timestamp: float
    rgb: np.ndarray
    depth: np.ndarray | None = None
    pose: Pose = field(default_factory=Pose.identity)
    feature_map: np.ndarray | None = None
    visibility: frozenset | None = None

    def check(self, K: CameraIntrinsics) -> None:
        if self.rgb.shape != (K.height, K.width, 3):
            raise ValueError(f"rgb shape {self.rgb.shape} does not match intrinsics {K.height}x{K.width}")
        if self.depth is not None and self.depth.shape != (K.height, K.width):
            raise ValueError("depth shape does not match rgb")


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Batched wxyz quaternion (any norm) -> rotation matrices (..., 3, 3)."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    r = np.empty(q.shape[:-1] + (3, 3))
    r[..., 0, 0] = 1 - 2 * (y * y + z * z)
    r[..., 0, 1] = 2 * (x * y - w * z)
    r[..., 0, 2] = 2 * (x * z + w * y)
    r[..., 1, 0] = 2 * (x * y + w * z)
    r[..., 1, 1] = 1 - 2 * (x * x + z * z)
    r[..., 1, 2] = 2 * (y * z - w * x)
    r[..., 2, 0] = 2 * (x * z - w * y)
    r[..., 2, 1] = 2 * (y * z + w * x)
    r[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return r


def _rotmat_quat_grad(qn: np.ndarray, g_r: np.ndarray) -> np.ndarray:
    """Pull dL/dR back to dL/d(normalized quaternion)."""
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    g = g_r
    dw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2] - y * g[:, 2, 0] + x * g[:, 2, 1])
    dx = 2 * (y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1] - w * g[:, 1, 2]
              + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2])
    dy = 2 * (-2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0] + z * g[:, 1, 2]
              - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2])
    dz = 2 * (-2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0] - 2 * z * g[:, 1, 1]
              + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1])
    return np.stack([dw, dx, dy, dz], axis=1)


def covariance_3d(rotation_q, log_scale) -> np.ndarray:
    """R S S^T R^T for one Gaussian or a batch."""
    rot = quat_to_rotmat(rotation_q)
    m = rot * np.exp(np.asarray(log_scale, dtype=float))[..., None, :]
    return m @ np.swapaxes(m, -1, -2)


class GaussianMap:
    """Growable struct-of-arrays set of Gaussians with stable ids and Adam state."""

    def __init__(self, lrs: dict[str, float] | None = None):
        self.position = np.zeros((0, 3))
        self.quaternion = np.zeros((0, 4))
        self.log_scale = np.zeros((0, 3))
        self.opacity_logit = np.zeros(0)
        self.color = np.zeros((0, 3))
        self.mask_logit = np.zeros(0)
        self.ids = np.zeros(0, dtype=np.int64)
        self.next_id = 0
        self.masks_discarded = False
        self.mask_epsilon = 0.01
        self.optimizer = Adam(lrs or default_map_lrs())
        self.optimizer.init_state(self.params())

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_arrays(cls, position, quaternion=None, log_scale=None, opacity_logit=None, color=None,
                    mask_logit=None, lrs=None) -> GaussianMap:
        gmap = cls(lrs)
        gmap.add(position, quaternion, log_scale, opacity_logit, color, mask_logit)
        return gmap

    def add(self, position, quaternion=None, log_scale=None, opacity_logit=None, color=None,
            mask_logit=None) -> np.ndarray:
        position = np.atleast_2d(np.asarray(position, dtype=float))
        n = len(position)
        if quaternion is None:
            quaternion = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
        if log_scale is None:
            log_scale = np.full((n, 3), np.log(0.01))
        if opacity_logit is None:
            opacity_logit = np.zeros(n)
        if color is None:
            color = np.full((n, 3), 0.5)
        if mask_logit is None:
            mask_logit = np.full(n, 10.0)
        self.position = np.concatenate([self.position, position])
        self.quaternion = np.concatenate([self.quaternion, np.reshape(quaternion, (n, 4)).astype(float)])
        self.log_scale = np.concatenate([self.log_scale, np.reshape(log_scale, (n, 3)).astype(float)])
        self.opacity_logit = np.concatenate([self.opacity_logit, np.reshape(opacity_logit, n).astype(float)])
        self.color = np.concatenate([self.color, np.reshape(color, (n, 3)).astype(float)])
        self.mask_logit = np.concatenate([self.mask_logit, np.reshape(mask_logit, n).astype(float)])
        new_ids = np.arange(self.next_id, self.next_id + n, dtype=np.int64)
        self.ids = np.concatenate([self.ids, new_ids])
        self.next_id += n
        self.optimizer.append_rows(n)
        return new_ids

    def add_gaussian(self, g: Gaussian) -> int:
        return int(self.add(g.position, g.rotation_q, g.log_scale, g.opacity_logit, g.color, g.mask_logit)[0])

    def gaussian(self, i: int) -> Gaussian:
        return Gaussian(self.position[i].copy(), self.quaternion[i].copy(), self.log_scale[i].copy(),
                        float(self.opacity_logit[i]), self.color[i].copy(), float(self.mask_logit[i]))

    def keep(self, keep: np.ndarray) -> None:
        """Retain rows where ``keep`` is true; optimizer rows follow."""
        keep = np.asarray(keep, dtype=bool)
        for name in PARAM_NAMES:
            setattr(self, name, getattr(self, name)[keep])
        self.ids = self.ids[keep]
        self.optimizer.keep_rows(keep)

    def duplicate(self, rows: np.ndarray, **overrides) -> np.ndarray:
        """Append copies of ``rows`` (with optional replaced fields) sharing their Adam moments."""
        rows = np.asarray(rows, dtype=np.int64)
        n = len(rows)
        for name in PARAM_NAMES:
            src = overrides.get(name, getattr(self, name)[rows])
            setattr(self, name, np.concatenate([getattr(self, name), np.asarray(src, dtype=float)]))
        new_ids = np.arange(self.next_id, self.next_id + n, dtype=np.int64)
        self.ids = np.concatenate([self.ids, new_ids])
        self.next_id += n
        self.optimizer.copy_rows(rows)
        return new_ids

    def params(self) -> dict[str, np.ndarray]:
        names = PARAM_NAMES if not self.masks_discarded else PARAM_NAMES[:-1]
        return {name: getattr(self, name) for name in names}

    def mask_values(self) -> np.ndarray:
        """Binary forward mask per Gaussian (all ones once masks are discarded)."""
        if self.masks_discarded:
            return np.ones(len(self))
        return (sigmoid(self.mask_logit) >= self.mask_epsilon).astype(float)

    def normalize_quaternions(self) -> None:
        norm = np.linalg.norm(self.quaternion, axis=1, keepdims=True)
        drifted = np.abs(norm - 1.0) > 1e-12  # leave unit rows alone so a zero step stays a no-op
        self.quaternion[:] = np.where(drifted, self.quaternion / norm, self.quaternion)

    def check_congruent(self) -> None:
        n = len(self)
        for name in PARAM_NAMES:
            if len(getattr(self, name)) != n:
                raise AssertionError(f"{name} has {len(getattr(self, name))} rows, expected {n}")
        for name, rows in self.optimizer.rows().items():
            if rows != n:
                raise AssertionError(f"optimizer state {name} has {rows} rows, expected {n}")
        if len(np.unique(self.ids)) != n:
            raise AssertionError("duplicate Gaussian ids")

    def copy(self) -> GaussianMap:
        """Deep copy of parameters (optimizer state included)."""
        out = GaussianMap(self.optimizer.lrs)
        for name in PARAM_NAMES:
            setattr(out, name, getattr(self, name).copy())
        out.ids = self.ids.copy()
        out.next_id = self.next_id
        out.masks_discarded = self.masks_discarded
        out.mask_epsilon = self.mask_epsilon
        opt = out.optimizer
        opt.lrs = dict(self.optimizer.lrs)
        opt.t = self.optimizer.t
        opt.m = {k: v.copy() for k, v in self.optimizer.m.items()}
        opt.v = {k: v.copy() for k, v in self.optimizer.v.items()}
        opt.beta1, opt.beta2, opt.eps = self.optimizer.beta1, self.optimizer.beta2, self.optimizer.eps
        return out

    def storage_bytes(self) -> int:
        """Parameter payload as float32: 14 values per Gaussian, +1 while masks exist."""
        per = 14 + (0 if self.masks_discarded else 1)
        return 4 * per * len(self)


def default_map_lrs(scene_extent: float = 1.0) -> dict[str, float]:
    return {
        "position": 1.6e-4 * scene_extent,
        "color": 2.5e-3,
        "opacity_logit": 5e-2,
        "log_scale": 5e-3,
        "quaternion": 1e-3,
        "mask_logit": 1e-2,
    }


@dataclass
class Projection:
    """Batched projection of a subset of Gaussians, with the intermediates the backward pass needs."""

    rows: np.ndarray          # indices into the map arrays
    p_c: np.ndarray           # (M, 3)
    mean2d: np.ndarray        # (M, 2)
    cov2d: np.ndarray         # (M, 2, 2), floor included
    conic: np.ndarray         # (M, 3) as (A, B, C) of the inverse covariance
    depth: np.ndarray         # (M,)
    jac: np.ndarray           # (M, 2, 3) projection Jacobian
    rot: np.ndarray           # (M, 3, 3) Gaussian rotation
    qn: np.ndarray            # (M, 4) normalized quaternion
    qnorm: np.ndarray         # (M,)
    scale: np.ndarray         # (M, 3) exp(log_scale), unmasked
    masked_scale: np.ndarray  # (M, 3)
    cov_w: np.ndarray         # (M, 3, 3)
    cov_c: np.ndarray         # (M, 3, 3)
    opacity: np.ndarray       # (M,) sigmoid(opacity_logit)
    mask: np.ndarray          # (M,) binary mask value
    p_w: np.ndarray           # (M, 3)
    valid: np.ndarray         # (M,) bool, invertible cov2d


def project_arrays(position, quaternion, log_scale, opacity_logit, mask, pose: Pose, K: CameraIntrinsics,
                   rows=None, z_near: float = Z_NEAR) -> Projection:
    """Project Gaussians to pixel space: mean, 2D covariance (with floor), camera-frame depth."""
    if rows is None:
        rows = np.arange(len(position))
    p_w = position[rows]
    w_rot = pose.rotation
    p_c = p_w @ w_rot.T + pose.translation
    x, y, z = p_c[:, 0], p_c[:, 1], p_c[:, 2]
    zs = np.where(z > z_near, z, 1.0)
    mean2d = np.stack([K.fx * x / zs + K.cx, K.fy * y / zs + K.cy], axis=1)
    jac = np.zeros((len(rows), 2, 3))
    jac[:, 0, 0] = K.fx / zs
    jac[:, 0, 2] = -K.fx * x / zs**2
    jac[:, 1, 1] = K.fy / zs
    jac[:, 1, 2] = -K.fy * y / zs**2

    q = quaternion[rows]
    qnorm = np.linalg.norm(q, axis=1)
    qn = q / qnorm[:, None]
    rot = quat_to_rotmat(qn)
    scale = np.exp(log_scale[rows])
    mvals = mask[rows]
    masked_scale = scale * mvals[:, None]
    m = rot * masked_scale[:, None, :]
    cov_w = m @ np.swapaxes(m, 1, 2)
    cov_c = w_rot @ cov_w @ w_rot.T
    cov2d = jac @ cov_c @ np.swapaxes(jac, 1, 2)
    cov2d[:, 0, 0] += COV2D_FLOOR
    cov2d[:, 1, 1] += COV2D_FLOOR
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    valid = det >= 1e-12
    dets = np.where(valid, det, 1.0)
    conic = np.stack([c / dets, -b / dets, a / dets], axis=1)
    return Projection(rows=np.asarray(rows), p_c=p_c, mean2d=mean2d, cov2d=cov2d, conic=conic, depth=z, jac=jac,
                      rot=rot, qn=qn, qnorm=qnorm, scale=scale, masked_scale=masked_scale, cov_w=cov_w,
                      cov_c=cov_c, opacity=sigmoid(opacity_logit[rows]), mask=mvals, p_w=p_w, valid=valid)


def projection_backward(proj: Projection, pose: Pose, K: CameraIntrinsics, g_mean2d, g_conic, g_depth):
    """Chain pixel-space gradients back to Gaussian parameters and the pose tangent.

    ``g_conic`` holds dL/d(A, B, C) with the conic ``[[A, B], [B, C]]``.
    Returns (g_position, g_quaternion, g_log_scale, g_mask_from_scale, g_pose).
    """
    n = len(proj.rows)
    w_rot = pose.rotation
    gq = np.zeros((n, 2, 2))
    gq[:, 0, 0] = g_conic[:, 0]
    gq[:, 0, 1] = gq[:, 1, 0] = 0.5 * g_conic[:, 1]
    gq[:, 1, 1] = g_conic[:, 2]
    q = np.zeros((n, 2, 2))
    q[:, 0, 0] = proj.conic[:, 0]
    q[:, 0, 1] = q[:, 1, 0] = proj.conic[:, 1]
    q[:, 1, 1] = proj.conic[:, 2]
    g_cov2d = -(q @ gq @ q)
    g_cov2d[~proj.valid] = 0.0

    jac = proj.jac
    g_cov_c = np.swapaxes(jac, 1, 2) @ g_cov2d @ jac
    g_jac = 2.0 * g_cov2d @ jac @ proj.cov_c
    g_cov_w = w_rot.T @ g_cov_c @ w_rot
    g_w_cov = (2.0 * g_cov_c @ w_rot @ proj.cov_w).sum(axis=0)

    m = proj.rot * proj.masked_scale[:, None, :]
    g_m = 2.0 * g_cov_w @ m
    g_rot = g_m * proj.masked_scale[:, None, :]
    g_mscale = np.einsum("nik,nik->nk", g_m, proj.rot)
    g_log_scale = g_mscale * proj.masked_scale
    g_mask = np.einsum("nk,nk->n", g_mscale, proj.scale)

    g_qn = _rotmat_quat_grad(proj.qn, g_rot)
    g_quat = (g_qn - proj.qn * np.einsum("nk,nk->n", proj.qn, g_qn)[:, None]) / proj.qnorm[:, None]

    x, y, z = proj.p_c[:, 0], proj.p_c[:, 1], proj.p_c[:, 2]
    fx, fy = K.fx, K.fy
    gu, gv = g_mean2d[:, 0], g_mean2d[:, 1]
    g_pc = np.zeros((n, 3))
    g_pc[:, 0] = gu * fx / z + g_jac[:, 0, 2] * (-fx / z**2)
    g_pc[:, 1] = gv * fy / z + g_jac[:, 1, 2] * (-fy / z**2)
    g_pc[:, 2] = (-gu * fx * x / z**2 - gv * fy * y / z**2 + g_depth
                  + g_jac[:, 0, 0] * (-fx / z**2) + g_jac[:, 0, 2] * (2 * fx * x / z**3)
                  + g_jac[:, 1, 1] * (-fy / z**2) + g_jac[:, 1, 2] * (2 * fy * y / z**3))
    g_position = g_pc @ w_rot

    # point path: [I | -skew(p_c)]^T g = (g, p_c x g), summed over Gaussians
    g_pose = np.zeros(6)
    g_pose[:3] = g_pc.sum(axis=0)
    g_pose[3:] = np.cross(proj.p_c, g_pc).sum(axis=0)
    g_pose += rotation_pose_jacobian(w_rot).T @ g_w_cov.reshape(-1, order="F")
    return g_position, g_quat, g_log_scale, g_mask, g_pose


def project_gaussian(g: Gaussian, pose: Pose, K: CameraIntrinsics, z_near: float = Z_NEAR):
    """Project a single (unmasked) Gaussian; ``None`` when it is behind ``z_near``."""
    proj = project_arrays(np.atleast_2d(g.position), np.atleast_2d(g.rotation_q), np.atleast_2d(g.log_scale),
                          np.array([g.opacity_logit]), np.ones(1), pose, K)
    if proj.depth[0] <= z_near:
        return None
    return proj.mean2d[0], proj.cov2d[0], float(proj.depth[0])


def cull_rows(position, quaternion, log_scale, opacity_logit, mask, ids, pose: Pose, K: CameraIntrinsics,
              z_near: float = Z_NEAR, z_far: float = Z_FAR) -> Projection:
    """Projection of the Gaussians inside the frustum, sorted front to back (ties by id)."""
    n = len(position)
    if n == 0:
        return project_arrays(position, quaternion, log_scale, opacity_logit, mask, pose, K, rows=np.zeros(0, int))
    z = position @ pose.rotation[2] + pose.translation[2]
    rows = np.nonzero((z > z_near) & (z < z_far))[0]
    proj = project_arrays(position, quaternion, log_scale, opacity_logit, mask, pose, K, rows=rows)
    rx = CULL_SIGMA * np.sqrt(proj.cov2d[:, 0, 0])
    ry = CULL_SIGMA * np.sqrt(proj.cov2d[:, 1, 1])
    u, v = proj.mean2d[:, 0], proj.mean2d[:, 1]
    inside = ((u + rx >= -0.5) & (u - rx <= K.width - 0.5) & (v + ry >= -0.5) & (v - ry <= K.height - 0.5)
              & proj.valid)
    keep = rows[inside]
    order = np.lexsort((ids[keep], z[keep]))
    return project_arrays(position, quaternion, log_scale, opacity_logit, mask, pose, K, rows=keep[order])


def frustum_cull(gmap: GaussianMap, pose: Pose, K: CameraIntrinsics, z_near: float = Z_NEAR, z_far: float = Z_FAR):
    """[(id, mean2d, cov2d, depth), ...] of Gaussians in view, ascending depth."""
    proj = cull_rows(gmap.position, gmap.quaternion, gmap.log_scale, gmap.opacity_logit, gmap.mask_values(),
                     gmap.ids, pose, K, z_near, z_far)
    return [(int(gmap.ids[r]), proj.mean2d[k], proj.cov2d[k], float(proj.depth[k]))
            for k, r in enumerate(proj.rows)]


__all__ = [
    "CameraIntrinsics", "Frame", "Gaussian", "GaussianMap", "Projection", "covariance_3d", "cull_rows",
    "frustum_cull", "logit", "project_arrays", "project_gaussian", "projection_backward", "quat_to_rotmat",
    "sigmoid", "skew_batch",
]
