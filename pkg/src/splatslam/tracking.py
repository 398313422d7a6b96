"""Direct photometric pose tracking against the splatted map."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import TrackingLost
from .lie import Pose, exp
from .optim import PoseAdam
from .rasterizer import render, render_backward
from .scene import CameraIntrinsics, Frame


@dataclass
class TrackingConfig:
    iterations: int = 60
    lr_rotation: float = 3e-3
    lr_translation: float = 1e-3
    convergence_tol: float = 1e-5
    depth_weight: float = 1.0
    lr_decay: float = 1.0  # rate factor reached at the last iteration; decay starts halfway

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.lr_rotation <= 0 or self.lr_translation <= 0:
            raise ValueError("learning rates must be positive")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError("lr_decay must lie in (0, 1]")


def tracking_loss(gmap, pose: Pose, frame: Frame, K: CameraIntrinsics, depth_weight: float = 1.0,
                  return_render: bool = False):
    """Alpha-weighted L1 on color and on valid depth, plus its pose gradient.

    The depth residual uses the coverage-normalized rendered depth, so a partly
    transparent map is not biased towards the camera.

    Returns ``(loss, pose_gradient)`` or, with ``return_render``, also the render.
    Raises :class:`TrackingLost` when nothing is rendered.
    """
    out = render(gmap, pose, K)
    alpha = out.alpha
    if not np.any(alpha > 0):
        raise TrackingLost(f"no visible Gaussians for frame {frame.index}")
    npix = alpha.size
    res = out.color - frame.rgb
    abs_res = np.abs(res).sum(axis=-1)
    loss = float((alpha * abs_res).sum() / npix)
    g_color = alpha[..., None] * np.sign(res) / npix
    g_alpha = abs_res / npix
    g_depth = None
    if frame.depth is not None and depth_weight > 0:
        valid = frame.depth > 0
        nvalid = int(valid.sum())
        if nvalid:
            # alpha * |depth / alpha - gt| with the rendered depth normalized by coverage
            dres = np.where(valid, out.depth - alpha * frame.depth, 0.0)
            sgn = np.sign(dres)
            loss += depth_weight * float(np.abs(dres).sum() / nvalid)
            g_depth = depth_weight * sgn / nvalid
            g_alpha = g_alpha - depth_weight * sgn * np.where(valid, frame.depth, 0.0) / nvalid
    grads = render_backward(gmap, pose, K, out, g_color, g_depth, g_alpha)
    if return_render:
        return loss, grads.pose, out
    return loss, grads.pose


@dataclass
class TrackingResult:
    pose: Pose
    loss: float
    iterations: int
    losses: list = field(default_factory=list)
    best_losses: list = field(default_factory=list)
    lost: bool = False

    def as_log(self) -> dict:
        return {"iterations": self.iterations, "final_loss": self.loss, "lost": self.lost,
                "pose": self.pose.matrix().round(9).tolist()}


def track_keyframe(gmap, frame: Frame, K: CameraIntrinsics, cfg: TrackingConfig,
                   init_pose: Pose | None = None) -> TrackingResult:
    """Adam descent on the left-perturbation tangent; returns the best pose seen."""
    pose = init_pose if init_pose is not None else frame.pose
    opt = PoseAdam(cfg.lr_translation, cfg.lr_rotation)
    base_lr = opt.lr.copy()
    half = cfg.iterations // 2
    span = max(cfg.iterations - 1 - half, 1)
    best_pose, best_loss = pose, np.inf
    losses, best_losses = [], []
    it = 0
    for it in range(1, cfg.iterations + 1):
        loss, grad = tracking_loss(gmap, pose, frame, K, cfg.depth_weight)
        losses.append(loss)
        if loss < best_loss:
            best_pose, best_loss = pose, loss
        best_losses.append(best_loss)
        opt.lr = base_lr * cfg.lr_decay ** (max(it - 1 - half, 0) / span)
        step = opt.step(grad)
        pose = exp(step) @ pose
        if np.linalg.norm(step) < cfg.convergence_tol:
            break
    return TrackingResult(best_pose, best_loss, it, losses, best_losses)
