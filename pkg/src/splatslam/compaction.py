"""Learned binary masks, the composite scene loss, and densify/prune bookkeeping."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ContractViolation
from .scene import GaussianMap, quat_to_rotmat, sigmoid
from .ssim import ssim


@dataclass
class MaskConfig:
    epsilon: float = 0.01
    lambda1: float = 0.2
    lambda2: float = 5e-4
    beta: float = 10.0

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError("epsilon must lie in (0, 1)")
        if not 0.0 <= self.lambda1 <= 1.0:
            raise ValueError("lambda1 must lie in [0, 1]")
        if self.lambda2 < 0 or self.beta < 0:
            raise ValueError("lambda2 and beta must be non-negative")


@dataclass
class DensifyConfig:
    interval: int = 150
    grad_threshold: float = 2e-4
    opacity_threshold: float = 0.05
    small_scale: float = 0.01
    split_factor: float = 1.6
    max_gaussians: int = 20000


def mask_value(b, epsilon: float = 0.01):
    """Straight-through binary mask: (forward value in {0, 1}, dB/db).

    The forward value keeps a Gaussian while ``sigmoid(b) >= epsilon``; the
    gradient is that of the sigmoid.
    """
    s = sigmoid(b)
    forward = (s >= epsilon).astype(float)
    if np.ndim(forward) == 0:
        return float(forward), float(s * sigmoid(-b))
    return forward, s * sigmoid(-np.asarray(b, dtype=float))


def masked_scale_opacity(gmap: GaussianMap) -> tuple[np.ndarray, np.ndarray]:
    b = gmap.mask_values()
    return b[:, None] * np.exp(gmap.log_scale), b * sigmoid(gmap.opacity_logit)


def mask_loss(gmap: GaussianMap) -> tuple[float, np.ndarray]:
    """Mean sigmoid of the mask logits and its gradient per Gaussian."""
    n = len(gmap)
    if n == 0 or gmap.masks_discarded:
        return 0.0, np.zeros(n)
    s = sigmoid(gmap.mask_logit)
    return float(s.mean()), s * sigmoid(-gmap.mask_logit) / n


def photometric_ssim_loss(rendered, gt, lambda1: float, return_grad: bool = False):
    """(1 - lambda1) * mean |rendered - gt| + lambda1 * (1 - SSIM)."""
    rendered = np.asarray(rendered, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if rendered.shape != gt.shape:
        raise ContractViolation(f"shape mismatch {rendered.shape} vs {gt.shape}")
    diff = rendered - gt
    l1 = float(np.abs(diff).mean())
    if lambda1 > 0:
        s, ds = ssim(rendered, gt, return_grad=True)
    else:
        s, ds = 1.0, np.zeros_like(rendered)
    loss = (1.0 - lambda1) * l1 + lambda1 * (1.0 - s)
    if not return_grad:
        return loss
    grad = (1.0 - lambda1) * np.sign(diff) / diff.size - lambda1 * ds
    return loss, grad


def total_scene_loss(rendered, gt, gmap: GaussianMap, cfg: MaskConfig, return_grad: bool = False):
    """Photometric/SSIM loss plus ``lambda2`` times the mask loss.

    With ``return_grad`` returns ``(loss, d loss / d rendered, d loss / d mask_logit)``.
    """
    photo = photometric_ssim_loss(rendered, gt, cfg.lambda1, return_grad=return_grad)
    lm, lm_grad = mask_loss(gmap)
    if not return_grad:
        return photo + cfg.lambda2 * lm
    loss, img_grad = photo
    return loss + cfg.lambda2 * lm, img_grad, cfg.lambda2 * lm_grad


class GradientAccumulator:
    """Running sum of pixel-space positional gradient norms per Gaussian."""

    def __init__(self, n: int = 0):
        self.grad_sum = np.zeros(n)
        self.count = np.zeros(n)

    def __len__(self) -> int:
        return len(self.grad_sum)

    def resize(self, n: int) -> None:
        if n > len(self):
            pad = n - len(self)
            self.grad_sum = np.concatenate([self.grad_sum, np.zeros(pad)])
            self.count = np.concatenate([self.count, np.zeros(pad)])

    def update(self, mean2d_grad: np.ndarray, visible: np.ndarray) -> None:
        self.resize(len(mean2d_grad))
        norms = np.linalg.norm(mean2d_grad, axis=1)
        self.grad_sum[visible] += norms[visible]
        self.count[visible] += 1

    def average(self) -> np.ndarray:
        return np.where(self.count > 0, self.grad_sum / np.maximum(self.count, 1), 0.0)

    def reset(self, n: int) -> None:
        self.grad_sum = np.zeros(n)
        self.count = np.zeros(n)


@dataclass
class MutationReport:
    cloned: int = 0
    split: int = 0
    pruned: int = 0
    mask_pruned: int = 0
    before: int = 0
    after: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


def densify_and_prune(gmap: GaussianMap, acc: GradientAccumulator, cfg: DensifyConfig,
                      rng: np.random.Generator | None = None, densify: bool = True) -> MutationReport:
    """Clone/split high-gradient Gaussians, then drop transparent and mask-rejected ones."""
    if len(acc) != len(gmap):
        raise ContractViolation(f"accumulator has {len(acc)} rows for {len(gmap)} Gaussians")
    rng = rng if rng is not None else np.random.default_rng(0)
    report = MutationReport(before=len(gmap))
    if densify and len(gmap):
        avg = acc.average()
        max_scale = np.exp(gmap.log_scale).max(axis=1)
        hot = avg > cfg.grad_threshold
        budget = max(0, cfg.max_gaussians - len(gmap))
        clone = np.nonzero(hot & (max_scale < cfg.small_scale))[0]
        split = np.nonzero(hot & (max_scale >= cfg.small_scale))[0]
        if len(clone) + len(split) > budget:
            # keep the strongest candidates when over budget
            cand = np.concatenate([clone, split])
            cand = cand[np.argsort(-avg[cand], kind="stable")][:budget]
            clone = np.sort(cand[np.isin(cand, clone)])
            split = np.sort(cand[np.isin(cand, split)])
        if len(clone):
            gmap.duplicate(clone)
        if len(split):
            scale = np.exp(gmap.log_scale[split])
            rot = quat_to_rotmat(gmap.quaternion[split])
            children = []
            for _ in range(2):
                offset = np.einsum("nij,nj->ni", rot, rng.normal(size=(len(split), 3)) * scale)
                children.append(gmap.duplicate(split, position=gmap.position[split] + offset,
                                               log_scale=gmap.log_scale[split] - np.log(cfg.split_factor)))
            keep = np.ones(len(gmap), dtype=bool)
            keep[split] = False
            gmap.keep(keep)
        report.cloned = len(clone)
        report.split = len(split)
    transparent = sigmoid(gmap.opacity_logit) < cfg.opacity_threshold
    masked = (gmap.mask_values() == 0.0) & ~transparent
    report.pruned = int(transparent.sum())
    report.mask_pruned = int(masked.sum())
    gmap.keep(~(transparent | masked))
    acc.reset(len(gmap))
    report.after = len(gmap)
    gmap.check_congruent()
    return report


def discard_masks(gmap: GaussianMap) -> None:
    """Freeze every surviving mask at 1 and drop the mask logits from optimization."""
    if gmap.masks_discarded:
        return
    if len(gmap) and (gmap.mask_values() == 0.0).any():
        raise ContractViolation("masked-out Gaussians remain; prune before discarding masks")
    gmap.masks_discarded = True
    gmap.optimizer.drop("mask_logit")
