"""Sliding-window joint optimization of Gaussians and keyframe poses, map growth and refinement."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .compaction import (DensifyConfig, GradientAccumulator, MaskConfig, MutationReport, densify_and_prune,
                         discard_masks, total_scene_loss)
from .keyframing import Keyframe
from .lie import exp
from .optim import PoseAdam
from .rasterizer import render, render_backward
from .scene import CameraIntrinsics, GaussianMap, logit

MIN_INSERT_SCALE = 1e-3
MAX_INSERT_SCALE = 0.5


@dataclass
class MappingConfig:
    window_size: int = 8
    random_history: int = 2
    iterations_per_update: int = 50
    scene_extent: float = 1.0
    lr_position: float = 1.6e-4
    lr_color: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_quaternion: float = 1e-3
    lr_mask: float = 1e-2
    lr_pose_rotation: float = 1e-3
    lr_pose_translation: float = 3e-4
    # weight of an L1 depth term added per frame; 0 keeps the loss color-only
    depth_weight: float = 0.0
    refinement_iterations: int = 2000
    insertion_stride: int = 4
    insertion_alpha: float = 0.5
    color_refinement_interval: int = 10
    color_refinement_iterations: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.random_history < 0:
            raise ValueError("random_history must be >= 0")
        if self.iterations_per_update < 0 or self.refinement_iterations < 0:
            raise ValueError("iteration counts must be >= 0")
        if self.insertion_stride < 1:
            raise ValueError("insertion_stride must be >= 1")

    def learning_rates(self) -> dict[str, float]:
        return {"position": self.lr_position * self.scene_extent, "color": self.lr_color,
                "opacity_logit": self.lr_opacity, "log_scale": self.lr_scale,
                "quaternion": self.lr_quaternion, "mask_logit": self.lr_mask}

    def new_map(self) -> GaussianMap:
        return GaussianMap(self.learning_rates())


def insert_gaussians(gmap: GaussianMap, kf: Keyframe, K: CameraIntrinsics, cfg: MappingConfig) -> int:
    """Seed Gaussians at strided pixels with valid depth that the map does not yet cover."""
    if kf.depth is None or kf.rgb is None:
        return 0
    s = cfg.insertion_stride
    vs, us = np.mgrid[0:K.height:s, 0:K.width:s]
    depth = kf.depth[vs, us]
    ok = np.isfinite(depth) & (depth > 0)
    if len(gmap):
        alpha = render(gmap, kf.pose, K).alpha[vs, us]
        ok &= alpha < cfg.insertion_alpha
    if not ok.any():
        return 0
    u, v, d = us[ok], vs[ok], depth[ok]
    points = kf.pose.inverse().apply(K.backproject(u, v, d))
    scale = np.clip(d / K.fx * s / 2.0, MIN_INSERT_SCALE, MAX_INSERT_SCALE)
    n = len(d)
    gmap.add(points, None, np.repeat(np.log(scale)[:, None], 3, axis=1), np.full(n, logit(0.5)),
             kf.rgb[v, u], np.full(n, logit(0.99)))
    return n


def scale_regularizer(gmap: GaussianMap, beta: float) -> tuple[float, np.ndarray]:
    """beta * sum_j |S_j - mean S|_1 and its log-scale gradient (the mean held fixed)."""
    if len(gmap) == 0 or beta == 0:
        return 0.0, np.zeros_like(gmap.log_scale)
    S = np.exp(gmap.log_scale)
    dev = S - (S[0] + (S - S[0]).mean(axis=0))  # exact zero when all rows match
    return beta * float(np.abs(dev).sum()), beta * np.sign(dev) * S


@dataclass
class MapLoss:
    loss: float
    grads: dict
    pose_grads: dict
    photometric: float
    regularizer: float
    mean2d: np.ndarray = field(repr=False, default=None)
    visible: np.ndarray = field(repr=False, default=None)


def _photometric(gmap, kf, K, depth_weight=0.0):
    out = render(gmap, kf.pose, K)
    diff = out.color - kf.rgb
    npix = diff.shape[0] * diff.shape[1]
    loss = float(np.abs(diff).sum() / npix)
    g_depth = g_alpha = None
    if depth_weight > 0 and kf.depth is not None:
        valid = np.isfinite(kf.depth) & (kf.depth > 0)
        nvalid = max(int(valid.sum()), 1)
        gt = np.where(valid, kf.depth, 0.0)
        dres = np.where(valid, out.depth - out.alpha * gt, 0.0)
        sgn = np.sign(dres) * (depth_weight / nvalid)
        loss += depth_weight * float(np.abs(dres).sum() / nvalid)
        g_depth, g_alpha = sgn, -sgn * gt
    grads = render_backward(gmap, kf.pose, K, out, np.sign(diff) / npix, g_depth, g_alpha)
    return loss, grads, out


def mapping_loss(gmap: GaussianMap, window, history, K: CameraIntrinsics, beta: float,
                 frozen: frozenset = frozenset(), depth_weight: float = 0.0) -> MapLoss:
    """Summed per-frame mean L1 over window and history frames plus the scale regularizer.

    A positive ``depth_weight`` adds ``|D - alpha*D_gt|`` averaged over valid depth pixels.
    Pose gradients are returned for window keyframes whose index is not in ``frozen``.
    """
    n = len(gmap)
    names = gmap.params().keys()
    grads = {name: np.zeros_like(getattr(gmap, name)) for name in names}
    pose_grads = {}
    mean2d = np.zeros((n, 2))
    visible = np.zeros(n, dtype=bool)
    photo = 0.0
    in_window = {id(kf) for kf in window}
    for kf in list(window) + list(history):
        loss, g, out = _photometric(gmap, kf, K, depth_weight)
        photo += loss
        for name in names:
            grads[name] += getattr(g, name)
        mean2d += g.mean2d
        visible |= np.isin(gmap.ids, np.fromiter(out.visible_ids, dtype=np.int64))
        if id(kf) in in_window and kf.index not in frozen:
            pose_grads[kf.index] = g.pose
    reg, reg_grad = scale_regularizer(gmap, beta)
    grads["log_scale"] += reg_grad
    return MapLoss(photo + reg, grads, pose_grads, photo, reg, mean2d, visible)


@dataclass
class UpdateReport:
    iterations: int
    losses: list
    best_loss: float
    history: list
    mutations: list
    gaussians: int

    def as_log(self) -> dict:
        return {"iterations": self.iterations, "first_loss": self.losses[0] if self.losses else None,
                "final_loss": self.losses[-1] if self.losses else None, "best_loss": self.best_loss,
                "history": self.history, "mutations": self.mutations, "gaussians": self.gaussians}


class Mapper:
    """Owns the map and everything the mapping flow mutates."""

    def __init__(self, K: CameraIntrinsics, cfg: MappingConfig | None = None, mask_cfg: MaskConfig | None = None,
                 densify_cfg: DensifyConfig | None = None, gmap: GaussianMap | None = None):
        self.K = K
        self.cfg = cfg or MappingConfig()
        self.mask_cfg = mask_cfg or MaskConfig()
        self.densify_cfg = densify_cfg or DensifyConfig()
        self.gmap = gmap if gmap is not None else self.cfg.new_map()
        self.gmap.mask_epsilon = self.mask_cfg.epsilon
        self.rng = np.random.default_rng(self.cfg.seed)
        self.acc = GradientAccumulator(len(self.gmap))
        self.keyframes: list[Keyframe] = []  # every admitted information keyframe
        self.anchor: int | None = None
        self.pose_opts: dict[int, PoseAdam] = {}
        self.iteration = 0
        self.updates = 0

    def register(self, kf: Keyframe) -> None:
        self.keyframes.append(kf)
        if self.anchor is None:
            self.anchor = kf.index

    def sample_history(self, window) -> list[Keyframe]:
        members = {kf.index for kf in window}
        pool = [kf for kf in self.keyframes if kf.index not in members]
        k = min(self.cfg.random_history, len(pool))
        if k == 0:
            return []
        picks = self.rng.choice(len(pool), size=k, replace=False)
        return [pool[i] for i in sorted(picks)]

    def _apply(self, grads: dict) -> None:
        gmap = self.gmap
        gmap.optimizer.step(gmap.params(), grads)
        gmap.normalize_quaternions()
        np.clip(gmap.color, 0.0, 1.0, out=gmap.color)

    def _densify(self, densify: bool = True) -> MutationReport:
        report = densify_and_prune(self.gmap, self.acc, self.densify_cfg, self.rng, densify=densify)
        return report

    def map_update(self, window) -> UpdateReport:
        window = list(window)
        if not window:
            raise ValueError("map_update needs a nonempty window")
        frozen = frozenset() if self.anchor is None else frozenset({self.anchor})
        losses, mutations, hist_log = [], [], []
        best = np.inf
        self.acc.resize(len(self.gmap))
        for _ in range(self.cfg.iterations_per_update):
            if len(self.gmap) == 0:
                break
            history = self.sample_history(window)
            hist_log.append([kf.index for kf in history])
            ml = mapping_loss(self.gmap, window, history, self.K, self.mask_cfg.beta, frozen,
                              self.cfg.depth_weight)
            losses.append(ml.loss)
            best = min(best, ml.loss)
            self.acc.update(ml.mean2d, ml.visible)
            self._apply(ml.grads)
            for kf in window:
                g = ml.pose_grads.get(kf.index)
                if g is None:
                    continue
                opt = self.pose_opts.setdefault(
                    kf.index, PoseAdam(self.cfg.lr_pose_translation, self.cfg.lr_pose_rotation))
                kf.pose = exp(opt.step(g)) @ kf.pose
            self.iteration += 1
            if self.iteration % self.densify_cfg.interval == 0:
                mutations.append(self._densify().as_dict())
        self.updates += 1
        return UpdateReport(len(losses), losses, float(best), hist_log, mutations, len(self.gmap))

    def scene_step(self, kf: Keyframe) -> float:
        """One Adam step of the composite photometric/SSIM/mask loss on one frame, poses fixed."""
        out = render(self.gmap, kf.pose, self.K)
        loss, img_grad, mask_grad = total_scene_loss(out.color, kf.rgb, self.gmap, self.mask_cfg,
                                                     return_grad=True)
        g = render_backward(self.gmap, kf.pose, self.K, out, img_grad)
        grads = g.as_dict()
        if self.gmap.masks_discarded:
            grads.pop("mask_logit")
        else:
            grads["mask_logit"] = grads["mask_logit"] + mask_grad
        self._apply(grads)
        return float(loss)

    def color_refinement(self, keyframes=None, iterations: int | None = None) -> list[float]:
        pool = list(keyframes if keyframes is not None else self.keyframes)
        if not pool or len(self.gmap) == 0:
            return []
        kf = pool[int(self.rng.integers(len(pool)))]
        iters = self.cfg.color_refinement_iterations if iterations is None else iterations
        return [self.scene_step(kf) for _ in range(iters)]

    def final_refinement(self, keyframes=None, iterations: int | None = None) -> MutationReport:
        pool = list(keyframes if keyframes is not None else self.keyframes)
        iters = self.cfg.refinement_iterations if iterations is None else iterations
        if pool and len(self.gmap):
            for _ in range(iters):
                self.scene_step(pool[int(self.rng.integers(len(pool)))])
        self.acc.reset(len(self.gmap))
        report = MutationReport(before=len(self.gmap), after=len(self.gmap))
        if not self.gmap.masks_discarded:
            report = self._densify(densify=False)
            discard_masks(self.gmap)
        return report


def map_update(mapper: Mapper, window) -> UpdateReport:
    return mapper.map_update(window)


def color_refinement(mapper: Mapper, keyframes=None) -> list[float]:
    return mapper.color_refinement(keyframes)


def final_refinement(mapper: Mapper, keyframes=None) -> MutationReport:
    return mapper.final_refinement(keyframes)
