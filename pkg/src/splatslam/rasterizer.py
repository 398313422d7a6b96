"""Tile-binned differentiable splatting of color, depth and accumulated alpha.

Pixels sit at integer coordinates (the center of pixel ``(u, v)`` is ``(u, v)``).
Per pixel, Gaussians are composited front to back with
``alpha_i = opacity_i * mask_i * exp(-0.5 * d^T conic_i d)``; accumulation stops
once transmittance drops below ``min_transmittance``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np

from .errors import ContractViolation
from .lie import Pose
from .scene import CameraIntrinsics, Projection, cull_rows, projection_backward, sigmoid

TILE = 16
KERNEL_EXTENT = 6.0  # bounding radius in standard deviations; kernel < 1.6e-8 outside
MIN_TRANSMITTANCE = 1e-4
VISIBLE_WEIGHT = 1e-6


@dataclass
class RenderOutput:
    color: np.ndarray
    depth: np.ndarray
    alpha: np.ndarray
    visible_ids: frozenset
    per_pixel_contrib_counts: np.ndarray
    skipped: int = 0
    ctx: object = field(default=None, repr=False)


@dataclass
class RenderGradients:
    position: np.ndarray
    quaternion: np.ndarray
    log_scale: np.ndarray
    opacity_logit: np.ndarray
    color: np.ndarray
    mask_logit: np.ndarray
    pose: np.ndarray
    mask_value: np.ndarray
    mean2d: np.ndarray  # pixel-space positional gradient (densification statistic)

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"position": self.position, "quaternion": self.quaternion, "log_scale": self.log_scale,
                "opacity_logit": self.opacity_logit, "color": self.color, "mask_logit": self.mask_logit}

    @classmethod
    def zeros(cls, n: int) -> RenderGradients:
        return cls(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)), np.zeros(n), np.zeros((n, 3)),
                   np.zeros(n), np.zeros(6), np.zeros(n), np.zeros((n, 2)))


@dataclass
class _Context:
    proj: Projection
    opac: np.ndarray
    colors: np.ndarray
    tile_start: np.ndarray
    tile_end: np.ndarray
    tile_gauss: np.ndarray
    n_tiles_x: int
    background: np.ndarray
    min_transmittance: float
    n_total: int
    mask_logit: np.ndarray | None
    pose: Pose
    K: CameraIntrinsics


@numba.njit(cache=True)
def _forward_kernel(width, height, n_tiles_x, tile_start, tile_end, tile_gauss, mean2d, conic, opac, colors,
                    depths, bg, t_min, out_color, out_depth, out_alpha, out_count, max_weight):
    n_tiles_y = (height + TILE - 1) // TILE
    for ty in range(n_tiles_y):
        for tx in range(n_tiles_x):
            tile = ty * n_tiles_x + tx
            s = tile_start[tile]
            e = tile_end[tile]
            for py in range(ty * TILE, min((ty + 1) * TILE, height)):
                for px in range(tx * TILE, min((tx + 1) * TILE, width)):
                    t = 1.0
                    c0 = 0.0
                    c1 = 0.0
                    c2 = 0.0
                    d = 0.0
                    cnt = 0
                    for k in range(s, e):
                        g = tile_gauss[k]
                        dx = px - mean2d[g, 0]
                        dy = py - mean2d[g, 1]
                        power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) - conic[g, 1] * dx * dy
                        a = opac[g] * np.exp(power)
                        w = a * t
                        c0 += w * colors[g, 0]
                        c1 += w * colors[g, 1]
                        c2 += w * colors[g, 2]
                        d += w * depths[g]
                        if w > max_weight[g]:
                            max_weight[g] = w
                        t *= 1.0 - a
                        cnt += 1
                        if t < t_min:
                            break
                    out_color[py, px, 0] = c0 + t * bg[0]
                    out_color[py, px, 1] = c1 + t * bg[1]
                    out_color[py, px, 2] = c2 + t * bg[2]
                    out_depth[py, px] = d
                    out_alpha[py, px] = 1.0 - t
                    out_count[py, px] = cnt


@numba.njit(cache=True)
def _backward_kernel(width, height, n_tiles_x, tile_start, tile_end, tile_gauss, mean2d, conic, opac, colors,
                     depths, bg, t_min, g_color, g_depth, g_alpha, d_mean, d_conic, d_opac, d_colors, d_depths):
    n_tiles_y = (height + TILE - 1) // TILE
    max_len = 0
    for tile in range(len(tile_start)):
        if tile_end[tile] - tile_start[tile] > max_len:
            max_len = tile_end[tile] - tile_start[tile]
    a_buf = np.empty(max_len)
    t_buf = np.empty(max_len)
    k_buf = np.empty(max_len)
    for ty in range(n_tiles_y):
        for tx in range(n_tiles_x):
            tile = ty * n_tiles_x + tx
            s = tile_start[tile]
            e = tile_end[tile]
            for py in range(ty * TILE, min((ty + 1) * TILE, height)):
                for px in range(tx * TILE, min((tx + 1) * TILE, width)):
                    gc0 = g_color[py, px, 0]
                    gc1 = g_color[py, px, 1]
                    gc2 = g_color[py, px, 2]
                    gd = g_depth[py, px]
                    ga = g_alpha[py, px]
                    if gc0 == 0.0 and gc1 == 0.0 and gc2 == 0.0 and gd == 0.0 and ga == 0.0:
                        continue
                    t = 1.0
                    cnt = 0
                    for k in range(s, e):
                        g = tile_gauss[k]
                        dx = px - mean2d[g, 0]
                        dy = py - mean2d[g, 1]
                        power = -0.5 * (conic[g, 0] * dx * dx + conic[g, 2] * dy * dy) - conic[g, 1] * dx * dy
                        kern = np.exp(power)
                        a = opac[g] * kern
                        a_buf[cnt] = a
                        t_buf[cnt] = t
                        k_buf[cnt] = kern
                        t *= 1.0 - a
                        cnt += 1
                        if t < t_min:
                            break
                    # rest = value composited behind the current Gaussian, starting from full transmittance
                    rest = gc0 * bg[0] + gc1 * bg[1] + gc2 * bg[2]
                    for j in range(cnt - 1, -1, -1):
                        g = tile_gauss[s + j]
                        a = a_buf[j]
                        tj = t_buf[j]
                        w = a * tj
                        val = gc0 * colors[g, 0] + gc1 * colors[g, 1] + gc2 * colors[g, 2] + gd * depths[g] + ga
                        d_colors[g, 0] += w * gc0
                        d_colors[g, 1] += w * gc1
                        d_colors[g, 2] += w * gc2
                        d_depths[g] += w * gd
                        d_a = tj * (val - rest)
                        rest = a * val + (1.0 - a) * rest
                        kern = k_buf[j]
                        d_opac[g] += d_a * kern
                        d_power = d_a * opac[g] * kern
                        dx = px - mean2d[g, 0]
                        dy = py - mean2d[g, 1]
                        d_conic[g, 0] += -0.5 * dx * dx * d_power
                        d_conic[g, 1] += -dx * dy * d_power
                        d_conic[g, 2] += -0.5 * dy * dy * d_power
                        d_mean[g, 0] += d_power * (conic[g, 0] * dx + conic[g, 1] * dy)
                        d_mean[g, 1] += d_power * (conic[g, 1] * dx + conic[g, 2] * dy)


def _bin_tiles(mean2d: np.ndarray, cov2d: np.ndarray, width: int, height: int):
    """Assign each Gaussian (already depth sorted) to the tiles its bounding circle touches."""
    n_tx = (width + TILE - 1) // TILE
    n_ty = (height + TILE - 1) // TILE
    n_tiles = n_tx * n_ty
    if len(mean2d) == 0:
        z = np.zeros(n_tiles, dtype=np.int64)
        return z, z.copy(), np.zeros(0, dtype=np.int64), n_tx
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    lam = 0.5 * (a + c) + np.sqrt(0.25 * (a - c) ** 2 + b * b)
    r = KERNEL_EXTENT * np.sqrt(lam)
    x0 = np.clip(np.ceil(mean2d[:, 0] - r), 0, width - 1).astype(np.int64)
    x1 = np.clip(np.floor(mean2d[:, 0] + r), 0, width - 1).astype(np.int64)
    y0 = np.clip(np.ceil(mean2d[:, 1] - r), 0, height - 1).astype(np.int64)
    y1 = np.clip(np.floor(mean2d[:, 1] + r), 0, height - 1).astype(np.int64)
    empty = (mean2d[:, 0] + r < 0) | (mean2d[:, 0] - r > width - 1) | (mean2d[:, 1] + r < 0) | \
            (mean2d[:, 1] - r > height - 1)
    tx0, tx1, ty0, ty1 = x0 // TILE, x1 // TILE, y0 // TILE, y1 // TILE
    nx = np.where(empty, 0, tx1 - tx0 + 1)
    ny = np.where(empty, 0, ty1 - ty0 + 1)
    counts = nx * ny
    gauss = np.repeat(np.arange(len(mean2d)), counts)
    offs = np.arange(len(gauss)) - np.repeat(np.cumsum(counts) - counts, counts)
    nxr = np.repeat(nx, counts)
    tile_ids = (np.repeat(ty0, counts) + offs // np.maximum(nxr, 1)) * n_tx + np.repeat(tx0, counts) + offs % np.maximum(nxr, 1)
    order = np.argsort(tile_ids, kind="stable")
    tile_ids = tile_ids[order]
    gauss = gauss[order]
    tile_start = np.searchsorted(tile_ids, np.arange(n_tiles), side="left").astype(np.int64)
    tile_end = np.searchsorted(tile_ids, np.arange(n_tiles), side="right").astype(np.int64)
    return tile_start, tile_end, gauss.astype(np.int64), n_tx


def _scene_mask(gmap, mask_override):
    if mask_override is not None:
        return np.asarray(mask_override, dtype=float)
    return gmap.mask_values()


def render(gmap, pose: Pose, K: CameraIntrinsics, background=None, min_transmittance: float = MIN_TRANSMITTANCE,
           mask_override=None) -> RenderOutput:
    """Forward render of color, depth and alpha. ``mask_override`` replaces the binary mask values."""
    bg = np.zeros(3) if background is None else np.asarray(background, dtype=float)
    mask = _scene_mask(gmap, mask_override)
    proj = cull_rows(gmap.position, gmap.quaternion, gmap.log_scale, gmap.opacity_logit, mask, gmap.ids, pose, K)
    h, w = K.height, K.width
    opac = proj.opacity * proj.mask
    colors = np.ascontiguousarray(gmap.color[proj.rows])
    tile_start, tile_end, tile_gauss, n_tx = _bin_tiles(proj.mean2d, proj.cov2d, w, h)
    color = np.empty((h, w, 3))
    depth = np.empty((h, w))
    alpha = np.empty((h, w))
    count = np.empty((h, w), dtype=np.int64)
    max_weight = np.zeros(len(proj.rows))
    _forward_kernel(w, h, n_tx, tile_start, tile_end, tile_gauss, np.ascontiguousarray(proj.mean2d),
                    np.ascontiguousarray(proj.conic), opac, colors, np.ascontiguousarray(proj.depth), bg,
                    float(min_transmittance), color, depth, alpha, count, max_weight)
    depth[alpha == 0.0] = 0.0  # underflowed weights leave no coverage
    visible = frozenset(int(i) for i in gmap.ids[proj.rows[max_weight > VISIBLE_WEIGHT]])
    ctx = _Context(proj, opac, colors, tile_start, tile_end, tile_gauss, n_tx, bg, float(min_transmittance),
                   len(gmap), None if getattr(gmap, "masks_discarded", True) else gmap.mask_logit, pose, K)
    return RenderOutput(color, depth, alpha, visible, count, int((~proj.valid).sum()), ctx)


def render_backward(gmap, pose: Pose, K: CameraIntrinsics, output: RenderOutput, dL_dcolor=None, dL_ddepth=None,
                    dL_dalpha=None) -> RenderGradients:
    """Reverse-mode gradients of a scalar loss given its gradients w.r.t. the rendered images."""
    h, w = K.height, K.width
    dL_dcolor = np.zeros((h, w, 3)) if dL_dcolor is None else np.asarray(dL_dcolor, dtype=float)
    dL_ddepth = np.zeros((h, w)) if dL_ddepth is None else np.asarray(dL_ddepth, dtype=float)
    dL_dalpha = np.zeros((h, w)) if dL_dalpha is None else np.asarray(dL_dalpha, dtype=float)
    if dL_dcolor.shape != (h, w, 3) or dL_ddepth.shape != (h, w) or dL_dalpha.shape != (h, w):
        raise ContractViolation("upstream gradient shapes do not match the render")
    ctx = output.ctx
    if ctx is None or ctx.n_total != len(gmap):
        raise ContractViolation("render output does not belong to this map")
    proj = ctx.proj
    m = len(proj.rows)
    n = len(gmap)
    grads = RenderGradients.zeros(n)
    if m == 0:
        return grads
    d_mean = np.zeros((m, 2))
    d_conic = np.zeros((m, 3))
    d_opac = np.zeros(m)
    d_colors = np.zeros((m, 3))
    d_depths = np.zeros(m)
    _backward_kernel(w, h, ctx.n_tiles_x, ctx.tile_start, ctx.tile_end, ctx.tile_gauss,
                     np.ascontiguousarray(proj.mean2d), np.ascontiguousarray(proj.conic), ctx.opac, ctx.colors,
                     np.ascontiguousarray(proj.depth), ctx.background, ctx.min_transmittance,
                     np.ascontiguousarray(dL_dcolor), np.ascontiguousarray(dL_ddepth),
                     np.ascontiguousarray(dL_dalpha), d_mean, d_conic, d_opac, d_colors, d_depths)
    g_pos, g_quat, g_ls, g_mask_scale, g_pose = projection_backward(proj, pose, K, d_mean, d_conic, d_depths)
    rows = proj.rows
    grads.position[rows] = g_pos
    grads.quaternion[rows] = g_quat
    grads.log_scale[rows] = g_ls
    grads.color[rows] = d_colors
    grads.mean2d[rows] = d_mean
    sig = proj.opacity
    grads.opacity_logit[rows] = d_opac * proj.mask * sig * sigmoid(-gmap.opacity_logit[rows])
    grads.mask_value[rows] = d_opac * sig + g_mask_scale
    grads.pose = g_pose
    if ctx.mask_logit is not None:
        # straight-through: dB/db = sigmoid'(b)
        sb = sigmoid(ctx.mask_logit)
        grads.mask_logit = grads.mask_value * sb * sigmoid(-ctx.mask_logit)
    return grads


def render_reference(gmap, pose: Pose, K: CameraIntrinsics, background=None, mask_override=None) -> RenderOutput:
    """Naive all-pixels x all-Gaussians compositor without tiling or early stop."""
    bg = np.zeros(3) if background is None else np.asarray(background, dtype=float)
    mask = _scene_mask(gmap, mask_override)
    proj = cull_rows(gmap.position, gmap.quaternion, gmap.log_scale, gmap.opacity_logit, mask, gmap.ids, pose, K)
    h, w = K.height, K.width
    ys, xs = np.mgrid[0:h, 0:w]
    pix = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(float)
    npix = len(pix)
    color = np.empty((npix, 3))
    depth = np.empty(npix)
    alpha = np.empty(npix)
    counts = np.empty(npix, dtype=np.int64)
    opac = proj.opacity * proj.mask
    cols = gmap.color[proj.rows]
    max_w = np.zeros(len(proj.rows))
    chunk = max(1, 2_000_000 // max(1, len(proj.rows)))
    for s in range(0, npix, chunk):
        p = pix[s:s + chunk]
        d = p[:, None, :] - proj.mean2d[None, :, :]
        power = -0.5 * (proj.conic[:, 0] * d[..., 0] ** 2 + proj.conic[:, 2] * d[..., 1] ** 2) \
            - proj.conic[:, 1] * d[..., 0] * d[..., 1]
        a = opac * np.exp(power)
        trans = np.cumprod(np.concatenate([np.ones((len(p), 1)), 1.0 - a], axis=1), axis=1)
        wts = a * trans[:, :-1]
        t_final = trans[:, -1]
        color[s:s + chunk] = wts @ cols + t_final[:, None] * bg
        depth[s:s + chunk] = wts @ proj.depth
        alpha[s:s + chunk] = 1.0 - t_final
        counts[s:s + chunk] = len(proj.rows)
        if len(proj.rows):
            max_w = np.maximum(max_w, wts.max(axis=0))
    visible = frozenset(int(i) for i in gmap.ids[proj.rows[max_w > VISIBLE_WEIGHT]])
    return RenderOutput(color.reshape(h, w, 3), depth.reshape(h, w), alpha.reshape(h, w), visible,
                        counts.reshape(h, w), int((~proj.valid).sum()))
