"""Dense descriptors, correlation pyramid, and the motion/information keyframe filters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation
from .lie import Pose, exp, log

CELL = 8
DIM = 256
LEVELS = 4
RELIABLE_CORRELATION = 0.3
SEARCH_RADIUS = 8
MIN_RELIABLE_FRACTION = 0.25

# relative weights of descriptor blocks (each block is unit-normalized first)
PATCH_WEIGHT = 1.0
HIST_WEIGHT = 0.7
COLOR_WEIGHT = 0.05


@dataclass
class WindowConfig:
    motion_threshold: float = 2.0
    max_frame_interval: int = 15
    info_threshold: float = 0.15
    min_mapping_distance: int = 20
    window_capacity: int = 8
    oc_removal_threshold: float = 0.3

    def __post_init__(self):
        if self.window_capacity < 2:
            raise ValueError("window capacity must be at least 2")
        if not 0.0 <= self.info_threshold <= 1.0 or not 0.0 <= self.oc_removal_threshold <= 1.0:
            raise ValueError("RC/OC thresholds must lie in [0, 1]")
        if self.motion_threshold < 0 or self.max_frame_interval < 1 or self.min_mapping_distance < 1:
            raise ValueError("invalid motion/distance thresholds")


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return np.where(n > 1e-12, v / np.where(n > 1e-12, n, 1.0), 0.0)


def extract_features(rgb: np.ndarray) -> np.ndarray:
    """Hand-crafted dense descriptor grid of shape (H // 8, W // 8, 256), unit norm per cell.

    Per 8x8 cell: the mean-subtracted grayscale patch (64), 8-bin gradient
    orientation histograms on a 2x2 subgrid (32), RGB means and standard
    deviations (6), zero padded. Each block is normalized and weighted before
    the final normalization; an all-zero cell becomes ``e_1``.
    """
    rgb = np.asarray(rgb, dtype=float)
    h, w = rgb.shape[:2]
    if h < CELL or w < CELL:
        raise ContractViolation("image must be at least 8x8")
    gh, gw = h // CELL, w // CELL
    img = rgb[: gh * CELL, : gw * CELL]
    gray = img @ np.array([0.299, 0.587, 0.114])

    cells = gray.reshape(gh, CELL, gw, CELL).transpose(0, 2, 1, 3).reshape(gh, gw, CELL * CELL)
    patch = cells - cells.mean(axis=-1, keepdims=True)

    full_gray = rgb @ np.array([0.299, 0.587, 0.114])
    gy, gx = np.gradient(full_gray)
    gx, gy = gx[: gh * CELL, : gw * CELL], gy[: gh * CELL, : gw * CELL]
    mag = np.hypot(gx, gy)
    bins = (np.floor((np.arctan2(gy, gx) + np.pi) / (2 * np.pi) * 8).astype(int)) % 8
    half = CELL // 2
    sub = (np.arange(gh * CELL) % CELL) // half
    sub_x = (np.arange(gw * CELL) % CELL) // half
    sub_index = sub[:, None] * 2 + sub_x[None, :]
    cell_index = (np.arange(gh * CELL) // CELL)[:, None] * gw + (np.arange(gw * CELL) // CELL)[None, :]
    flat = (cell_index * 4 + sub_index) * 8 + bins
    hist = np.bincount(flat.ravel(), weights=mag.ravel(), minlength=gh * gw * 32).reshape(gh, gw, 32)
    hist = hist - hist.mean(axis=-1, keepdims=True)
    hist[np.abs(hist).max(axis=-1) < 1e-12] = 0.0

    pix = img.reshape(gh, CELL, gw, CELL, 3).transpose(0, 2, 1, 3, 4).reshape(gh, gw, CELL * CELL, 3)
    color = np.concatenate([pix.mean(axis=2), pix.std(axis=2)], axis=-1)

    desc = np.zeros((gh, gw, DIM))
    desc[..., :64] = PATCH_WEIGHT * _unit(patch)
    desc[..., 64:96] = HIST_WEIGHT * _unit(hist)
    desc[..., 96:102] = COLOR_WEIGHT * _unit(color)
    norm = np.linalg.norm(desc, axis=-1, keepdims=True)
    degenerate = norm[..., 0] < 1e-12
    desc = desc / np.where(norm > 1e-12, norm, 1.0)
    desc[degenerate] = 0.0
    desc[degenerate, 0] = 1.0
    return desc


def correlation(f_i: np.ndarray, f_j: np.ndarray) -> np.ndarray:
    """All-pairs dot products, shape (h1, w1, h2, w2)."""
    if f_i.shape != f_j.shape:
        raise ContractViolation(f"feature grids differ: {f_i.shape} vs {f_j.shape}")
    return np.einsum("abd,ced->abce", f_i, f_j)


def _pool_last_two(vol: np.ndarray) -> np.ndarray:
    """2x2 average pooling over the last two axes; odd edges average the entries present."""
    h1, w1, h2, w2 = vol.shape
    ph, pw = -(-h2 // 2), -(-w2 // 2)
    padded = np.zeros((h1, w1, 2 * ph, 2 * pw))
    count = np.zeros((2 * ph, 2 * pw))
    padded[..., :h2, :w2] = vol
    count[:h2, :w2] = 1.0
    sums = padded.reshape(h1, w1, ph, 2, pw, 2).sum(axis=(3, 5))
    counts = count.reshape(ph, 2, pw, 2).sum(axis=(1, 3))
    return sums / counts


def correlation_pyramid(f_i: np.ndarray, f_j: np.ndarray, levels: int = LEVELS) -> list[np.ndarray]:
    pyr = [correlation(f_i, f_j)]
    for _ in range(levels - 1):
        pyr.append(_pool_last_two(pyr[-1]))
    return pyr


def _bilinear(vol: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample vol[a, b, y, x] for per-source-cell fractional coords; zero outside."""
    h1, w1, h2, w2 = vol.shape
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    fx = x - x0
    fy = y - y0
    a_idx = np.arange(h1)[:, None, None]
    b_idx = np.arange(w1)[None, :, None]
    out = np.zeros(x.shape)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            xi, yi = x0 + dx, y0 + dy
            ok = (xi >= 0) & (xi < w2) & (yi >= 0) & (yi < h2)
            vals = vol[a_idx, b_idx, np.clip(yi, 0, h2 - 1), np.clip(xi, 0, w2 - 1)]
            out += np.where(ok, vals, 0.0) * wx * wy
    return out


def pyramid_lookup(pyr: list[np.ndarray], coords: np.ndarray, radius: int = 3) -> np.ndarray:
    """Concatenated (2r+1)^2 bilinear neighbourhoods from every level.

    ``coords`` is (h1, w1, 2) holding (x, y) target positions in level-0 cells.
    Output is (h1, w1, levels * (2r+1)^2), ordered level, then dy, then dx.
    """
    coords = np.asarray(coords, dtype=float)
    offs = np.arange(-radius, radius + 1, dtype=float)
    dy, dx = np.meshgrid(offs, offs, indexing="ij")
    out = []
    for k, vol in enumerate(pyr):
        cx = coords[..., 0:1] / 2**k + dx.ravel()
        cy = coords[..., 1:2] / 2**k + dy.ravel()
        out.append(_bilinear(vol, cx, cy))
    return np.concatenate(out, axis=-1)


@dataclass
class MotionEstimate:
    flow: np.ndarray
    mean_norm: float
    reliable: np.ndarray
    low_texture: bool


def _parabola_offset(left: float, center: float, right: float) -> float:
    denom = left - 2.0 * center + right
    if denom >= -1e-12:
        return 0.0
    return float(np.clip(0.5 * (left - right) / denom, -0.5, 0.5))


def _windowed_argmax(vol: np.ndarray, search: int) -> tuple[np.ndarray, np.ndarray]:
    """For every source cell, (row, col) of the best target within +-search cells, and its value."""
    h1, w1, h2, w2 = vol.shape
    best = np.zeros((h1, w1, 2), dtype=int)
    peak = np.zeros((h1, w1))
    ys = np.arange(h2)[:, None]
    xs = np.arange(w2)[None, :]
    for a in range(h1):
        for b in range(w1):
            window = (np.abs(ys - a) <= search) & (np.abs(xs - b) <= search)
            idx = int(np.argmax(np.where(window, vol[a, b], -np.inf)))
            best[a, b] = divmod(idx, w2)
            peak[a, b] = vol[a, b].flat[idx]
    return best, peak


def motion_vector(f_prev: np.ndarray, f_cur: np.ndarray, search: int = SEARCH_RADIUS) -> MotionEstimate:
    """Per-cell displacement from the correlation peak, with sub-cell parabolic refinement.

    The peak is searched on the full-resolution level within +-``search`` cells.
    A cell is reliable when its peak correlation reaches 0.3 and the reverse
    match lands back within one cell. Fewer than a quarter reliable cells
    raises the low-texture flag.
    """
    vol = correlation(f_prev, f_cur)
    h1, w1, h2, w2 = vol.shape
    best, peak = _windowed_argmax(vol, search)
    back, _ = _windowed_argmax(vol.transpose(2, 3, 0, 1), search)
    flow = np.zeros((h1, w1, 2))
    reliable = np.zeros((h1, w1), dtype=bool)
    for a in range(h1):
        for b in range(w1):
            py, px = best[a, b]
            ra, rb = back[py, px]
            reliable[a, b] = peak[a, b] >= RELIABLE_CORRELATION and abs(ra - a) <= 1 and abs(rb - b) <= 1
            ox = oy = 0.0
            # a parabola only models the peak when both neighbours still correlate
            if 0 < px < w2 - 1 and min(vol[a, b, py, px - 1], vol[a, b, py, px + 1]) >= RELIABLE_CORRELATION:
                ox = _parabola_offset(vol[a, b, py, px - 1], vol[a, b, py, px], vol[a, b, py, px + 1])
            if 0 < py < h2 - 1 and min(vol[a, b, py - 1, px], vol[a, b, py + 1, px]) >= RELIABLE_CORRELATION:
                oy = _parabola_offset(vol[a, b, py - 1, px], vol[a, b, py, px], vol[a, b, py + 1, px])
            flow[a, b] = (px + ox - b, py + oy - a)
    norms = np.linalg.norm(flow, axis=-1)
    mean_norm = float(norms[reliable].mean()) if reliable.any() else 0.0
    low_texture = reliable.mean() < MIN_RELIABLE_FRACTION
    return MotionEstimate(flow, mean_norm, reliable, bool(low_texture))


def relative_complement(g_i, g_j) -> float:
    """|G_i minus G_j| / |G_i union G_j|, 0 for an empty union."""
    g_i, g_j = set(g_i), set(g_j)
    union = len(g_i | g_j)
    return len(g_i - g_j) / union if union else 0.0


def overlap_coefficient(g_i, g_j) -> float:
    """|G_i intersect G_j| / min(|G_i|, |G_j|), 0 if either set is empty."""
    g_i, g_j = set(g_i), set(g_j)
    smaller = min(len(g_i), len(g_j))
    return len(g_i & g_j) / smaller if smaller else 0.0


@dataclass(eq=False)
class Keyframe:
    index: int
    timestamp: float
    pose: Pose
    features: np.ndarray | None = None
    visibility: frozenset = field(default_factory=frozenset)
    predecessor: Keyframe | None = field(default=None, repr=False)
    rgb: np.ndarray | None = field(default=None, repr=False)
    depth: np.ndarray | None = field(default=None, repr=False)

    def displacement(self) -> float:
        if self.predecessor is None:
            return np.inf
        return float(np.linalg.norm(self.pose.center() - self.predecessor.pose.center()))


@dataclass
class MotionDecision:
    keyframe: bool
    mean_norm: float
    low_texture: bool
    reason: str
    predicted_pose: Pose | None = None


class MotionFilter:
    """Keeps the last motion keyframe and decides whether a frame becomes the next one."""

    def __init__(self, cfg: WindowConfig):
        self.cfg = cfg
        self.last_features: np.ndarray | None = None
        self.last_index: int | None = None
        self.poses: list[Pose] = []  # tracked poses of motion keyframes, oldest first
        self.indices: list[int] = []

    def predict_pose(self, index: int | None = None) -> Pose:
        """Constant-velocity guess from the last two motion keyframes.

        With ``index`` the inter-keyframe motion is rescaled by the ratio of frame
        gaps; equal gaps reduce to ``(prev @ before^-1) @ prev``.
        """
        if not self.poses:
            return Pose.identity()
        if len(self.poses) == 1:
            return self.poses[-1]
        prev, before = self.poses[-1], self.poses[-2]
        delta = prev @ before.inverse()
        gap = self.indices[-1] - self.indices[-2]
        if index is None or index - self.indices[-1] == gap:
            return delta @ prev
        return exp(log(delta) * (index - self.indices[-1]) / gap) @ prev

    def decide(self, index: int, features: np.ndarray) -> MotionDecision:
        if self.last_features is None:
            return MotionDecision(True, 0.0, False, "first", Pose.identity())
        est = motion_vector(self.last_features, features)
        pixels = est.mean_norm * CELL
        if est.low_texture:
            reason = "low_texture"
        elif pixels > self.cfg.motion_threshold:
            reason = "motion"
        elif index - self.last_index >= self.cfg.max_frame_interval:
            reason = "interval"
        else:
            return MotionDecision(False, est.mean_norm, False, "skip")
        return MotionDecision(True, est.mean_norm, est.low_texture, reason, self.predict_pose(index))

    def accept(self, index: int, features: np.ndarray, pose: Pose) -> None:
        self.last_features = features
        self.last_index = index
        self.poses.append(pose)
        self.indices.append(index)
        del self.poses[:-2], self.indices[:-2]

    def update_pose(self, pose: Pose) -> None:
        """Replace the pose of the newest motion keyframe (after tracking)."""
        if self.poses:
            self.poses[-1] = pose


def motion_filter(state: MotionFilter, index: int, features: np.ndarray) -> MotionDecision:
    """Decide and, on acceptance, register the frame as the newest motion keyframe."""
    decision = state.decide(index, features)
    if decision.keyframe:
        state.accept(index, features, decision.predicted_pose)
    return decision


@dataclass
class WindowDecision:
    admitted: bool
    evicted: int | None
    rc: float
    distance: int
    oc: dict = field(default_factory=dict)


class KeyframeWindow:
    """Fixed-capacity sliding window of information keyframes."""

    def __init__(self, cfg: WindowConfig):
        self.cfg = cfg
        self.members: list[Keyframe] = []
        self.last_info: Keyframe | None = None
        self.admitted_count = 0

    def __len__(self) -> int:
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    def update(self, kf: Keyframe) -> WindowDecision:
        cfg = self.cfg
        last = self.last_info
        rc = relative_complement(kf.visibility, last.visibility) if last is not None else 1.0
        dist = kf.index - last.index if last is not None else 0
        if self.admitted_count >= 2 and not (rc > cfg.info_threshold or dist >= cfg.min_mapping_distance):
            return WindowDecision(False, None, rc, dist)
        evicted = None
        ocs = {m.index: overlap_coefficient(m.visibility, kf.visibility) for m in self.members}
        if len(self.members) >= cfg.window_capacity:
            low = [m for m in self.members if ocs[m.index] < cfg.oc_removal_threshold]
            if low:
                victim = low[0]
            else:
                victim = min(self.members, key=lambda m: (m.displacement(), m.index))
            self.members.remove(victim)
            evicted = victim.index
        kf.predecessor = last
        self.members.append(kf)
        self.last_info = kf
        self.admitted_count += 1
        return WindowDecision(True, evicted, rc, dist, ocs)


def window_update(window: KeyframeWindow, kf: Keyframe) -> tuple[bool, int | None]:
    decision = window.update(kf)
    return decision.admitted, decision.evicted
