"""Trajectory and image quality metrics."""

from __future__ import annotations

import numpy as np

from . import ssim as _ssim
from .errors import ContractViolation, EvaluationError
from .lie import Pose

ASSOCIATION_TOLERANCE = 0.02
PSNR_CAP = 100.0


def associate(estimated, gt, tol: float = ASSOCIATION_TOLERANCE) -> list[tuple[Pose, Pose]]:
    """Pair (timestamp, pose) entries by nearest timestamp within ``tol`` seconds."""
    if not gt:
        return []
    g_stamps = np.array([t for t, _ in gt])
    pairs = []
    for t, pose in estimated:
        j = int(np.argmin(np.abs(g_stamps - t)))
        if abs(g_stamps[j] - t) <= tol:
            pairs.append((pose, gt[j][1]))
    return pairs


def umeyama(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rotation R and translation t minimizing sum |R src + t - dst|^2 (no scale)."""
    mu_s, mu_d = src.mean(0), dst.mean(0)
    cov = (dst - mu_d).T @ (src - mu_s) / len(src)
    U, _, Vt = np.linalg.svd(cov)
    D = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        D[2, 2] = -1.0
    R = U @ D @ Vt
    return R, mu_d - R @ mu_s


def ate_rmse(estimated, gt) -> float:
    """RMSE in centimetres of camera centres after rigid alignment of estimated onto gt.

    Both trajectories are sequences of ``(timestamp, Pose)`` with camera-from-world poses.
    """
    pairs = associate(estimated, gt)
    if len(pairs) < 3:
        raise EvaluationError(f"need at least 3 associated poses, got {len(pairs)}")
    est = np.array([p.center() for p, _ in pairs])
    ref = np.array([q.center() for _, q in pairs])
    R, t = umeyama(est, ref)
    residual = est @ R.T + t - ref
    return float(np.sqrt((residual**2).sum(axis=1).mean()) * 100.0)


def _check_pair(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ContractViolation(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    a, b = _check_pair(a, b)
    mse = float(((a - b) ** 2).mean())
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def ssim(a, b) -> float:
    a, b = _check_pair(a, b)
    return max(0.0, float(_ssim.ssim(a, b)))
