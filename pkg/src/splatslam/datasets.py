"""Dataset ingestion (TUM RGB-D, image folders) and the synthetic acceptance scene."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DatasetError
from .lie import Pose, quat_wxyz_to_rotmat
from .rasterizer import render_reference
from .scene import CameraIntrinsics, Frame, GaussianMap, logit

log = logging.getLogger(__name__)

ASSOCIATION_TOLERANCE = 0.02
TUM_DEPTH_SCALE = 5000.0
# ROS default calibration published with the TUM RGB-D benchmark
TUM_DEFAULT_INTRINSICS = CameraIntrinsics(525.0, 525.0, 319.5, 239.5, 640, 480, TUM_DEPTH_SCALE)


@dataclass
class FrameRecord:
    timestamp: float
    rgb: Path | np.ndarray
    depth: Path | np.ndarray | None = None
    gt_pose: Pose | None = None  # camera-from-world


@dataclass
class Dataset:
    frames: list[FrameRecord]
    intrinsics: CameraIntrinsics
    name: str = "dataset"
    dropped: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.frames)

    def has_gt(self) -> bool:
        return bool(self.frames) and all(f.gt_pose is not None for f in self.frames)

    def gt_trajectory(self) -> list[tuple[float, Pose]]:
        return [(f.timestamp, f.gt_pose) for f in self.frames if f.gt_pose is not None]

    def frame(self, index: int) -> Frame:
        rec = self.frames[index]
        rgb = rec.rgb if isinstance(rec.rgb, np.ndarray) else load_rgb(rec.rgb)
        depth = rec.depth
        if depth is not None and not isinstance(depth, np.ndarray):
            depth = load_depth(depth, self.intrinsics.depth_scale)
        return Frame(index=index, timestamp=rec.timestamp, rgb=rgb, depth=depth)


def load_rgb(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=float) / 255.0


def load_depth(path, depth_scale: float) -> np.ndarray:
    with Image.open(path) as im:
        raw = np.asarray(im, dtype=np.float64)
    return raw / depth_scale


def _read_list(path: Path, min_fields: int) -> list[tuple[float, list[str]]]:
    entries = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.replace(",", " ").split()
        if len(parts) < min_fields:
            raise DatasetError(f"{path.name}:{lineno}: expected {min_fields} fields, got {len(parts)}")
        try:
            stamp = float(parts[0])
        except ValueError as exc:
            raise DatasetError(f"{path.name}:{lineno}: bad timestamp {parts[0]!r}") from exc
        entries.append((stamp, parts[1:]))
    return entries


def _nearest(stamps: np.ndarray, t: float) -> int | None:
    if len(stamps) == 0:
        return None
    i = int(np.argmin(np.abs(stamps - t)))
    return i if abs(stamps[i] - t) <= ASSOCIATION_TOLERANCE else None


def pose_from_tum(values) -> Pose:
    """TUM ``tx ty tz qx qy qz qw`` (world-from-camera) -> camera-from-world."""
    tx, ty, tz, qx, qy, qz, qw = (float(v) for v in values)
    world_from_cam = Pose(quat_wxyz_to_rotmat([qw, qx, qy, qz]), [tx, ty, tz])
    return world_from_cam.inverse()


def load_tum(directory, intrinsics: CameraIntrinsics | None = None) -> Dataset:
    """Read a TUM RGB-D sequence, associating rgb, depth and ground truth within 20 ms."""
    root = Path(directory)
    rgb_txt = root / "rgb.txt"
    if not rgb_txt.exists():
        raise DatasetError(f"missing {rgb_txt}")
    rgb = _read_list(rgb_txt, 2)
    depth = _read_list(root / "depth.txt", 2) if (root / "depth.txt").exists() else []
    gt = _read_list(root / "groundtruth.txt", 8) if (root / "groundtruth.txt").exists() else []
    for name, entries in (("rgb.txt", rgb), ("depth.txt", depth), ("groundtruth.txt", gt)):
        stamps = [s for s, _ in entries]
        if any(b <= a for a, b in zip(stamps, stamps[1:])):
            raise DatasetError(f"{name}: timestamps are not strictly increasing")
    d_stamps = np.array([s for s, _ in depth])
    g_stamps = np.array([s for s, _ in gt])
    frames, dropped = [], 0
    for stamp, fields in rgb:
        rec = FrameRecord(stamp, root / fields[0])
        if depth:
            j = _nearest(d_stamps, stamp)
            if j is None:
                dropped += 1
                continue
            rec.depth = root / depth[j][1][0]
        if gt:
            k = _nearest(g_stamps, stamp)
            if k is None:
                dropped += 1
                continue
            rec.gt_pose = pose_from_tum(gt[k][1][:7])
        frames.append(rec)
    if dropped:
        log.warning("dropped %d unassociated frames from %s", dropped, root)
    return Dataset(frames, intrinsics or TUM_DEFAULT_INTRINSICS, name=root.name, dropped=dropped)


def load_folder(directory, intrinsics: CameraIntrinsics, fps: float = 30.0) -> Dataset:
    """Generic layout: ``rgb/*.png``, optional ``depth/*.png`` (same sort order), optional ``traj.txt``.

    ``traj.txt`` holds one world-from-camera pose per frame, either 16 numbers
    (row-major 4x4) or TUM style ``timestamp tx ty tz qx qy qz qw``.
    """
    root = Path(directory)
    rgb_files = sorted((root / "rgb").glob("*.png")) + sorted((root / "rgb").glob("*.jpg"))
    if not rgb_files:
        raise DatasetError(f"no images under {root / 'rgb'}")
    depth_files = sorted((root / "depth").glob("*.png")) if (root / "depth").is_dir() else []
    if depth_files and len(depth_files) != len(rgb_files):
        raise DatasetError("rgb and depth folders differ in length")
    poses: list[Pose | None] = [None] * len(rgb_files)
    traj = root / "traj.txt"
    stamps = [i / fps for i in range(len(rgb_files))]
    if traj.exists():
        rows = [line.split() for line in traj.read_text().splitlines() if line.strip() and not line.startswith("#")]
        if len(rows) != len(rgb_files):
            raise DatasetError(f"traj.txt has {len(rows)} poses for {len(rgb_files)} images")
        for i, row in enumerate(rows):
            if len(row) == 16:
                poses[i] = Pose.from_matrix(np.array(row, dtype=float).reshape(4, 4)).inverse()
            elif len(row) == 8:
                stamps[i] = float(row[0])
                poses[i] = pose_from_tum(row[1:])
            else:
                raise DatasetError(f"traj.txt:{i + 1}: expected 16 or 8 numbers")
    frames = [FrameRecord(stamps[i], f, depth_files[i] if depth_files else None, poses[i])
              for i, f in enumerate(rgb_files)]
    return Dataset(frames, intrinsics, name=root.name)


@dataclass
class SyntheticSpec:
    n_gaussians: int = 300
    box_size: float = 2.0
    n_frames: int = 60
    width: int = 64
    height: int = 64
    focal: float = 60.0
    radius: float = 3.0
    arc_degrees: float = 120.0
    height_offset: float = 0.4
    height_amplitude: float = 0.15
    scale_range: tuple = (0.08, 0.2)
    opacity_range: tuple = (0.75, 0.95)
    fps: float = 30.0
    min_depth_alpha: float = 0.5


def look_at(center: np.ndarray, target: np.ndarray, up=(0.0, 1.0, 0.0)) -> Pose:
    """Camera-from-world pose (OpenCV axes: x right, y down, z forward)."""
    z = target - center
    z = z / np.linalg.norm(z)
    x = np.cross(-np.asarray(up, dtype=float), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    rot_wc = np.column_stack([x, y, z])
    return Pose(rot_wc, center).inverse()


def synthetic_map(rng: np.random.Generator, spec: SyntheticSpec) -> GaussianMap:
    n = spec.n_gaussians
    half = spec.box_size / 2
    pos = rng.uniform(-half, half, size=(n, 3))
    quat = rng.normal(size=(n, 4))
    quat /= np.linalg.norm(quat, axis=1, keepdims=True)
    lo, hi = np.log(spec.scale_range[0]), np.log(spec.scale_range[1])
    log_scale = rng.uniform(lo, hi, size=(n, 3))
    opacity = logit(rng.uniform(*spec.opacity_range, size=n))
    color = rng.uniform(0.05, 0.95, size=(n, 3))
    return GaussianMap.from_arrays(pos, quat, log_scale, opacity, color, np.full(n, 10.0))


def synthetic_trajectory(spec: SyntheticSpec) -> list[Pose]:
    poses = []
    angles = np.deg2rad(np.linspace(-spec.arc_degrees / 2, spec.arc_degrees / 2, spec.n_frames))
    for k, phi in enumerate(angles):
        h = spec.height_offset + spec.height_amplitude * np.sin(2 * np.pi * k / max(spec.n_frames - 1, 1))
        center = np.array([spec.radius * np.sin(phi), h, -spec.radius * np.cos(phi)])
        poses.append(look_at(center, np.zeros(3)))
    return poses


def generate_synthetic(seed: int = 0, spec: SyntheticSpec | None = None) -> tuple[Dataset, GaussianMap]:
    """Random Gaussian scene observed along a circular arc; frames are exact reference renders."""
    spec = spec or SyntheticSpec()
    rng = np.random.default_rng(seed)
    gmap = synthetic_map(rng, spec)
    K = CameraIntrinsics(spec.focal, spec.focal, (spec.width - 1) / 2, (spec.height - 1) / 2, spec.width,
                         spec.height, TUM_DEPTH_SCALE)
    frames = []
    for k, pose in enumerate(synthetic_trajectory(spec)):
        out = render_reference(gmap, pose, K)
        # sensor-like surface depth: the composited depth renormalized by coverage
        covered = out.alpha >= spec.min_depth_alpha
        depth = np.where(covered, out.depth / np.where(covered, out.alpha, 1.0), 0.0)
        frames.append(FrameRecord(k / spec.fps, np.clip(out.color, 0.0, 1.0), depth, pose))
    return Dataset(frames, K, name=f"synthetic-{seed}", meta={"seed": seed}), gmap


def trajectory_diameter(poses) -> float:
    centers = np.array([p.center() for p in poses])
    diff = centers[:, None, :] - centers[None, :, :]
    return float(np.sqrt((diff**2).sum(-1)).max()) if len(centers) else 0.0
