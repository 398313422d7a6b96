"""Trajectory text files, binary PLY maps and PNG images."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DatasetError
from .lie import Pose, rotmat_to_quat_wxyz
from .datasets import pose_from_tum
from .scene import GaussianMap

PLY_PROPERTIES = ("x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3",
                  "opacity", "f_dc_0", "f_dc_1", "f_dc_2")


def tum_line(timestamp: float, pose: Pose) -> str:
    """``timestamp tx ty tz qx qy qz qw`` for the world-from-camera inverse of ``pose``."""
    wc = pose.inverse()
    qw, qx, qy, qz = rotmat_to_quat_wxyz(wc.rotation)
    if qw < 0:
        qw, qx, qy, qz = -qw, -qx, -qy, -qz
    vals = [*wc.translation, qx, qy, qz, qw]
    # avoid "-0.000000"
    return " ".join(f"{v:.6f}" for v in [timestamp] + [0.0 if abs(v) < 5e-7 else v for v in vals])


def export_trajectory(trajectory, path) -> None:
    lines = [tum_line(t, pose) + "\n" for t, pose in trajectory]
    Path(path).write_text("".join(lines))


def load_trajectory(path) -> list[tuple[float, Pose]]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise DatasetError(f"{Path(path).name}:{lineno}: expected 8 fields, got {len(parts)}")
        out.append((float(parts[0]), pose_from_tum(parts[1:])))
    return out


def _ply_dtype(with_mask: bool) -> np.dtype:
    names = list(PLY_PROPERTIES) + (["mask"] if with_mask else [])
    return np.dtype([(n, "<f4") for n in names])


def ply_header(n: int, with_mask: bool) -> bytes:
    names = list(PLY_PROPERTIES) + (["mask"] if with_mask else [])
    lines = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    lines += [f"property float {name}" for name in names]
    lines.append("end_header")
    return ("\n".join(lines) + "\n").encode("ascii")


def ply_size(gmap: GaussianMap) -> int:
    with_mask = not gmap.masks_discarded
    return len(ply_header(len(gmap), with_mask)) + _ply_dtype(with_mask).itemsize * len(gmap)


def export_ply(gmap: GaussianMap, path) -> int:
    """Write the map; returns the file size in bytes. Mask logits are stored until discarded."""
    with_mask = not gmap.masks_discarded
    rec = np.empty(len(gmap), dtype=_ply_dtype(with_mask))
    cols = np.hstack([gmap.position, gmap.log_scale, gmap.quaternion, gmap.opacity_logit[:, None], gmap.color])
    for k, name in enumerate(PLY_PROPERTIES):
        rec[name] = cols[:, k]
    if with_mask:
        rec["mask"] = gmap.mask_logit
    data = ply_header(len(gmap), with_mask) + rec.tobytes()
    Path(path).write_bytes(data)
    return len(data)


def load_ply(path, lrs=None) -> GaussianMap:
    raw = Path(path).read_bytes()
    end = raw.find(b"end_header\n")
    if not raw.startswith(b"ply\n") or end < 0:
        raise DatasetError(f"{path}: not a PLY file")
    header = raw[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise DatasetError(f"{path}: only binary little-endian PLY is supported")
    n = next(int(h.split()[2]) for h in header if h.startswith("element vertex"))
    names = [h.split()[2] for h in header if h.startswith("property")]
    with_mask = "mask" in names
    if names != list(PLY_PROPERTIES) + (["mask"] if with_mask else []):
        raise DatasetError(f"{path}: unexpected property layout {names}")
    rec = np.frombuffer(raw, dtype=_ply_dtype(with_mask), count=n, offset=end + len(b"end_header\n"))
    col = {name: rec[name].astype(float) for name in rec.dtype.names}
    gmap = GaussianMap.from_arrays(
        np.column_stack([col["x"], col["y"], col["z"]]),
        np.column_stack([col[f"rot_{i}"] for i in range(4)]),
        np.column_stack([col[f"scale_{i}"] for i in range(3)]),
        col["opacity"],
        np.column_stack([col[f"f_dc_{i}"] for i in range(3)]),
        col["mask"] if with_mask else None,
        lrs=lrs,
    )
    if not with_mask:
        gmap.masks_discarded = True
        gmap.optimizer.drop("mask_logit")
    return gmap


def save_png(image, path) -> None:
    arr = np.asarray(image, dtype=float)
    Image.fromarray((np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)).save(path)


def save_depth_png(depth, path, depth_scale: float = 5000.0) -> None:
    raw = np.clip(np.round(np.asarray(depth) * depth_scale), 0, 65535).astype(np.uint16)
    Image.fromarray(raw).save(path)
