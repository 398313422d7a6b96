"""End-to-end SLAM loop: motion filter, tracking, information window, mapping and evaluation."""

from __future__ import annotations

import json
import logging
import queue
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .datasets import Dataset, generate_synthetic, load_folder, load_tum, trajectory_diameter
from .errors import EvaluationError, TrackingLost
from .export import export_ply, export_trajectory, ply_size, save_png
from .keyframing import Keyframe, KeyframeWindow, MotionFilter, extract_features, motion_filter
from .mapping import Mapper, insert_gaussians
from .metrics import ate_rmse, psnr, ssim
from .rasterizer import render
from .scene import CameraIntrinsics
from .tracking import track_keyframe

log = logging.getLogger(__name__)


@dataclass
class RunReport:
    trajectory: list
    metrics: dict
    gmap: object
    logs: dict = field(default_factory=dict)
    keyframes: list = field(default_factory=list)
    info_keyframes: list = field(default_factory=list)
    output_dir: Path | None = None


def load_dataset(cfg: RunConfig) -> Dataset:
    if cfg.dataset_format == "synthetic":
        return generate_synthetic(cfg.seed, cfg.synthetic)[0]
    if cfg.dataset_format == "tum":
        return load_tum(cfg.dataset)
    vals = [float(v) for v in cfg.intrinsics.split(",")]
    K = CameraIntrinsics(vals[0], vals[1], vals[2], vals[3], int(vals[4]), int(vals[5]),
                         vals[6] if len(vals) > 6 else 5000.0)
    return load_folder(cfg.dataset, K)


class _Logs:
    def __init__(self):
        self.streams: dict[str, list] = {"keyframes": [], "tracking": [], "mapping": [], "window": []}
        self.lock = threading.Lock()

    def emit(self, stream: str, **record) -> None:
        with self.lock:
            self.streams[stream].append(record)


class _Tracker:
    """Tracking-flow state: motion filter, information window and per-frame coarse poses."""

    def __init__(self, cfg: RunConfig, K: CameraIntrinsics, logs: _Logs):
        self.cfg = cfg
        self.K = K
        self.logs = logs
        self.mfilter = MotionFilter(cfg.window)
        self.window = KeyframeWindow(cfg.window)
        self.keyframes: list[Keyframe] = []
        self.lost_frames: list[int] = []

    def process(self, dataset: Dataset, i: int, gmap) -> Keyframe | None:
        """Handle frame ``i`` against map snapshot ``gmap``; returns the keyframe if it was admitted."""
        frame = dataset.frame(i)
        feats = extract_features(frame.rgb)
        dec = motion_filter(self.mfilter, i, feats)
        self.logs.emit("keyframes", frame=i, keyframe=dec.keyframe, reason=dec.reason,
                       mean_norm=round(dec.mean_norm, 6), low_texture=dec.low_texture)
        if not dec.keyframe:
            return None
        pose = dec.predicted_pose
        if len(gmap):
            try:
                result = track_keyframe(gmap, frame, self.K, self.cfg.tracking, init_pose=pose)
                pose = result.pose
                self.logs.emit("tracking", frame=i, **result.as_log())
            except TrackingLost as exc:
                self.lost_frames.append(i)
                self.logs.emit("tracking", frame=i, lost=True, error=str(exc))
            self.mfilter.update_pose(pose)
        visibility = render(gmap, pose, self.K).visible_ids if len(gmap) else frozenset()
        kf = Keyframe(i, frame.timestamp, pose, feats, visibility, rgb=frame.rgb, depth=frame.depth)
        self.keyframes.append(kf)
        wd = self.window.update(kf)
        self.logs.emit("window", frame=i, admitted=wd.admitted, evicted=wd.evicted, rc=round(wd.rc, 6),
                       distance=wd.distance, oc={str(k): round(v, 6) for k, v in wd.oc.items()})
        return kf if wd.admitted else None


def _map_step(mapper: Mapper, kf: Keyframe, window, logs: _Logs) -> None:
    mapper.register(kf)
    added = insert_gaussians(mapper.gmap, kf, mapper.K, mapper.cfg)
    report = mapper.map_update(window)
    logs.emit("mapping", frame=kf.index, inserted=added, **report.as_log())
    log.info("frame %d: mapped, +%d Gaussians -> %d, loss %.4f", kf.index, added, len(mapper.gmap),
             report.best_loss)
    if mapper.updates % mapper.cfg.color_refinement_interval == 0:
        losses = mapper.color_refinement()
        logs.emit("mapping", frame=kf.index, color_refinement=len(losses),
                  final_loss=losses[-1] if losses else None)


def _run_single(dataset, n_frames, tracker: _Tracker, mapper: Mapper, logs: _Logs) -> None:
    for i in range(n_frames):
        kf = tracker.process(dataset, i, mapper.gmap)
        if kf is not None:
            _map_step(mapper, kf, list(tracker.window), logs)
            tracker.mfilter.update_pose(tracker.keyframes[-1].pose)


def _run_threaded(dataset, n_frames, tracker: _Tracker, mapper: Mapper, logs: _Logs) -> None:
    """Tracking and mapping on separate threads; tracking renders against published snapshots."""
    admissions: queue.Queue = queue.Queue()
    published = {"map": mapper.gmap.copy(), "version": 0}
    lock = threading.Lock()
    first_map = threading.Event()
    errors: list[BaseException] = []

    def mapping_flow():
        try:
            while True:
                item = admissions.get()
                if item is None:
                    return
                kf, window = item
                _map_step(mapper, kf, window, logs)
                with lock:
                    published["map"] = mapper.gmap.copy()
                    published["version"] += 1
                first_map.set()
        except BaseException as exc:  # surfaced on the caller's thread
            errors.append(exc)
            first_map.set()

    worker = threading.Thread(target=mapping_flow, name="mapping", daemon=True)
    worker.start()
    try:
        for i in range(n_frames):
            with lock:
                snapshot = published["map"]
            kf = tracker.process(dataset, i, snapshot)
            if kf is not None:
                admissions.put((kf, list(tracker.window)))
                if not first_map.is_set():
                    first_map.wait()
            if errors:
                break
    finally:
        admissions.put(None)
        worker.join()
    if errors:
        raise errors[0]


def evaluate(gmap, info_keyframes, K, dataset: Dataset | None, trajectory) -> tuple[dict, dict]:
    """Metrics over information keyframes plus ATE when ground truth exists."""
    renders, ps, ss = {}, [], []
    for kf in info_keyframes:
        img = np.clip(render(gmap, kf.pose, K).color, 0.0, 1.0)
        renders[kf.index] = img
        ps.append(psnr(img, kf.rgb))
        ss.append(ssim(img, kf.rgb))
    metrics = {"psnr": float(np.mean(ps)) if ps else None, "ssim": float(np.mean(ss)) if ss else None,
               "gaussians": len(gmap), "keyframes": len(trajectory), "information_keyframes": len(info_keyframes)}
    if dataset is not None and dataset.has_gt():
        gt = dataset.gt_trajectory()
        try:
            metrics["ate_rmse_cm"] = ate_rmse(trajectory, gt)
        except EvaluationError as exc:
            metrics["ate_rmse_cm"] = None
            metrics["ate_error"] = str(exc)
        metrics["trajectory_diameter_m"] = trajectory_diameter([p for _, p in gt])
    return metrics, renders


def run_slam(cfg: RunConfig, dataset: Dataset | None = None, write: bool = True) -> RunReport:
    """Run the full pipeline; with ``write`` the outputs land in ``cfg.output_dir``."""
    dataset = dataset if dataset is not None else load_dataset(cfg)
    K = dataset.intrinsics
    cfg.mapping.seed = cfg.seed
    cfg.mapping.window_size = cfg.window.window_capacity
    logs = _Logs()
    tracker = _Tracker(cfg, K, logs)
    mapper = Mapper(K, cfg.mapping, cfg.mask, cfg.densify)
    n_frames = len(dataset) if cfg.max_frames <= 0 else min(cfg.max_frames, len(dataset))
    start = time.perf_counter()
    if cfg.single_thread:
        _run_single(dataset, n_frames, tracker, mapper, logs)
    else:
        _run_threaded(dataset, n_frames, tracker, mapper, logs)
    final = mapper.final_refinement()
    logs.emit("mapping", stage="final_refinement", **final.as_dict())
    elapsed = time.perf_counter() - start
    trajectory = [(kf.timestamp, kf.pose) for kf in tracker.keyframes]
    metrics, renders = evaluate(mapper.gmap, mapper.keyframes, K, dataset, trajectory)
    metrics["fps"] = n_frames / elapsed if elapsed > 0 else None
    metrics["frames"] = n_frames
    metrics["lost_frames"] = tracker.lost_frames
    metrics["ply_bytes"] = ply_size(mapper.gmap)
    report = RunReport(trajectory, metrics, mapper.gmap, logs.streams, tracker.keyframes, mapper.keyframes)
    if write:
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        export_trajectory(trajectory, out / "trajectory.txt")
        export_ply(mapper.gmap, out / "map.ply")
        if cfg.save_renders:
            (out / "renders").mkdir(exist_ok=True)
            for index, img in renders.items():
                save_png(img, out / "renders" / f"kf_{index:05d}.png")
        for stream, records in logs.streams.items():
            with open(out / f"{stream}.jsonl", "w") as fh:
                for rec in records:
                    fh.write(json.dumps(rec) + "\n")
        (out / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n")
        (out / "config.txt").write_text(cfg.to_text())
        report.output_dir = out
    return report
