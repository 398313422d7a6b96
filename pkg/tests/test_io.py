import json
import logging

import numpy as np
import pytest
from PIL import Image
from scipy.optimize import least_squares
from scipy.spatial.transform import Rotation

from splatslam.cli import main
from splatslam.config import RunConfig
from splatslam.datasets import (SyntheticSpec, generate_synthetic, load_folder, load_tum,
                                trajectory_diameter)
from splatslam.errors import ContractViolation, DatasetError, EvaluationError
from splatslam.export import export_ply, export_trajectory, load_ply, load_trajectory, ply_size, tum_line
from splatslam.lie import Pose, exp
from splatslam.metrics import ate_rmse, psnr, ssim
from splatslam.rasterizer import render, render_reference
from splatslam.scene import CameraIntrinsics
from splatslam.system import run_slam

from _oracles import random_pose, random_scene


def write_tum(root, rgb_stamps, depth_stamps, gt_rows=None):
    (root / "rgb").mkdir()
    (root / "depth").mkdir()
    rng = np.random.default_rng(0)
    images, depths = [], []
    lines = ["# timestamp filename"]
    for t in rgb_stamps:
        img = rng.integers(0, 256, (6, 8, 3), dtype=np.uint8)
        Image.fromarray(img).save(root / "rgb" / f"{t:.6f}.png")
        images.append(img)
        lines.append(f"{t:.6f} rgb/{t:.6f}.png")
    (root / "rgb.txt").write_text("\n".join(lines) + "\n")
    lines = ["# timestamp filename"]
    for t in depth_stamps:
        raw = rng.integers(0, 65536, (6, 8), dtype=np.uint16)
        raw[0, 0] = 5000
        Image.fromarray(raw).save(root / "depth" / f"{t:.6f}.png")
        depths.append(raw)
        lines.append(f"{t:.6f} depth/{t:.6f}.png")
    (root / "depth.txt").write_text("\n".join(lines) + "\n")
    if gt_rows is not None:
        (root / "groundtruth.txt").write_text("# timestamp tx ty tz qx qy qz qw\n" + "".join(
            " ".join(f"{v:.6f}" for v in row) + "\n" for row in gt_rows))
    return images, depths


def test_tum_fixture_round_trips_bit_exactly(tmp_path):
    stamps = [1.0, 1.1, 1.2]
    q = Rotation.from_rotvec([0.1, -0.2, 0.3]).as_quat()  # xyzw
    gt_rows = [[t, 0.1 * k, 0.2, -0.3, *q] for k, t in enumerate(stamps)]
    images, depths = write_tum(tmp_path, stamps, stamps, gt_rows)
    ds = load_tum(tmp_path)
    assert len(ds) == 3 and ds.dropped == 0 and ds.has_gt()
    for k in range(3):
        f = ds.frame(k)
        assert np.array_equal(f.rgb, images[k] / 255.0)
        assert np.array_equal(f.depth, depths[k] / 5000.0)
        assert f.depth[0, 0] == 1.0
        wc = ds.frames[k].gt_pose.inverse()
        assert np.allclose(wc.translation, gt_rows[k][1:4], atol=1e-12)
        assert np.allclose(wc.rotation, Rotation.from_quat(q).as_matrix(), atol=1e-6)


def test_tum_drops_frames_without_depth(tmp_path, caplog):
    write_tum(tmp_path, [1.0, 1.1, 1.2], [1.0, 1.15, 1.2])
    with caplog.at_level(logging.WARNING):
        ds = load_tum(tmp_path)
    assert len(ds) == 2 and ds.dropped == 1
    assert [f.timestamp for f in ds.frames] == [1.0, 1.2]
    assert "dropped 1" in caplog.text


def test_tum_association_tolerance_is_twenty_ms(tmp_path):
    write_tum(tmp_path, [1.0, 2.0], [1.019, 2.021])
    assert [f.timestamp for f in load_tum(tmp_path).frames] == [1.0]


def test_tum_errors(tmp_path):
    with pytest.raises(DatasetError, match="rgb.txt"):
        load_tum(tmp_path)
    write_tum(tmp_path, [1.0, 1.1], [1.0, 1.1])
    (tmp_path / "groundtruth.txt").write_text("# header\n1.0 0 0 0 0 0 0 1\n1.1 0 0\n")
    with pytest.raises(DatasetError, match=":3:"):
        load_tum(tmp_path)
    (tmp_path / "groundtruth.txt").unlink()
    (tmp_path / "rgb.txt").write_text("1.1 rgb/1.100000.png\n1.0 rgb/1.000000.png\n")
    with pytest.raises(DatasetError, match="increasing"):
        load_tum(tmp_path)


def test_folder_loader_reads_matrix_trajectories(tmp_path):
    (tmp_path / "rgb").mkdir()
    poses = [random_pose(np.random.default_rng(i)) for i in range(2)]
    for i in range(2):
        Image.fromarray(np.zeros((4, 4, 3), np.uint8)).save(tmp_path / "rgb" / f"{i:04d}.png")
    (tmp_path / "traj.txt").write_text("".join(" ".join(map(repr, p.inverse().matrix().ravel().tolist())) + "\n"
                                               for p in poses))
    ds = load_folder(tmp_path, CameraIntrinsics(4, 4, 1.5, 1.5, 4, 4))
    assert len(ds) == 2 and ds.frames[1].depth is None
    assert np.allclose(ds.frames[1].gt_pose.matrix(), poses[1].matrix(), atol=1e-12)
    with pytest.raises(DatasetError):
        load_folder(tmp_path / "missing", CameraIntrinsics(4, 4, 1.5, 1.5, 4, 4))


SMALL = SyntheticSpec(n_gaussians=40, n_frames=5, width=32, height=32, focal=30.0)


def test_synthetic_is_deterministic_and_self_consistent():
    (a, ga), (b, gb) = generate_synthetic(3, SMALL), generate_synthetic(3, SMALL)
    for fa, fb in zip(a.frames, b.frames):
        assert np.array_equal(fa.rgb, fb.rgb) and np.array_equal(fa.depth, fb.depth)
        assert np.array_equal(fa.gt_pose.matrix(), fb.gt_pose.matrix())
    assert all(np.array_equal(getattr(ga, n), getattr(gb, n)) for n in ga.params())
    again = np.clip(render_reference(ga, a.frames[0].gt_pose, a.intrinsics).color, 0, 1)
    assert np.array_equal(again, a.frames[0].rgb)
    assert ate_rmse(a.gt_trajectory(), a.gt_trajectory()) == pytest.approx(0.0, abs=1e-9)


def test_default_trajectory_diameter_is_the_arc_chord():
    ds, _ = generate_synthetic(0, SyntheticSpec(n_gaussians=1, width=8, height=8))
    assert trajectory_diameter([f.gt_pose for f in ds.frames]) == pytest.approx(3 * np.sqrt(3), abs=1e-9)


def traj(rng, n=20):
    return [(0.1 * k, random_pose(rng, 1.0, 2.0)) for k in range(n)]


def test_ate_examples_and_rigid_invariance():
    rng = np.random.default_rng(0)
    gt = traj(rng)
    assert ate_rmse(gt, gt) == pytest.approx(0.0, abs=1e-9)
    # pose' = pose @ G moves every camera centre by the same rigid motion
    G = random_pose(rng, 2.0, 5.0)
    moved = [(t, p @ G) for t, p in gt]
    assert ate_rmse(moved, gt) < 1e-9
    noisy = [(t, Pose(p.rotation, p.translation + rng.normal(0, 0.01, 3))) for t, p in gt]
    base = ate_rmse(noisy, gt)
    assert abs(ate_rmse([(t, p @ G) for t, p in noisy], gt) - base) < 1e-9


def test_ate_matches_brute_force_alignment():
    rng = np.random.default_rng(1)
    gt = traj(rng, 30)
    noisy = [(t, Pose(p.rotation, p.translation + rng.normal(0, 0.01, 3))) for t, p in gt]
    est = np.array([p.center() for _, p in noisy])
    ref = np.array([p.center() for _, p in gt])

    def residual(x):
        return (est @ Rotation.from_rotvec(x[:3]).as_matrix().T + x[3:] - ref).ravel()

    sol = least_squares(residual, np.zeros(6), xtol=1e-15, ftol=1e-15, gtol=1e-15)
    oracle = np.sqrt((sol.fun**2).sum() / len(ref)) * 100
    assert ate_rmse(noisy, gt) == pytest.approx(oracle, abs=1e-6)


def test_ate_needs_three_associations():
    rng = np.random.default_rng(2)
    gt = traj(rng, 5)
    shifted = [(t + 0.05, p) for t, p in gt]
    with pytest.raises(EvaluationError):
        ate_rmse(shifted, gt)
    with pytest.raises(EvaluationError):
        ate_rmse(gt[:2], gt)


def test_psnr_and_ssim_cases():
    rng = np.random.default_rng(3)
    a = rng.uniform(size=(16, 16, 3))
    assert psnr(a, a) == 100.0 and ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert psnr(np.full((4, 4, 3), 0.3), np.full((4, 4, 3), 0.4)) == pytest.approx(20.0, abs=1e-9)
    assert psnr(np.zeros((4, 4, 3)), np.ones((4, 4, 3))) == 0.0
    b = rng.uniform(size=(16, 16, 3))
    assert psnr(a, b) == psnr(b, a) and ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-14)
    assert 0.0 <= ssim(a, b) <= 1.0
    with pytest.raises(ContractViolation):
        psnr(a, b[:-1])


def test_trajectory_export_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    t = traj(rng, 10)
    export_trajectory(t, tmp_path / "t.txt")
    back = load_trajectory(tmp_path / "t.txt")
    for (ta, pa), (tb, pb) in zip(t, back):
        assert abs(ta - tb) < 1e-6
        assert np.abs(pa.matrix() - pb.matrix()).max() < 1e-5
    export_trajectory([], tmp_path / "e.txt")
    assert (tmp_path / "e.txt").read_text() == ""
    assert [float(v) for v in tum_line(2.5, Pose.identity()).split()] == [2.5, 0, 0, 0, 0, 0, 0, 1]
    line = tum_line(0.0, exp([0.3, -0.2, 0.1, 0.2, 0.1, -0.4]))
    assert all(len(v.split(".")[1]) == 6 for v in line.split())


def test_ply_layout_and_round_trip(tmp_path):
    gmap, pose, K = random_scene(np.random.default_rng(5), n=8)
    size = export_ply(gmap, tmp_path / "m.ply")
    raw = (tmp_path / "m.ply").read_bytes()
    header = raw[:raw.index(b"end_header\n") + len(b"end_header\n")]
    assert b"element vertex 8\n" in header
    assert size == len(raw) == ply_size(gmap) == len(header) + 15 * 4 * 8
    back = load_ply(tmp_path / "m.ply")
    assert np.abs(render(back, pose, K).color - render(gmap, pose, K).color).max() < 1e-6

    gmap.mask_logit[:] = 5.0
    from splatslam.compaction import discard_masks

    discard_masks(gmap)
    size = export_ply(gmap, tmp_path / "n.ply")
    raw = (tmp_path / "n.ply").read_bytes()
    header_len = raw.index(b"end_header\n") + len(b"end_header\n")
    assert b"property float mask" not in raw[:header_len]
    assert size == header_len + 14 * 4 * 8
    back = load_ply(tmp_path / "n.ply")
    assert back.masks_discarded
    assert np.abs(render(back, pose, K).color - render(gmap, pose, K).color).max() < 1e-6


def test_ply_rejects_other_files(tmp_path):
    (tmp_path / "x.ply").write_bytes(b"not a ply")
    with pytest.raises(DatasetError):
        load_ply(tmp_path / "x.ply")


def test_config_text_round_trip(tmp_path):
    cfg = RunConfig.from_text("seed = 3\nmask.lambda2 = 0  # off\nwindow.window_capacity = 5\n")
    assert cfg.seed == 3 and cfg.mask.lambda2 == 0.0 and cfg.window.window_capacity == 5
    assert cfg.mapping.seed == 3
    again = RunConfig.from_text(cfg.to_text())
    assert dict(again.items()) == dict(cfg.items())
    keys = dict(cfg.items())
    assert {"mask.epsilon", "window.info_threshold", "tracking.iterations", "mapping.random_history",
            "densify.interval", "dataset", "output_dir"} <= set(keys)


def test_config_errors(tmp_path):
    with pytest.raises(ValueError, match="line 2"):
        RunConfig.from_text("seed = 1\nmask.nope = 2\n")
    with pytest.raises(ValueError, match="line 1"):
        RunConfig.from_text("just words\n")
    with pytest.raises(ValueError):
        RunConfig.from_text("window.window_capacity = 1\n").validate()
    (tmp_path / "c.cfg").write_text("dataset_format = tum\ndataset = nowhere\n")
    with pytest.raises(FileNotFoundError):
        RunConfig.from_file(tmp_path / "c.cfg")


def test_cli_synth_eval_render(tmp_path, capsys):
    out = tmp_path / "seq"
    assert main(["synth", "--seed", "0", "--out", str(out)]) == 0
    ds = load_tum(out, CameraIntrinsics(60, 60, 31.5, 31.5, 64, 64))
    assert len(ds) == 60 and ds.has_gt()
    ref, _ = generate_synthetic(0)
    assert np.abs(ds.frame(7).depth - ref.frames[7].depth).max() <= 0.5 / 5000 + 1e-12
    capsys.readouterr()
    assert main(["eval", "--est", str(out / "groundtruth.txt"), "--gt", str(out / "groundtruth.txt")]) == 0
    assert json.loads(capsys.readouterr().out)["ate_rmse_cm"] == pytest.approx(0.0, abs=1e-6)
    png = tmp_path / "r.png"
    assert main(["render", "--map", str(out / "gt_map.ply"), "--pose", str(out / "groundtruth.txt"),
                 "--index", "3", "--out", str(png)]) == 0
    img = np.asarray(Image.open(png), dtype=float) / 255
    assert np.abs(img - ds.frame(3).rgb).max() <= 1.5 / 255


def test_run_report_schema(tmp_path):
    cfg = RunConfig.from_text(f"output_dir = {tmp_path / 'run'}\nmax_frames = 6\nmapping.iterations_per_update = 5\n"
                              "mapping.refinement_iterations = 5\nmapping.color_refinement_iterations = 2\n"
                              "tracking.iterations = 10\n")
    report = run_slam(cfg)
    for key in ("ate_rmse_cm", "psnr", "ssim", "gaussians", "ply_bytes", "fps", "keyframes",
                "information_keyframes", "frames", "lost_frames", "trajectory_diameter_m"):
        assert key in report.metrics, key
    assert report.metrics["frames"] == 6 and report.metrics["gaussians"] == len(report.gmap)
    out = report.output_dir
    for name in ("trajectory.txt", "map.ply", "metrics.json", "config.txt", "tracking.jsonl", "mapping.jsonl"):
        assert (out / name).exists(), name
    assert len(load_trajectory(out / "trajectory.txt")) == len(report.trajectory)
    assert (out / "map.ply").stat().st_size == report.metrics["ply_bytes"]
    assert sorted(p.name for p in (out / "renders").iterdir()) == [f"kf_{kf.index:05d}.png"
                                                                   for kf in report.info_keyframes]
