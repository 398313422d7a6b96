"""Mask-loss ablation: the synthetic pipeline with and without the mask term.

    python3 scripts/mask_ablation.py [--lambda2 5e-4] [--out runs/ablation]

Writes ``ablation.json`` with Gaussian counts, PSNR and PLY sizes of both runs.
"""

import argparse
import json
from pathlib import Path

from splatslam.config import RunConfig
from splatslam.system import run_slam

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "synthetic.cfg"


def run(lambda2, out):
    cfg = RunConfig.from_file(CONFIG, output_dir=str(out), **{"mask.lambda2": lambda2})
    m = run_slam(cfg).metrics
    return {k: m[k] for k in ("gaussians", "psnr", "ssim", "ply_bytes", "ate_rmse_cm")}


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--lambda2", type=float, default=5e-4)
    parser.add_argument("--out", default="runs/ablation")
    args = parser.parse_args()
    out = Path(args.out)
    rows = {"masked": run(args.lambda2, out / "masked"), "unmasked": run(0.0, out / "unmasked")}
    a, b = rows["masked"], rows["unmasked"]
    rows["fewer_gaussians"] = 1 - a["gaussians"] / b["gaussians"]
    rows["psnr_change_db"] = a["psnr"] - b["psnr"]
    (out / "ablation.json").write_text(json.dumps(rows, indent=2) + "\n")
    print(json.dumps(rows, indent=2))


if __name__ == "__main__":
    main()
