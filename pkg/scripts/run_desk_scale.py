#!/usr/bin/env python3
"""End-to-end desk-scale experiment on one CPU box.

Generates procedural HR scenes, simulates a translation-only training set
and a test set, trains the registration network (anchor-consistency, 5k
iterations), evaluates the 4x4 registration error matrix, trains the
reconstruction network self-supervised (5k iterations) plus the G-only and
supervised-L1 ablations, and prints the aligned per-band PSNR comparison.

Roughly an hour of wall time with the tiny profile below.

    python scripts/run_desk_scale.py --work-dir runs/desk --seed 0
"""

import argparse
import json
import subprocess
import sys
from pathlib import Path


def run(cmd: list[str]) -> None:
    print("+", " ".join(str(c) for c in cmd), flush=True)
    subprocess.run([str(c) for c in cmd], check=True)


def desk_config(seed: int) -> dict:
    return {
        "seed": seed,
        "simulation": {
            "crop_size": 128,
            "params": {
                "scene_corner_range": 0.0,
                "scene_translation_range": 2.0,
                "band_translation_range": 2.0,
                "band_jitter_range": 0.0,
                "noise_std": 0.001,
            },
        },
        "csr": {"scales": 2, "base_width": 16},
        "rec": {"features": 16, "groups": 2, "blocks": 2, "reduction": 4},
        "training": {
            "phase1": {
                "batch_size": 8, "crop_size": 32, "learning_rate": 3e-4,
                "iterations": 5000, "val_pairs": 8, "val_interval": 500,
            },
            "phase2": {
                "batch_size": 4, "crop_size": 32, "learning_rate": 3e-4,
                "lr_decay": 0.6, "lr_decay_every": 2000, "iterations": 5000,
                "val_crop": 64, "val_pairs": 8, "val_interval": 500,
            },
            "checkpoint_interval": 1000,
        },
    }


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--work-dir", required=True)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    work = Path(args.work_dir)
    work.mkdir(parents=True, exist_ok=True)
    cfg_path = work / "desk_config.json"
    cfg_path.write_text(json.dumps(desk_config(args.seed), indent=2))

    py = [sys.executable, "-m", "l1bsr.cli"]
    hr_dir = work / "hr"
    run([sys.executable, "scripts/make_toy_hr.py", "--out-dir", hr_dir,
         "--count", "13", "--size", "512", "--seed", args.seed])

    train_ds = work / "dataset-train"
    test_ds = work / "dataset-test"
    run(py + ["simulate", "--config", cfg_path, "--hr-input-dir", hr_dir,
              "--out-dir", train_ds, "--set", "simulation.limit=200"])
    run(py + ["simulate", "--config", cfg_path, "--hr-input-dir", hr_dir,
              "--out-dir", test_ds, "--seed", str(args.seed + 9000),
              "--set", "simulation.split=test", "--set", "simulation.limit=12",
              "--set", "simulation.crop_size=256"])

    csr_dir = work / "csr"
    run(py + ["train-csr", "--config", cfg_path, "--dataset", train_ds,
              "--out-dir", csr_dir])
    run(py + ["eval-csr", "--config", cfg_path, "--checkpoint",
              csr_dir / "csr_best.ckpt", "--dataset", test_ds,
              "--output", work / "csr_report.json"])

    rec_dir = work / "rec-bgrn"
    run(py + ["train-rec", "--config", cfg_path, "--dataset", train_ds,
              "--csr-checkpoint", csr_dir / "csr_best.ckpt", "--out-dir", rec_dir])
    run(py + ["eval-sr", "--config", cfg_path, "--checkpoint",
              rec_dir / "rec_best.ckpt", "--dataset", test_ds,
              "--output", work / "sr_bgrn.json"])

    rec_g = work / "rec-g"
    run(py + ["train-rec", "--config", cfg_path, "--dataset", train_ds,
              "--csr-checkpoint", csr_dir / "csr_best.ckpt", "--out-dir", rec_g,
              "--set", "training.phase2.bands=g", "--set", "rec.bands=1"])
    run(py + ["eval-sr", "--config", cfg_path, "--checkpoint",
              rec_g / "rec_best.ckpt", "--dataset", test_ds,
              "--set", "evaluation.bands=g", "--output", work / "sr_g.json"])

    rec_sup = work / "rec-supervised"
    run(py + ["train-rec", "--config", cfg_path, "--dataset", train_ds,
              "--out-dir", rec_sup, "--supervised"])
    run(py + ["eval-sr", "--config", cfg_path, "--checkpoint",
              rec_sup / "rec_best.ckpt", "--dataset", test_ds,
              "--output", work / "sr_supervised.json"])

    print("\n=== summary ===")
    for name in ("csr_report", "sr_bgrn", "sr_g", "sr_supervised"):
        path = work / f"{name}.json"
        print(name, "->", path.read_text().strip())


if __name__ == "__main__":
    main()
