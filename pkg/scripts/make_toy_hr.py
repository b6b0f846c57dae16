#!/usr/bin/env python3
"""Generate procedural 4-band HR scenes to feed the `simulate` command.

Example:
    python scripts/make_toy_hr.py --out-dir data/hr --count 4 --size 512 --seed 7
"""

import argparse
from pathlib import Path

import numpy as np

from l1bsr.imagery import save_raster
from l1bsr.simulation import synthetic_scene


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out-dir", required=True)
    ap.add_argument("--count", type=int, default=4)
    ap.add_argument("--size", type=int, default=512)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for k in range(args.count):
        rng = np.random.default_rng(args.seed + k)
        scene = synthetic_scene(rng, args.size, args.size)
        save_raster(out / f"scene_{k:03d}.tif", scene.astype(np.float32), "float32")
        print(f"wrote {out / f'scene_{k:03d}.tif'}")


if __name__ == "__main__":
    main()
