"""Command-line surface: simulate, train-csr, train-rec, infer, eval-csr, eval-sr.

Every command takes ``--config <json>`` plus flag overrides, echoes the
fully-resolved configuration into its output directory, and is reproducible
for a fixed seed. Exit codes: 0 success, 2 usage/config error, 3 data
error, 4 numerical abort. The ``L1BSR_SEED`` environment variable is the
seed fallback when neither flag nor config provides one.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from .errors import ConfigError, DataError, NumericalError
from .evaluation import evaluate_sr, registration_error_matrix
from .imagery import (BAND_NAMES, DatasetManifest, ManifestEntry,
                      flow_filename, load_raster, save_homographies,
                      save_raster, validate_multiband)
from .networks import CsrConfig, CsrNet, RecConfig, RecNet, load_model
from .simulation import SimulationParams, simulate_pair
from .training import PairDataset, TrainConfig, train_csr, train_rec

__all__ = ["main", "CliConfig"]


@dataclass
class SimulateSection:
    crop_size: int = 512
    split: str = "train"
    limit: int | None = None
    params: SimulationParams = field(default_factory=SimulationParams)

    def __post_init__(self):
        if self.crop_size % 2:
            raise ValueError("crop_size must be even")
        if self.split not in ("train", "test"):
            raise ValueError("split must be train or test")


@dataclass
class EvalSection:
    metric: str = "epe"  # epe | mae (per-component absolute error)
    align: bool = True
    bands: str = "bgrn"

    def __post_init__(self):
        if self.metric not in ("epe", "mae"):
            raise ValueError("metric must be epe or mae")


@dataclass
class PathsSection:
    hr_input_dir: str | None = None
    dataset: str | None = None
    out_dir: str | None = None
    checkpoint: str | None = None
    csr_checkpoint: str | None = None
    input: str | None = None
    output: str | None = None


@dataclass
class CliConfig:
    simulation: SimulateSection = field(default_factory=SimulateSection)
    csr: CsrConfig = field(default_factory=CsrConfig)
    rec: RecConfig = field(default_factory=RecConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    evaluation: EvalSection = field(default_factory=EvalSection)
    paths: PathsSection = field(default_factory=PathsSection)
    seed: int | None = None


def _apply_overrides(doc: dict, overrides: list[str]) -> dict:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        dotted, raw = item.split("=", 1)
        keys = dotted.split(".")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = doc
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set path {dotted!r} crosses a non-section key")
        node[keys[-1]] = value
    return doc


def _resolve_config(args) -> CliConfig:
    doc = cfgmod.load_json(args.config) if args.config else {}
    doc = _apply_overrides(doc, args.set or [])
    cfg = cfgmod.from_dict(CliConfig, doc)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if cfg.seed is None and os.environ.get("L1BSR_SEED"):
        try:
            cfg.seed = int(os.environ["L1BSR_SEED"])
        except ValueError as exc:
            raise ConfigError(f"L1BSR_SEED is not an integer: {exc}") from exc
    if cfg.seed is None:
        cfg.seed = 0
    cfg.training.seed = cfg.seed
    return cfg


def _path(cfg: CliConfig, args, name: str, required: bool = True) -> Path | None:
    value = getattr(args, name, None) or getattr(cfg.paths, name, None)
    if value is None and required:
        raise ConfigError(f"missing required path --{name.replace('_', '-')}")
    return Path(value) if value else None


def _echo_config(cfg: CliConfig, out_dir: Path) -> None:
    doc = cfgmod.to_dict(cfg)
    cfgmod.dump_json(out_dir / "config.json", doc)


# --------------------------------------------------------------------------
# simulate
# --------------------------------------------------------------------------

def _iter_tiles(raster: np.ndarray, crop: int):
    h, w = raster.shape[-2:]
    for y0 in range(0, h - crop + 1, crop):
        for x0 in range(0, w - crop + 1, crop):
            yield raster[..., y0:y0 + crop, x0:x0 + crop]


def cmd_simulate(cfg: CliConfig, args) -> int:
    in_dir = _path(cfg, args, "hr_input_dir")
    out_dir = _path(cfg, args, "out_dir")
    sect = cfg.simulation
    rasters = sorted(in_dir.glob("*.tif")) + sorted(in_dir.glob("*.tiff"))
    if not rasters:
        raise DataError(f"no TIFF rasters in {in_dir}")
    tiles = []
    for path in rasters:
        raster = load_raster(path)
        validate_multiband(raster)
        if min(raster.shape[-2:]) < sect.crop_size:
            raise DataError(f"{path} is smaller than crop size {sect.crop_size}")
        tiles.extend(_iter_tiles(raster, sect.crop_size))
    if sect.limit is not None:
        tiles = tiles[:sect.limit]

    pair_dir = out_dir / "pairs"
    entries = []

    def build(k: int):
        # per-pair derived seed: base seed XOR pair index
        rng = np.random.default_rng(cfg.seed ^ k)
        pair = simulate_pair(tiles[k], sect.params, rng)
        pid = f"p{k:05d}"
        pdir = pair_dir / pid
        save_raster(pdir / "I0.tif", pair.i0, "uint16")
        save_raster(pdir / "I1.tif", pair.i1, "uint16")
        save_raster(pdir / "hr0.tif", pair.gt_hr0, "float32")
        save_raster(pdir / "hr1.tif", pair.gt_hr1, "float32")
        flows = {}
        for band in BAND_NAMES:
            save_raster(pdir / flow_filename(band), pair.flows[band], "float32")
            flows[band] = f"pairs/{pid}/{flow_filename(band)}"
        save_homographies(pdir / "homographies.json", pair.homographies)
        return ManifestEntry(
            id=pid, i0=f"pairs/{pid}/I0.tif", i1=f"pairs/{pid}/I1.tif",
            flows=flows, hr=[f"pairs/{pid}/hr0.tif", f"pairs/{pid}/hr1.tif"])

    workers = max(getattr(args, "workers", 1) or 1, 1)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(build, range(len(tiles))))
    else:
        entries = [build(k) for k in range(len(tiles))]
    manifest = DatasetManifest(split=sect.split, seed=cfg.seed, entries=entries)
    manifest.save(out_dir)
    _echo_config(cfg, out_dir)
    print(f"simulate: wrote {len(entries)} pairs to {out_dir}")
    return 0


# --------------------------------------------------------------------------
# training commands
# --------------------------------------------------------------------------

def cmd_train_csr(cfg: CliConfig, args) -> int:
    dataset = PairDataset.open(_path(cfg, args, "dataset"))
    out_dir = _path(cfg, args, "out_dir")
    out_dir.mkdir(parents=True, exist_ok=True)
    _echo_config(cfg, out_dir)
    if args.supervised:
        cfg.training.phase1.supervised = True
    result = train_csr(dataset, cfg.training, cfg.csr, out_dir=out_dir,
                       resume=args.resume)
    print(f"train-csr: {result.steps} steps, best validation metric "
          f"{result.best_metric:.4f}; checkpoints in {out_dir}")
    return 0


def cmd_train_rec(cfg: CliConfig, args) -> int:
    dataset = PairDataset.open(_path(cfg, args, "dataset"))
    out_dir = _path(cfg, args, "out_dir")
    out_dir.mkdir(parents=True, exist_ok=True)
    _echo_config(cfg, out_dir)
    if args.supervised:
        cfg.training.phase2.loss = "supervised_l1"
    csr = None
    if cfg.training.phase2.loss != "supervised_l1":
        csr_path = _path(cfg, args, "csr_checkpoint")
        csr = load_model(csr_path)
        if not isinstance(csr, CsrNet):
            raise DataError(f"{csr_path} is not a CSR checkpoint")
    cfg.rec.bands = len(cfg.training.phase2.bands)
    result = train_rec(dataset, cfg.training, csr=csr, arch=cfg.rec,
                       out_dir=out_dir, resume=args.resume)
    print(f"train-rec: {result.steps} steps, best validation metric "
          f"{result.best_metric:.4f}; checkpoints in {out_dir}")
    return 0


# --------------------------------------------------------------------------
# inference
# --------------------------------------------------------------------------

def _preview_png(lr: np.ndarray, hr: np.ndarray, path: Path) -> None:
    from PIL import Image

    def to_rgb(img: np.ndarray) -> np.ndarray:
        if img.shape[0] >= 3:
            rgb = img[[2, 1, 0]]  # bands are (b, g, r, n)
        else:
            rgb = np.repeat(img[:1], 3, axis=0)
        arr = np.clip(rgb, 0, 1).transpose(1, 2, 0)
        return (arr * 255.0 + 0.5).astype(np.uint8)

    lr_up = np.repeat(np.repeat(lr, 2, axis=-1), 2, axis=-2)  # nearest x2
    panel = np.concatenate([to_rgb(lr_up), to_rgb(hr)], axis=1)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(panel).save(path)


def cmd_infer(cfg: CliConfig, args) -> int:
    model = load_model(_path(cfg, args, "checkpoint"))
    if not isinstance(model, RecNet):
        raise DataError("infer needs a reconstruction checkpoint")
    raster = load_raster(_path(cfg, args, "input"))
    validate_multiband(raster)
    bands = getattr(args, "bands", None) or cfg.evaluation.bands
    band_idx = [BAND_NAMES.index(b) for b in bands]
    if model.config.bands != len(band_idx):
        raise DataError(f"checkpoint expects {model.config.bands} bands, "
                        f"selection {bands!r} has {len(band_idx)}")
    model.eval()
    with torch.no_grad():
        pred = model(torch.from_numpy(raster[band_idx].copy())[None])
    hr = np.clip(pred[0].numpy(), 0.0, 1.0)
    out_path = _path(cfg, args, "output")
    save_raster(out_path, hr, args.bit_depth)
    if args.preview:
        _preview_png(raster[band_idx], hr, Path(args.preview))
    print(f"infer: wrote {tuple(hr.shape)} raster to {out_path}")
    return 0


# --------------------------------------------------------------------------
# evaluation commands
# --------------------------------------------------------------------------

def cmd_eval_csr(cfg: CliConfig, args) -> int:
    model = load_model(_path(cfg, args, "checkpoint"))
    if not isinstance(model, CsrNet):
        raise DataError("eval-csr needs a registration checkpoint")
    dataset = PairDataset.open(_path(cfg, args, "dataset"))
    model.eval()
    matrix = registration_error_matrix(model, dataset.pairs,
                                       metric=cfg.evaluation.metric)
    print("Cross-spectral registration error (pixels), "
          f"{matrix.count} pairs, metric={matrix.metric}")
    print(matrix.table())
    out = _path(cfg, args, "output", required=False)
    if out:
        cfgmod.dump_json(out, matrix.to_json())
        print(f"eval-csr: report written to {out}")
    return 0


def cmd_eval_sr(cfg: CliConfig, args) -> int:
    model = load_model(_path(cfg, args, "checkpoint"))
    if not isinstance(model, RecNet):
        raise DataError("eval-sr needs a reconstruction checkpoint")
    dataset = PairDataset.open(_path(cfg, args, "dataset"))
    bands = cfg.evaluation.bands
    if model.config.bands != len(bands):
        raise DataError(f"checkpoint expects {model.config.bands} bands, "
                        f"evaluation.bands={bands!r}")
    model.eval()
    report = evaluate_sr(model, dataset.pairs, bands=bands,
                         align=cfg.evaluation.align)
    print(f"Aligned per-band PSNR (dB) over {report.count} pairs")
    print(report.table())
    out = _path(cfg, args, "output", required=False)
    if out:
        cfgmod.dump_json(out, report.to_json())
        print(f"eval-sr: report written to {out}")
    return 0


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="l1bsr",
        description="Self-supervised x2 super-resolution and band alignment "
                    "for 4-band imagery.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="seed (overrides config and L1BSR_SEED)")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override one config key (JSON-parsed value)")
        p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("simulate", help="generate a synthetic misaligned-pair dataset")
    common(p)
    p.add_argument("--hr-input-dir", help="directory of 4-band HR TIFFs")
    p.add_argument("--out-dir", help="dataset output directory")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("train-csr", help="phase 1: train the registration network")
    common(p)
    p.add_argument("--dataset")
    p.add_argument("--out-dir")
    p.add_argument("--resume", help="resume from a training-state checkpoint")
    p.add_argument("--supervised", action="store_true",
                   help="use ground-truth flows instead of anchor-consistency")
    p.set_defaults(fn=cmd_train_csr)

    p = sub.add_parser("train-rec", help="phase 2: train the reconstruction network")
    common(p)
    p.add_argument("--dataset")
    p.add_argument("--out-dir")
    p.add_argument("--csr-checkpoint")
    p.add_argument("--resume")
    p.add_argument("--supervised", action="store_true",
                   help="L1 against HR ground truth instead of the self-SR loss")
    p.set_defaults(fn=cmd_train_rec)

    p = sub.add_parser("infer", help="super-resolve one raster")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--input")
    p.add_argument("--output")
    p.add_argument("--bands", help="band subset matching the checkpoint (default bgrn)")
    p.add_argument("--bit-depth", choices=("float32", "uint16"), default="float32")
    p.add_argument("--preview", help="write a side-by-side LR|HR PNG panel")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval-csr", help="registration error matrix on a test set")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--output", help="JSON report path")
    p.set_defaults(fn=cmd_eval_csr)

    p = sub.add_parser("eval-sr", help="aligned per-band PSNR on a test set")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--output", help="JSON report path")
    p.set_defaults(fn=cmd_eval_sr)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _resolve_config(args)
        return args.fn(cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
