"""Two-phase training.

Phase 1 trains the registration network (CSR) with the anchor-consistency
loss; phase 2 trains the reconstruction network (REC) with the
self-supervised SR loss against the frozen CSR. Supervised baselines
(ground-truth flows for CSR, L1 to the HR ground truth for REC) share the
same loop and sampling.

Runs are deterministic for a fixed seed: all sampling randomness comes from
one numpy generator whose state is checkpointed, so resuming from a
checkpoint reproduces the uninterrupted run bit for bit.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import losses
from .errors import DataError, NumericalError
from .evaluation import registration_error_matrix
from .imagery import BAND_NAMES, DatasetManifest, GREEN
from .networks import (CsrConfig, CsrNet, RecConfig, RecNet,
                       gaussian_kernel_2d, init_csr, init_rec,
                       load_checkpoint, save_checkpoint, save_model)
from .simulation import gt_flow

__all__ = [
    "Phase1Config",
    "Phase2Config",
    "TrainConfig",
    "PairDataset",
    "sample_csr_example",
    "lr_at_step",
    "train_csr",
    "train_rec",
    "TrainResult",
]


@dataclass
class Phase1Config:
    """CSR training (anchor-consistency, or ground-truth flows when
    ``supervised``)."""

    batch_size: int = 64
    crop_size: int = 96
    learning_rate: float = 5e-5
    iterations: int = 200_000
    supervised: bool = False
    val_pairs: int = 8
    val_interval: int = 500
    log_interval: int = 50

    def __post_init__(self):
        if self.batch_size <= 0 or self.iterations <= 0 or self.learning_rate <= 0:
            raise ValueError("batch size, iterations and learning rate must be positive")


@dataclass
class Phase2Config:
    """REC training (self-SR loss, its deconvolving variant, or the
    supervised L1 baseline).

    ``bands`` selects the input/output spectral subset (e.g. "g" or "bgrn");
    the learning rate decays by ``lr_decay`` every ``lr_decay_every`` steps.
    """

    batch_size: int = 16
    crop_size: int = 96
    learning_rate: float = 5e-5
    lr_decay: float = 0.6
    lr_decay_every: int = 12_000
    iterations: int = 60_000
    val_crop: int = 256
    loss: str = "self_sr"  # self_sr | self_sr_deconv | supervised_l1
    blur_kernel_sigma: float = 0.7
    blur_kernel_size: int = 7
    bands: str = "bgrn"
    augment: bool = True
    val_pairs: int = 8
    val_interval: int = 500
    log_interval: int = 50

    def __post_init__(self):
        if self.batch_size <= 0 or self.iterations <= 0 or self.learning_rate <= 0:
            raise ValueError("batch size, iterations and learning rate must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must be in (0, 1]")
        if self.lr_decay_every <= 0:
            raise ValueError("lr_decay_every must be positive")
        if self.loss not in ("self_sr", "self_sr_deconv", "supervised_l1"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if not self.bands or any(b not in BAND_NAMES for b in self.bands):
            raise ValueError(f"bands must be a subset of 'bgrn', got {self.bands!r}")


@dataclass
class TrainConfig:
    phase1: Phase1Config = field(default_factory=Phase1Config)
    phase2: Phase2Config = field(default_factory=Phase2Config)
    seed: int = 0
    checkpoint_interval: int = 1000


def lr_at_step(base_lr: float, step: int, decay: float, every: int) -> float:
    """Schedule: ``base_lr * decay ** (step // every)``."""
    return base_lr * decay ** (step // every)


class PairDataset:
    """All pairs of a manifest split held in memory as float32 arrays.

    Desk-scale datasets are small; the arrays are the decoded TIFF values.
    """

    def __init__(self, manifest: DatasetManifest):
        self.manifest = manifest
        if not manifest.entries:
            raise DataError(f"dataset {manifest.root} has no pairs")
        self.pairs = [manifest.load_pair(e) for e in manifest.entries]

    def __len__(self):
        return len(self.pairs)

    @classmethod
    def open(cls, root) -> "PairDataset":
        return cls(DatasetManifest.load(root))

    @classmethod
    def from_pairs(cls, pairs: list[dict]) -> "PairDataset":
        """In-memory dataset from already-decoded pair dicts."""
        ds = cls.__new__(cls)
        ds.manifest = None
        if not pairs:
            raise DataError("no pairs")
        ds.pairs = pairs
        return ds

    def has_gt_flows(self) -> bool:
        return all("flows" in p for p in self.pairs)

    def has_gt_hr(self) -> bool:
        return all("hr" in p for p in self.pairs)

    def has_homographies(self) -> bool:
        return all("homographies" in p for p in self.pairs)


def sample_csr_example(pair: tuple[np.ndarray, np.ndarray],
                       rng: np.random.Generator):
    """Draw one anchor-consistency triple from an overlapping pair.

    Uniformly picks the reference/target order of the two images, the band i
    shared by reference and target, the anchor band j (i == j allowed) and
    the anchor side t. Returns (ref_band, anchor_band, tgt_band).
    """
    i0, i1 = pair
    if rng.integers(2):
        i0, i1 = i1, i0
    i = int(rng.integers(4))
    j = int(rng.integers(4))
    t = int(rng.integers(2))
    anchor = (i0 if t == 0 else i1)[j]
    return i0[i], anchor, i1[i]


def _augment(arrays: list[np.ndarray], code: tuple[int, int, int]) -> list[np.ndarray]:
    """Apply the same flip/flip/rot90 combination to every array (..., H, W)."""
    fh, fv, k = code
    out = []
    for a in arrays:
        if fh:
            a = a[..., :, ::-1]
        if fv:
            a = a[..., ::-1, :]
        if k:
            a = np.rot90(a, k, axes=(-2, -1))
        out.append(np.ascontiguousarray(a))
    return out


def _rng_state_to_json(rng: np.random.Generator) -> str:
    return json.dumps(rng.bit_generator.state)


def _rng_from_json(state: str) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = json.loads(state)
    return rng


@dataclass
class TrainResult:
    model: torch.nn.Module
    best_model: torch.nn.Module
    best_metric: float
    steps: int
    log_path: Path | None


class _Logger:
    def __init__(self, out_dir: Path | None):
        self.path = None
        self._fh = None
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            self.path = out_dir / "metrics.ndjson"
            self._fh = open(self.path, "a")
        self.t0 = time.monotonic()

    def write(self, step: int, loss: float, lr: float, split: str):
        if self._fh is None:
            return
        rec = {"step": step, "loss": loss, "lr": lr,
               "wall-time": round(time.monotonic() - self.t0, 3), "split": split}
        self._fh.write(json.dumps(rec) + "\n")
        self._fh.flush()

    def close(self):
        if self._fh is not None:
            self._fh.close()


def _adam_state_arrays(optimizer: torch.optim.Adam) -> dict[str, np.ndarray]:
    arrays = {}
    sd = optimizer.state_dict()
    for idx, state in sd["state"].items():
        for key, value in state.items():
            if isinstance(value, torch.Tensor):
                arrays[f"adam/{idx}/{key}"] = value.detach().numpy()
            else:
                arrays[f"adam/{idx}/{key}"] = np.asarray(value)
    return arrays


def _load_adam_state(optimizer: torch.optim.Adam, arrays: dict[str, np.ndarray]):
    state: dict[int, dict] = {}
    for key, value in arrays.items():
        if not key.startswith("adam/"):
            continue
        _, idx, name = key.split("/", 2)
        entry = state.setdefault(int(idx), {})
        entry[name] = torch.from_numpy(value.copy())
    if state:
        sd = optimizer.state_dict()
        sd["state"] = state
        optimizer.load_state_dict(sd)


class _TrainLoop:
    """Shared engine: batch factory + loss are supplied by each phase."""

    def __init__(self, model, cfg_seed: int, lr_fn, out_dir, resume,
                 iterations: int, checkpoint_interval: int,
                 val_interval: int, log_interval: int, tag: str):
        torch.manual_seed(cfg_seed)
        self.model = model
        self.lr_fn = lr_fn
        self.out_dir = Path(out_dir) if out_dir else None
        self.iterations = iterations
        self.checkpoint_interval = checkpoint_interval
        self.val_interval = val_interval
        self.log_interval = log_interval
        self.tag = tag
        self.optimizer = torch.optim.Adam(model.parameters(), lr=lr_fn(0))
        self.rng = np.random.default_rng(cfg_seed)
        self.start_step = 0
        self.best_metric = float("inf")
        self.best_state = {k: v.clone() for k, v in model.state_dict().items()}
        if resume is not None:
            self._restore(resume)

    def _restore(self, path):
        header, arrays = load_checkpoint(path)
        if header.get("tag") != self.tag:
            raise DataError(f"checkpoint {path} is a {header.get('tag')!r} state, "
                            f"expected {self.tag!r}")
        self.model.load_state_dict(
            {k[len("param/"):]: torch.from_numpy(v.copy())
             for k, v in arrays.items() if k.startswith("param/")})
        self.best_state = {k[len("best/"):]: torch.from_numpy(v.copy())
                           for k, v in arrays.items() if k.startswith("best/")}
        _load_adam_state(self.optimizer, arrays)
        self.rng = _rng_from_json(header["rng_state"])
        self.start_step = int(header["step"])
        self.best_metric = float(header["best_metric"])

    def _save_state(self, name: str, step: int):
        if self.out_dir is None:
            return
        arrays = {f"param/{k}": v.detach().numpy()
                  for k, v in self.model.state_dict().items()}
        arrays.update({f"best/{k}": v.detach().numpy()
                       for k, v in self.best_state.items()})
        arrays.update(_adam_state_arrays(self.optimizer))
        header = {"tag": self.tag, "step": step,
                  "best_metric": self.best_metric,
                  "rng_state": _rng_state_to_json(self.rng)}
        save_checkpoint(self.out_dir / name, header, arrays)

    def run(self, make_batch, compute_loss, validate) -> TrainResult:
        logger = _Logger(self.out_dir)
        step = self.start_step
        try:
            while step < self.iterations:
                lr = self.lr_fn(step)
                for group in self.optimizer.param_groups:
                    group["lr"] = lr
                batch = make_batch(self.rng)
                loss = compute_loss(batch)
                loss_value = float(loss.detach())
                if not np.isfinite(loss_value):
                    raise NumericalError(
                        f"{self.tag}: non-finite loss {loss_value} at step {step}")
                self.optimizer.zero_grad(set_to_none=True)
                loss.backward()
                self.optimizer.step()
                step += 1
                if step % self.log_interval == 0 or step == self.iterations:
                    logger.write(step, loss_value, lr, "train")
                if validate is not None and (
                        step % self.val_interval == 0 or step == self.iterations):
                    metric = validate(self.model)
                    logger.write(step, metric, lr, "val")
                    if metric < self.best_metric:
                        self.best_metric = metric
                        self.best_state = {k: v.clone()
                                           for k, v in self.model.state_dict().items()}
                        self._save_state("best_state.ckpt", step)
                if self.checkpoint_interval and step % self.checkpoint_interval == 0:
                    self._save_state("last_state.ckpt", step)
            self._save_state("last_state.ckpt", step)
        finally:
            logger.close()
        best_model = type(self.model)(self.model.config)
        best_model.load_state_dict(self.best_state if self.best_state
                                   else self.model.state_dict())
        return TrainResult(model=self.model, best_model=best_model,
                           best_metric=self.best_metric, steps=step,
                           log_path=logger.path)


def _split_train_val(dataset: PairDataset, val_pairs: int):
    n = len(dataset)
    n_val = min(val_pairs, max(n - 1, 0))
    train = dataset.pairs[:n - n_val] if n_val else dataset.pairs
    val = dataset.pairs[n - n_val:] if n_val else []
    return train, val


def _random_crop_coords(rng, shape: tuple[int, int], crop: int):
    h, w = shape
    if crop > h or crop > w:
        raise DataError(f"crop {crop} exceeds image {h}x{w}")
    y0 = int(rng.integers(h - crop + 1)) if h > crop else 0
    x0 = int(rng.integers(w - crop + 1)) if w > crop else 0
    return y0, x0


def train_csr(dataset: PairDataset, cfg: TrainConfig,
              arch: CsrConfig | None = None,
              out_dir=None, resume=None) -> TrainResult:
    """Phase 1: registration training.

    Self-supervised by default (anchor-consistency over random band/side
    choices); with ``cfg.phase1.supervised`` the loss is the L1 error to the
    ground-truth flows derived from the stored homographies.
    """
    p1 = cfg.phase1
    arch = arch or CsrConfig()
    if p1.crop_size % (2 ** (arch.scales - 1)):
        raise DataError(f"crop size {p1.crop_size} not divisible by {2 ** (arch.scales - 1)}")
    if p1.supervised and not dataset.has_homographies():
        raise DataError("supervised CSR training needs stored homographies")
    train_pairs, val_pairs = _split_train_val(dataset, p1.val_pairs)
    model = init_csr(cfg.seed, arch)

    def make_batch(rng):
        refs, anchors, tgts, gts = [], [], [], []
        for _ in range(p1.batch_size):
            pair = train_pairs[int(rng.integers(len(train_pairs)))]
            y0, x0 = _random_crop_coords(rng, pair["i0"].shape[-2:], p1.crop_size)
            sl = np.s_[..., y0:y0 + p1.crop_size, x0:x0 + p1.crop_size]
            c0, c1 = pair["i0"][sl], pair["i1"][sl]
            if p1.supervised:
                swap = int(rng.integers(2))
                i = int(rng.integers(4))
                j = int(rng.integers(4))
                ref_t, tgt_t = (1, 0) if swap else (0, 1)
                ref_img, tgt_img = (c1, c0) if swap else (c0, c1)
                full = gt_flow(pair["homographies"], BAND_NAMES[j],
                               pair["i0"].shape[-2:], ref_t=ref_t,
                               ref_band=BAND_NAMES[i], tgt_t=tgt_t)
                gts.append(full[:, y0:y0 + p1.crop_size, x0:x0 + p1.crop_size])
                refs.append(ref_img[i])
                tgts.append(tgt_img[j])
            else:
                ref, anchor, tgt = sample_csr_example((c0, c1), rng)
                refs.append(ref)
                anchors.append(anchor)
                tgts.append(tgt)
        to_t = lambda xs: torch.from_numpy(np.stack(xs))
        if p1.supervised:
            return to_t(refs), to_t(tgts), to_t(gts)
        return to_t(refs), to_t(anchors), to_t(tgts)

    def compute_loss(batch):
        if p1.supervised:
            refs, tgts, gts = batch
            return losses.supervised_flow_loss(model(refs, tgts), gts)
        refs, anchors, tgts = batch
        return losses.anchor_consistency_loss(model, refs, anchors, tgts)

    validate = None
    if val_pairs:
        val_has_flows = all("homographies" in p for p in val_pairs)

        def validate(m):
            m.eval()
            with torch.no_grad():
                if val_has_flows:
                    matrix = registration_error_matrix(m, val_pairs)
                    metric = float(matrix.errors.mean())
                else:
                    vals = []
                    vrng = np.random.default_rng(cfg.seed + 1)
                    for pair in val_pairs:
                        ref, anchor, tgt = sample_csr_example(
                            (pair["i0"], pair["i1"]), vrng)
                        vals.append(float(losses.anchor_consistency_loss(
                            m, torch.from_numpy(ref.copy())[None],
                            torch.from_numpy(anchor.copy())[None],
                            torch.from_numpy(tgt.copy())[None])))
                    metric = float(np.mean(vals))
            m.train()
            return metric

    loop = _TrainLoop(model, cfg.seed, lambda step: p1.learning_rate,
                      out_dir, resume, p1.iterations, cfg.checkpoint_interval,
                      p1.val_interval, p1.log_interval, tag="csr")
    result = loop.run(make_batch, compute_loss, validate)
    if out_dir is not None:
        save_model(Path(out_dir) / "csr_final.ckpt", result.model,
                   {"step": result.steps})
        save_model(Path(out_dir) / "csr_best.ckpt", result.best_model,
                   {"step": result.steps, "metric": result.best_metric})
    return result


def train_rec(dataset: PairDataset, cfg: TrainConfig,
              csr: CsrNet | None = None,
              arch: RecConfig | None = None,
              out_dir=None, resume=None) -> TrainResult:
    """Phase 2: reconstruction training against a frozen CSR.

    Per step: sample a pair, randomly choose reference/target, crop
    co-located windows, augment (same flips/90-degree rotations on both),
    compute one frozen-CSR flow from the reference green band to each
    target band, and minimize the configured loss. The supervised variant
    ignores the CSR and matches the reference's HR ground truth instead.
    """
    p2 = cfg.phase2
    band_idx = [BAND_NAMES.index(b) for b in p2.bands]
    green_pos = band_idx.index(GREEN) if GREEN in band_idx else None
    arch = arch or RecConfig()
    if arch.bands != len(band_idx):
        raise DataError(f"REC expects {arch.bands} bands but config selects {p2.bands!r}")
    supervised = p2.loss == "supervised_l1"
    if supervised and not dataset.has_gt_hr():
        raise DataError("supervised REC training needs HR ground truth")
    if not supervised:
        if csr is None:
            raise DataError("self-supervised REC training needs a trained CSR")
        if green_pos is None:
            raise DataError("self-supervised REC training needs the green band "
                            "(the flow reference) among the selected bands")
        csr_div = 2 ** (csr.config.scales - 1)
        if p2.crop_size % csr_div:
            raise DataError(f"crop size {p2.crop_size} not divisible by {csr_div}")
        csr.eval()
        for p in csr.parameters():
            p.requires_grad_(False)
    kernel = gaussian_kernel_2d(p2.blur_kernel_sigma, p2.blur_kernel_size)
    train_pairs, val_pairs = _split_train_val(dataset, p2.val_pairs)
    model = init_rec(cfg.seed, arch)

    def make_batch(rng):
        lr0s, lr1s, hrs = [], [], []
        for _ in range(p2.batch_size):
            pair = train_pairs[int(rng.integers(len(train_pairs)))]
            swap = int(rng.integers(2))
            y0, x0 = _random_crop_coords(rng, pair["i0"].shape[-2:], p2.crop_size)
            sl = np.s_[..., y0:y0 + p2.crop_size, x0:x0 + p2.crop_size]
            a, b = pair["i0"][sl], pair["i1"][sl]
            if swap:
                a, b = b, a
            arrays = [a[band_idx], b[band_idx]]
            if supervised:
                hr = pair["hr"][1 if swap else 0]
                arrays.append(hr[band_idx][..., 2 * y0:2 * (y0 + p2.crop_size),
                                           2 * x0:2 * (x0 + p2.crop_size)])
            if p2.augment:
                code = (int(rng.integers(2)), int(rng.integers(2)), int(rng.integers(4)))
                arrays = _augment(arrays, code)
            lr0s.append(arrays[0])
            lr1s.append(arrays[1])
            if supervised:
                hrs.append(arrays[2])
        to_t = lambda xs: torch.from_numpy(np.stack(xs))
        return (to_t(lr0s), to_t(hrs)) if supervised else (to_t(lr0s), to_t(lr1s))

    def compute_flows(ref_green: torch.Tensor, tgt: torch.Tensor) -> torch.Tensor:
        """Frozen-CSR flows from the reference green band to every target
        band; (B, C, 2, h, w), detached."""
        with torch.no_grad():
            flows = [csr(ref_green, tgt[:, c]) for c in range(tgt.shape[1])]
        return torch.stack(flows, dim=1)

    def compute_loss(batch):
        if supervised:
            lr0, hr = batch
            return losses.supervised_l1_loss(model(lr0), hr)
        lr0, lr1 = batch
        flows = compute_flows(lr0[:, green_pos], lr1)
        pred = model(lr0)
        if p2.loss == "self_sr_deconv":
            return losses.self_sr_deconv_loss(pred, lr1, flows, kernel)
        return losses.self_sr_loss(pred, lr1, flows)

    validate = None
    if val_pairs:
        def validate(m):
            m.eval()
            crop = min(p2.val_crop, *[min(p["i0"].shape[-2:]) for p in val_pairs])
            if not supervised:
                crop -= crop % (2 ** (csr.config.scales - 1))
            vals = []
            with torch.no_grad():
                for pair in val_pairs:
                    a = torch.from_numpy(pair["i0"][band_idx, :crop, :crop].copy())[None]
                    b = torch.from_numpy(pair["i1"][band_idx, :crop, :crop].copy())[None]
                    pred = m(a)
                    if supervised:
                        hr = torch.from_numpy(
                            pair["hr"][0][band_idx, :2 * crop, :2 * crop].copy())[None]
                        vals.append(float(losses.supervised_l1_loss(pred, hr)))
                    else:
                        flows = compute_flows(a[:, green_pos], b)
                        vals.append(float(losses.self_sr_loss(pred, b, flows)))
            m.train()
            return float(np.mean(vals))

    csr_checksum = None
    if not supervised:
        from .networks import state_checksum
        csr_checksum = state_checksum(csr)

    def lr_fn(step):
        return lr_at_step(p2.learning_rate, step, p2.lr_decay, p2.lr_decay_every)

    loop = _TrainLoop(model, cfg.seed, lr_fn, out_dir, resume,
                      p2.iterations, cfg.checkpoint_interval,
                      p2.val_interval, p2.log_interval, tag="rec")
    result = loop.run(make_batch, compute_loss, validate)
    if csr_checksum is not None:
        from .networks import state_checksum
        if state_checksum(csr) != csr_checksum:
            raise NumericalError("CSR parameters changed during REC training")
    if out_dir is not None:
        save_model(Path(out_dir) / "rec_final.ckpt", result.model,
                   {"step": result.steps, "bands": p2.bands})
        save_model(Path(out_dir) / "rec_best.ckpt", result.best_model,
                   {"step": result.steps, "metric": result.best_metric,
                    "bands": p2.bands})
    return result
