"""The two trainable models and their checkpoint container.

* :class:`CsrNet` — cross-spectral registration: a plain 4-scale U-Net that
  maps two normalized single-band images to a dense flow, output bounded to
  [-R, R] per component by a scaled tanh (R = 10 px).
* :class:`RecNet` — x2 reconstruction: residual channel-attention network
  (residual groups of RCAB blocks, squeeze-and-excitation attention with
  reduction 16, global skip, sub-pixel x2 upsampler), 64 feature channels.

Both are initialized with Xavier (uniform) weights from a seeded generator.
Checkpoints are deterministic ZIP containers holding a JSON header plus one
``.npy`` entry per tensor; they round-trip bit-exactly.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import DataError

__all__ = [
    "MOTION_RANGE",
    "CsrConfig",
    "RecConfig",
    "CsrNet",
    "RecNet",
    "normalize_band",
    "init_csr",
    "init_rec",
    "xavier_init_",
    "gaussian_kernel_2d",
    "save_checkpoint",
    "load_checkpoint",
    "save_model",
    "load_model",
    "state_checksum",
]

MOTION_RANGE = 10.0  # maximum |flow| component the CSR network can emit, px


@dataclass
class CsrConfig:
    scales: int = 4
    base_width: int = 32
    motion_range: float = MOTION_RANGE
    norm: str = "none"  # none | group (GroupNorm speeds up small-batch training)

    def __post_init__(self):
        if self.norm not in ("none", "group"):
            raise ValueError(f"norm must be 'none' or 'group', got {self.norm!r}")

    @property
    def divisor(self) -> int:
        return 2 ** (self.scales - 1)


@dataclass
class RecConfig:
    bands: int = 4
    features: int = 64
    groups: int = 10
    blocks: int = 20
    reduction: int = 16


def normalize_band(x):
    """Zero-mean unit-std normalization per band image: (x - mean) / max(std, 1e-6).

    Uses the population std; constant images map to zeros. Accepts (H, W),
    (B, H, W) or (B, C, H, W); statistics are taken over the spatial dims.
    """
    is_np = isinstance(x, np.ndarray)
    t = torch.as_tensor(x) if is_np else x
    t = t.float() if not t.is_floating_point() else t
    mean = t.mean(dim=(-2, -1), keepdim=True)
    std = t.std(dim=(-2, -1), keepdim=True, correction=0)
    out = (t - mean) / torch.clamp(std, min=1e-6)
    return out.numpy() if is_np else out


def gaussian_kernel_2d(sigma: float, size: int = 7) -> torch.Tensor:
    """Normalized 2D Gaussian kernel (default 7x7), suitable as the blur
    kernel of the deconvolving self-supervised loss."""
    if size % 2 == 0:
        raise ValueError("kernel size must be odd")
    r = size // 2
    xs = torch.arange(-r, r + 1, dtype=torch.float64)
    g = torch.exp(-0.5 * (xs / max(sigma, 1e-9)) ** 2) if sigma > 0 else (xs == 0).double()
    k = torch.outer(g, g)
    return (k / k.sum()).float()


def _conv(cin: int, cout: int) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 3, padding=1)


class _ConvBlock(nn.Module):
    def __init__(self, cin: int, cout: int, norm: str = "none"):
        super().__init__()
        self.conv1 = _conv(cin, cout)
        self.conv2 = _conv(cout, cout)
        if norm == "group":
            self.norm1 = nn.GroupNorm(min(8, cout), cout)
            self.norm2 = nn.GroupNorm(min(8, cout), cout)
        else:
            self.norm1 = nn.Identity()
            self.norm2 = nn.Identity()

    def forward(self, x):
        x = F.relu(self.norm1(self.conv1(x)))
        return F.relu(self.norm2(self.conv2(x)))


class CsrNet(nn.Module):
    """U-Net flow estimator between two bands of the same scene.

    ``forward(ref, tgt)`` returns the flow on ``tgt``'s grid pointing into
    ``ref``: ``x + F(x)`` is the position in ``ref`` of the scene point seen
    at ``tgt``'s pixel x, so ``pullback(ref, F)`` lands on ``tgt``'s frame.
    Inputs are normalized internally (mean/std per band image). Spatial
    dimensions must be divisible by ``2 ** (scales - 1)``.
    """

    def __init__(self, config: CsrConfig | None = None):
        super().__init__()
        self.config = config or CsrConfig()
        widths = [self.config.base_width * 2 ** s for s in range(self.config.scales)]
        self.encoders = nn.ModuleList()
        cin = 2
        for wid in widths:
            self.encoders.append(_ConvBlock(cin, wid, self.config.norm))
            cin = wid
        self.decoders = nn.ModuleList()
        for s in range(self.config.scales - 2, -1, -1):
            self.decoders.append(_ConvBlock(widths[s + 1] + widths[s], widths[s],
                                            self.config.norm))
        self.head = _conv(widths[0], 2)

    def forward(self, ref: torch.Tensor, tgt: torch.Tensor) -> torch.Tensor:
        if ref.shape != tgt.shape:
            raise ValueError(f"band shapes differ: {tuple(ref.shape)} vs {tuple(tgt.shape)}")
        squeeze = ref.dim() == 2
        if squeeze:
            ref, tgt = ref[None], tgt[None]
        h, w = ref.shape[-2:]
        d = self.config.divisor
        if h % d or w % d:
            raise ValueError(f"dimensions {h}x{w} must be divisible by {d}")
        x = torch.stack([normalize_band(ref), normalize_band(tgt)], dim=-3)
        lead = x.shape[:-3]
        x = x.reshape(-1, 2, h, w)
        skips = []
        for i, enc in enumerate(self.encoders):
            if i > 0:
                x = F.max_pool2d(x, 2)
            x = enc(x)
            skips.append(x)
        x = skips[-1]
        for dec, skip in zip(self.decoders, reversed(skips[:-1])):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = dec(torch.cat([x, skip], dim=1))
        flow = self.config.motion_range * torch.tanh(self.head(x))
        flow = flow.reshape(*lead, 2, h, w)
        return flow[0] if squeeze else flow


class _ChannelAttention(nn.Module):
    def __init__(self, features: int, reduction: int):
        super().__init__()
        squeezed = max(features // reduction, 1)
        self.down = nn.Conv2d(features, squeezed, 1)
        self.up = nn.Conv2d(squeezed, features, 1)

    def forward(self, x):
        w = F.adaptive_avg_pool2d(x, 1)
        w = torch.sigmoid(self.up(F.relu(self.down(w))))
        return x * w


class _RCAB(nn.Module):
    def __init__(self, features: int, reduction: int):
        super().__init__()
        self.conv1 = _conv(features, features)
        self.conv2 = _conv(features, features)
        self.attention = _ChannelAttention(features, reduction)

    def forward(self, x):
        res = self.conv2(F.relu(self.conv1(x)))
        return x + self.attention(res)


class _ResidualGroup(nn.Module):
    def __init__(self, features: int, blocks: int, reduction: int):
        super().__init__()
        self.blocks = nn.Sequential(*[_RCAB(features, reduction) for _ in range(blocks)])
        self.conv = _conv(features, features)

    def forward(self, x):
        return x + self.conv(self.blocks(x))


class RecNet(nn.Module):
    """Residual channel-attention x2 reconstruction network.

    Takes a (B, C, H, W) image with misaligned bands and returns the
    (B, C, 2H, 2W) reconstruction; once trained, all output bands are
    registered to the input's green band.
    """

    def __init__(self, config: RecConfig | None = None):
        super().__init__()
        self.config = config or RecConfig()
        c = self.config
        self.head = _conv(c.bands, c.features)
        self.body = nn.Sequential(
            *[_ResidualGroup(c.features, c.blocks, c.reduction) for _ in range(c.groups)])
        self.body_conv = _conv(c.features, c.features)
        self.upsample = _conv(c.features, 4 * c.features)
        self.tail = _conv(c.features, c.bands)

    def forward(self, lr: torch.Tensor) -> torch.Tensor:
        squeeze = lr.dim() == 3
        if squeeze:
            lr = lr[None]
        if lr.dim() != 4 or lr.shape[1] != self.config.bands:
            raise ValueError(
                f"expected (B, {self.config.bands}, H, W) input, got {tuple(lr.shape)}")
        if lr.shape[-2] < 16 or lr.shape[-1] < 16:
            raise ValueError("input spatial dimensions must be >= 16")
        feats = self.head(lr)
        x = feats + self.body_conv(self.body(feats))
        x = F.pixel_shuffle(self.upsample(x), 2)
        out = self.tail(x)
        return out[0] if squeeze else out


def xavier_init_(module: nn.Module, generator: torch.Generator) -> nn.Module:
    """Seeded Xavier-uniform init of every conv weight; biases to zero."""
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                fan_out = m.out_channels * m.kernel_size[0] * m.kernel_size[1]
                bound = float(np.sqrt(6.0 / (fan_in + fan_out)))
                m.weight.uniform_(-bound, bound, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()
    return module


def init_csr(seed: int, config: CsrConfig | None = None) -> CsrNet:
    gen = torch.Generator().manual_seed(seed)
    return xavier_init_(CsrNet(config), gen)


def init_rec(seed: int, config: RecConfig | None = None) -> RecNet:
    gen = torch.Generator().manual_seed(seed)
    return xavier_init_(RecNet(config), gen)


# --------------------------------------------------------------------------
# Checkpoints: deterministic ZIP of header.json + <key>.npy entries.
# --------------------------------------------------------------------------

_EPOCH = (1980, 1, 1, 0, 0, 0)  # fixed zip timestamp => byte-identical files


def save_checkpoint(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo("header.json", date_time=_EPOCH)
        zf.writestr(info, json.dumps(header, indent=2, sort_keys=True))
        for key in sorted(arrays):
            buf = io.BytesIO()
            np.save(buf, np.ascontiguousarray(arrays[key]))
            zf.writestr(zipfile.ZipInfo(f"{key}.npy", date_time=_EPOCH), buf.getvalue())


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no checkpoint at {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            header = json.loads(zf.read("header.json"))
            arrays = {}
            for name in zf.namelist():
                if name.endswith(".npy"):
                    arrays[name[:-4]] = np.load(io.BytesIO(zf.read(name)))
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError, ValueError) as exc:
        raise DataError(f"bad checkpoint {path}: {exc}") from exc
    return header, arrays


def save_model(path, model: nn.Module, extra_header: dict | None = None) -> None:
    """Persist a CsrNet or RecNet with its architecture hyperparameters."""
    if isinstance(model, CsrNet):
        header = {"kind": "csr", "arch": asdict(model.config)}
    elif isinstance(model, RecNet):
        header = {"kind": "rec", "arch": asdict(model.config)}
    else:
        raise ValueError(f"cannot checkpoint {type(model).__name__}")
    header.update(extra_header or {})
    arrays = {f"param/{k}": v.detach().numpy() for k, v in model.state_dict().items()}
    save_checkpoint(path, header, arrays)


def load_model(path) -> nn.Module:
    header, arrays = load_checkpoint(path)
    kind = header.get("kind")
    if kind == "csr":
        model = CsrNet(CsrConfig(**header["arch"]))
    elif kind == "rec":
        model = RecNet(RecConfig(**header["arch"]))
    else:
        raise DataError(f"checkpoint {path} has unknown kind {kind!r}")
    state = {k[len("param/"):]: torch.from_numpy(v.copy())
             for k, v in arrays.items() if k.startswith("param/")}
    model.load_state_dict(state)
    return model


def state_checksum(model: nn.Module) -> str:
    """Stable hex digest of all parameters (used by determinism checks)."""
    import hashlib
    digest = hashlib.sha256()
    for key in sorted(dict(model.state_dict())):
        digest.update(key.encode())
        digest.update(model.state_dict()[key].detach().numpy().tobytes())
    return digest.hexdigest()
