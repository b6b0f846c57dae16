"""Differentiable warping, subsampling and flow algebra.

Conventions used throughout the package:

* Images are channel-first arrays ``(..., H, W)``; flow fields are
  ``(..., 2, H, W)`` with plane 0 = dx (column displacement) and
  plane 1 = dy (row displacement), in pixels of the flow's own grid.
* Pixel centers sit at integer coordinates; the x2 HR grid relates to the
  LR grid by ``hr_pos = 2 * lr_pos`` (decimation phase (0, 0)).
* A flow F between a reference image and a target image lives on the
  target's grid and points into the reference: ``pullback(ref, F)`` is the
  reference content resampled onto the target's frame.
* Out-of-domain sample coordinates are edge-clamped (replicated border).
* Image sampling is bicubic (Catmull-Rom, a = -0.5); flow fields are
  resampled bilinearly (they are smooth, bilinear is cheaper).

All public functions accept numpy arrays or torch tensors. Torch inputs
keep autograd intact; numpy inputs return numpy arrays.
"""

from __future__ import annotations

import numpy as np
import torch

__all__ = [
    "bicubic_sample",
    "bilinear_sample",
    "pullback",
    "subsample",
    "upsample_flow",
    "warp_and_downsample",
    "compose_flows",
    "identity_homography",
    "translation_homography",
    "homography_from_corner_shift",
    "invert_homography",
    "apply_homography_to_points",
    "homography_to_flow",
    "apply_homography",
    "LOSS_BORDER_LR",
    "LOSS_BORDER_HR",
]

# Losses and metrics exclude this many border pixels to keep edge-clamp
# artifacts out of every objective (8 px on the x2 HR grid).
LOSS_BORDER_LR = 4
LOSS_BORDER_HR = 8


def _wants_numpy(*arrays) -> bool:
    return not any(isinstance(a, torch.Tensor) for a in arrays)


def _to_tensor(a, like: torch.Tensor | None = None) -> torch.Tensor:
    if isinstance(a, torch.Tensor):
        return a
    t = torch.as_tensor(np.ascontiguousarray(a))
    if like is not None and t.dtype != like.dtype and t.is_floating_point():
        t = t.to(like.dtype)
    return t


def _flatten_batch(img: torch.Tensor) -> tuple[torch.Tensor, tuple]:
    """Collapse leading dims of (..., H, W) into one channel axis."""
    lead = img.shape[:-2]
    h, w = img.shape[-2:]
    return img.reshape(1, -1, h, w) if lead else img.reshape(1, 1, h, w), lead


def _gather2d(src: torch.Tensor, ix: torch.Tensor, iy: torch.Tensor) -> torch.Tensor:
    """src: (B, C, H, W); ix/iy: (B, C, h, w) integer indices -> (B, C, h, w)."""
    b, c, h, w = src.shape
    flat = src.reshape(b, c, h * w)
    idx = (iy * w + ix).reshape(b, c, -1)
    return torch.gather(flat, 2, idx).reshape(ix.shape)


def _prep_coords(src: torch.Tensor, xs, ys):
    """Broadcast sampling coordinates against (B, C, h, w) and clamp them."""
    b, c, h, w = src.shape
    xs = _to_tensor(xs, src).to(src.dtype)
    ys = _to_tensor(ys, src).to(src.dtype)
    while xs.dim() < 4:
        xs = xs.unsqueeze(0)
        ys = ys.unsqueeze(0)
    xs = xs.expand(b, c, *xs.shape[-2:])
    ys = ys.expand(b, c, *ys.shape[-2:])
    xs = xs.clamp(0.0, float(w - 1))
    ys = ys.clamp(0.0, float(h - 1))
    return xs, ys


def _bicubic_weights(t: torch.Tensor):
    # Catmull-Rom (a = -0.5); weights sum to 1 by construction.
    t2 = t * t
    t3 = t2 * t
    wm1 = (-t3 + 2.0 * t2 - t) * 0.5
    w0 = (3.0 * t3 - 5.0 * t2 + 2.0) * 0.5
    w1 = (-3.0 * t3 + 4.0 * t2 + t) * 0.5
    w2 = 1.0 - (wm1 + w0 + w1)
    return wm1, w0, w1, w2


def _bicubic_sample_t(src: torch.Tensor, xs: torch.Tensor, ys: torch.Tensor) -> torch.Tensor:
    b, c, h, w = src.shape
    xs, ys = _prep_coords(src, xs, ys)
    x0 = torch.floor(xs)
    y0 = torch.floor(ys)
    tx = xs - x0
    ty = ys - y0
    x0 = x0.long()
    y0 = y0.long()
    wxs = _bicubic_weights(tx)
    wys = _bicubic_weights(ty)
    rows = []
    for dy, wy in zip((-1, 0, 1, 2), wys):
        iy = (y0 + dy).clamp(0, h - 1)
        row = 0.0
        for dx, wx in zip((-1, 0, 1, 2), wxs):
            ix = (x0 + dx).clamp(0, w - 1)
            row = row + wx * _gather2d(src, ix, iy)
        rows.append(wy * row)
    return rows[0] + rows[1] + rows[2] + rows[3]


def _bilinear_sample_t(src: torch.Tensor, xs: torch.Tensor, ys: torch.Tensor) -> torch.Tensor:
    b, c, h, w = src.shape
    xs, ys = _prep_coords(src, xs, ys)
    x0 = torch.floor(xs)
    y0 = torch.floor(ys)
    tx = xs - x0
    ty = ys - y0
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(0, w - 1)
    y1 = (y0 + 1).clamp(0, h - 1)
    v00 = _gather2d(src, x0, y0)
    v01 = _gather2d(src, x1, y0)
    v10 = _gather2d(src, x0, y1)
    v11 = _gather2d(src, x1, y1)
    top = v00 + tx * (v01 - v00)
    bot = v10 + tx * (v11 - v10)
    return top + ty * (bot - top)


def _sample(src, xs, ys, kernel) -> torch.Tensor | np.ndarray:
    to_np = _wants_numpy(src, xs, ys)
    src_t = _to_tensor(src)
    if not src_t.is_floating_point():
        src_t = src_t.double()
    img, lead = _flatten_batch(src_t)
    fn = _bicubic_sample_t if kernel == "bicubic" else _bilinear_sample_t
    xs_t = _to_tensor(xs, img)
    out = fn(img, xs_t, _to_tensor(ys, img))
    out = out.reshape(*lead, *out.shape[-2:])
    return out.numpy() if to_np else out


def bicubic_sample(src, xs, ys):
    """Sample ``src`` at continuous coordinates (Catmull-Rom bicubic).

    src: (..., H, W); xs, ys: (h, w) coordinate grids (x = column, y = row).
    Coordinates are edge-clamped to the image domain.
    """
    return _sample(src, xs, ys, "bicubic")


def bilinear_sample(src, xs, ys):
    """Bilinear counterpart of :func:`bicubic_sample` (used for flow fields)."""
    return _sample(src, xs, ys, "bilinear")


def _grid(h: int, w: int, dtype, device):
    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=dtype, device=device),
        torch.arange(w, dtype=dtype, device=device),
        indexing="ij",
    )
    return xs, ys


def _pair_image_and_flow(src_t: torch.Tensor, flow_t: torch.Tensor):
    """Align src leading dims with flow leading dims.

    Supported pairings (H, W spatial):
      * flow (2, h, w): one field shared by every image/channel;
      * flow lead == src lead: one field per leading element;
      * flow lead == src lead[:-1]: one field per batch element, shared
        across the channel axis.
    Returns (img4d (B, C, H, W), dx (B, 1|C, h, w), dy, out_lead).
    """
    if flow_t.shape[-3] != 2:
        raise ValueError(f"flow must have 2 components, got shape {tuple(flow_t.shape)}")
    src_lead = src_t.shape[:-2]
    flow_lead = flow_t.shape[:-3]
    h, w = src_t.shape[-2:]
    fh, fw = flow_t.shape[-2:]
    f = flow_t.reshape(-1, 2, fh, fw)
    dx, dy = f[:, 0:1], f[:, 1:2]
    if flow_lead == ():
        img = src_t.reshape(1, -1, h, w)
    elif flow_lead == src_lead:
        img = src_t.reshape(-1, 1, h, w)
    elif flow_lead == src_lead[:-1]:
        img = src_t.reshape(-1, src_lead[-1], h, w)
    else:
        raise ValueError(
            f"cannot pair image {tuple(src_t.shape)} with flow {tuple(flow_t.shape)}")
    return img, dx, dy, src_lead


def pullback(src, flow):
    """Backward warp: ``out(x) = src(x + flow(x))`` with bicubic sampling.

    ``src`` is (..., H, W) and ``flow`` (..., 2, H, W); a (2, H, W) flow is
    shared across all leading dims, a flow whose leading dims equal src's is
    applied element-wise (e.g. per-channel fields), and a (B, 2, H, W) flow
    against a (B, C, H, W) image is shared across channels only.
    """
    to_np = _wants_numpy(src, flow)
    src_t = _to_tensor(src)
    if not src_t.is_floating_point():
        src_t = src_t.double()
    flow_t = _to_tensor(flow, src_t).to(src_t.dtype)
    if flow_t.shape[-2:] != src_t.shape[-2:]:
        raise ValueError(
            f"flow grid {tuple(flow_t.shape[-2:])} does not match image "
            f"{tuple(src_t.shape[-2:])}")
    img, dx, dy, lead = _pair_image_and_flow(src_t, flow_t)
    h, w = img.shape[-2:]
    gx, gy = _grid(h, w, img.dtype, img.device)
    out = _bicubic_sample_t(img, gx + dx, gy + dy)
    out = out.reshape(*lead, h, w)
    return out.numpy() if to_np else out


def subsample(src, factor: int = 2, phase: tuple[int, int] = (0, 0)):
    """Decimate: ``out(x) = src(factor * x + phase)``. No prefilter."""
    to_np = _wants_numpy(src)
    src_t = _to_tensor(src)
    h, w = src_t.shape[-2:]
    if h % factor or w % factor:
        raise ValueError(f"dimensions {h}x{w} not divisible by {factor}")
    py, px = phase[1], phase[0]
    out = src_t[..., py::factor, px::factor]
    return out.numpy() if to_np else out


def upsample_flow(flow, factor: int = 2):
    """Upsample a flow field spatially and scale its values by ``factor``.

    Output site ``y`` samples the input bilinearly at ``y / factor``, so
    decimated sites carry exactly ``factor * flow`` (see warp_and_downsample).
    """
    to_np = _wants_numpy(flow)
    flow_t = _to_tensor(flow)
    if not flow_t.is_floating_point():
        flow_t = flow_t.double()
    h, w = flow_t.shape[-2:]
    gx, gy = _grid(h * factor, w * factor, flow_t.dtype, flow_t.device)
    up = _sample(flow_t, gx / factor, gy / factor, "bilinear") * factor
    return up.numpy() if to_np else up


def warp_and_downsample(hr, lr_flow):
    """Fused warp of an HR image by an LR flow plus x2 decimation.

    ``out(x) = hr(2x + 2 * lr_flow(x))`` with bicubic sampling; equivalent to
    ``subsample(pullback(hr, upsample_flow(lr_flow)))`` at the decimated
    sites. ``hr`` must be exactly twice the flow grid in both dimensions.
    ``lr_flow`` may be (2, h, w), (B, 2, h, w) or per-channel (B, C, 2, h, w).
    """
    to_np = _wants_numpy(hr, lr_flow)
    hr_t = _to_tensor(hr)
    if not hr_t.is_floating_point():
        hr_t = hr_t.double()
    flow_t = _to_tensor(lr_flow, hr_t).to(hr_t.dtype)
    hh, hw = hr_t.shape[-2:]
    fh, fw = flow_t.shape[-2:]
    if (hh, hw) != (2 * fh, 2 * fw):
        raise ValueError(f"hr {hh}x{hw} is not twice the flow grid {fh}x{fw}")
    img, dx, dy, lead = _pair_image_and_flow(hr_t, flow_t)
    gx, gy = _grid(fh, fw, img.dtype, img.device)
    out = _bicubic_sample_t(img, 2.0 * (gx + dx), 2.0 * (gy + dy))
    out = out.reshape(*lead, fh, fw)
    return out.numpy() if to_np else out


def compose_flows(f_ab, f_bc):
    """Chain two flows: ``out(x) = f_ab(x) + f_bc(x + f_ab(x))``.

    ``f_bc`` is resampled bilinearly at the displaced positions. With
    f_ab mapping a target grid into an anchor frame and f_bc mapping the
    anchor into a reference frame, the result maps target into reference.
    """
    to_np = _wants_numpy(f_ab, f_bc)
    a = _to_tensor(f_ab)
    if not a.is_floating_point():
        a = a.double()
    b = _to_tensor(f_bc, a).to(a.dtype)
    if a.shape != b.shape:
        raise ValueError(f"flow shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.shape[-3] != 2:
        raise ValueError(f"flow must have 2 components, got shape {tuple(a.shape)}")
    h, w = a.shape[-2:]
    a4 = a.reshape(-1, 2, h, w)
    b4 = b.reshape(-1, 2, h, w)
    gx, gy = _grid(h, w, a.dtype, a.device)
    xs = gx + a4[:, 0:1]
    ys = gy + a4[:, 1:2]
    out = a4 + _bilinear_sample_t(b4, xs, ys)
    out = out.reshape(a.shape)
    return out.numpy() if to_np else out


# --------------------------------------------------------------------------
# Homographies (3x3 numpy matrices acting on pixel coordinates (x, y)).
# A homography is used as the backward map of a resampling: the output
# pixel x samples the source at H(x), so homography_to_flow(H) = H(x) - x
# feeds straight into pullback.
# --------------------------------------------------------------------------

def identity_homography() -> np.ndarray:
    return np.eye(3, dtype=np.float64)


def translation_homography(tx: float, ty: float) -> np.ndarray:
    h = np.eye(3, dtype=np.float64)
    h[0, 2] = tx
    h[1, 2] = ty
    return h


def _normalize_homography(h: np.ndarray) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (3, 3):
        raise ValueError(f"homography must be 3x3, got {h.shape}")
    if abs(h[2, 2]) < 1e-12:
        raise ValueError("homography has vanishing scale entry")
    return h / h[2, 2]


def invert_homography(h: np.ndarray) -> np.ndarray:
    h = _normalize_homography(h)
    if abs(np.linalg.det(h)) < 1e-10:
        raise ValueError("homography is near-singular")
    return _normalize_homography(np.linalg.inv(h))


def homography_from_corner_shift(corners: np.ndarray, shifts: np.ndarray) -> np.ndarray:
    """DLT from 4 point pairs: maps ``corners`` to ``corners + shifts``."""
    corners = np.asarray(corners, dtype=np.float64)
    shifts = np.asarray(shifts, dtype=np.float64)
    if corners.shape != (4, 2) or shifts.shape != (4, 2):
        raise ValueError("need 4 corners and 4 shifts")
    dst = corners + shifts
    rows = []
    for (x, y), (u, v) in zip(corners, dst):
        rows.append([x, y, 1, 0, 0, 0, -u * x, -u * y, -u])
        rows.append([0, 0, 0, x, y, 1, -v * x, -v * y, -v])
    a = np.asarray(rows)
    _, _, vt = np.linalg.svd(a)
    return _normalize_homography(vt[-1].reshape(3, 3))


def apply_homography_to_points(h: np.ndarray, xs, ys):
    """Map coordinate arrays through a homography; returns (xs', ys')."""
    h = _normalize_homography(h)
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    denom = h[2, 0] * xs + h[2, 1] * ys + h[2, 2]
    if np.any(np.abs(denom) < 1e-9):
        raise ValueError("homography maps points to infinity inside the domain")
    xp = (h[0, 0] * xs + h[0, 1] * ys + h[0, 2]) / denom
    yp = (h[1, 0] * xs + h[1, 1] * ys + h[1, 2]) / denom
    return xp, yp


def homography_to_flow(h: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Dense flow ``F(x) = H(x) - x`` on a (height, width) grid.

    Satisfies ``pullback(src, homography_to_flow(H)) ~= apply_homography(src, H)``.
    """
    hh, ww = shape
    ys, xs = np.meshgrid(np.arange(hh, dtype=np.float64),
                         np.arange(ww, dtype=np.float64), indexing="ij")
    xp, yp = apply_homography_to_points(h, xs, ys)
    return np.stack([xp - xs, yp - ys]).astype(np.float64)


def apply_homography(src, h: np.ndarray):
    """Resample ``src`` under the backward map H: ``out(x) = src(H(x))``."""
    h = _normalize_homography(h)
    if abs(np.linalg.det(h)) < 1e-10:
        raise ValueError("homography is near-singular")
    to_np = _wants_numpy(src)
    src_t = _to_tensor(src)
    if not src_t.is_floating_point():
        src_t = src_t.double()
    hh, ww = src_t.shape[-2:]
    ys, xs = np.meshgrid(np.arange(hh, dtype=np.float64),
                         np.arange(ww, dtype=np.float64), indexing="ij")
    xp, yp = apply_homography_to_points(h, xs, ys)
    out = bicubic_sample(src_t, torch.as_tensor(xp, dtype=src_t.dtype),
                         torch.as_tensor(yp, dtype=src_t.dtype))
    return out.numpy() if to_np else out
