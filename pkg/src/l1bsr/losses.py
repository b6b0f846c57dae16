"""Training objectives.

Self-supervised:

* :func:`self_sr_loss` — warp the x2 prediction per band by the LR flows
  that map the second observation onto the reference's green frame,
  decimate, and take the L1 difference against the second observation.
* :func:`self_sr_deconv_loss` — same, with the prediction convolved by a
  normalized blur kernel first (trains a deconvolved, sharper output).
* :func:`anchor_consistency_loss` — registration self-supervision: the
  two-step flow through an anchor band, composed, must align two same-band
  images directly.

Supervised baselines: :func:`supervised_flow_loss` (L1 to ground-truth
flows) and :func:`supervised_l1_loss` (L1 to the HR ground truth).

All losses are means over an interior domain (a 4 px LR / 8 px HR border is
excluded to keep warp edge-clamp artifacts out), are >= 0, vanish only on
exact matches over that domain, and are differentiable end to end.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .geometry import (LOSS_BORDER_HR, LOSS_BORDER_LR, compose_flows,
                       pullback, warp_and_downsample)

__all__ = [
    "interior",
    "masked_l1",
    "self_sr_loss",
    "self_sr_deconv_loss",
    "anchor_consistency_loss",
    "supervised_flow_loss",
    "supervised_l1_loss",
]


def interior(x: torch.Tensor, border: int) -> torch.Tensor:
    """Crop ``border`` pixels from every spatial edge (no-op if border=0)."""
    if border == 0:
        return x
    if x.shape[-1] <= 2 * border or x.shape[-2] <= 2 * border:
        raise ValueError(f"image {tuple(x.shape[-2:])} too small for border {border}")
    return x[..., border:-border, border:-border]


def masked_l1(a: torch.Tensor, b: torch.Tensor, border: int) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return interior(a - b, border).abs().mean()


def _check_sr_shapes(hr_pred: torch.Tensor, target: torch.Tensor, flows: torch.Tensor):
    if hr_pred.shape[:-2] != target.shape[:-2]:
        raise ValueError("prediction and target band counts differ")
    h, w = target.shape[-2:]
    if hr_pred.shape[-2:] != (2 * h, 2 * w):
        raise ValueError(
            f"prediction {tuple(hr_pred.shape[-2:])} is not twice the target {h}x{w}")
    if flows.shape[-2:] != (h, w) or flows.shape[-3] != 2:
        raise ValueError(f"flows have shape {tuple(flows.shape)}, expected (..., 2, {h}, {w})")


def self_sr_loss(hr_pred: torch.Tensor, target: torch.Tensor,
                 flows: torch.Tensor, border: int = LOSS_BORDER_LR) -> torch.Tensor:
    """L1 between the warped-and-decimated prediction and the LR target.

    ``hr_pred``: (C, 2H, 2W) or (B, C, 2H, 2W), all bands on the reference
    image's green frame.  ``target``: the other observation, (C, H, W) or
    (B, C, H, W).  ``flows``: one LR field per band of the target,
    (C, 2, H, W) or (B, C, 2, H, W), each mapping that band's grid into the
    reference green frame (as produced by the registration network with the
    reference green band as first argument).
    """
    squeeze = hr_pred.dim() == 3
    if squeeze:
        hr_pred, target, flows = hr_pred[None], target[None], flows[None]
    _check_sr_shapes(hr_pred, target, flows)
    warped = warp_and_downsample(hr_pred, flows)
    return masked_l1(warped, target, border)


def blur_with_kernel(img: torch.Tensor, kernel: torch.Tensor) -> torch.Tensor:
    """Depthwise 2D convolution with a normalized kernel, replicated border."""
    if kernel.dim() != 2 or kernel.shape[0] != kernel.shape[1]:
        raise ValueError("kernel must be square 2D")
    if abs(float(kernel.sum()) - 1.0) > 1e-4:
        raise ValueError("kernel must be normalized to sum 1")
    squeeze = img.dim() == 3
    if squeeze:
        img = img[None]
    c = img.shape[1]
    k = kernel.to(img.dtype)[None, None].expand(c, 1, *kernel.shape)
    r = kernel.shape[0] // 2
    padded = F.pad(img, (r, r, r, r), mode="replicate")
    out = F.conv2d(padded, k, groups=c)
    return out[0] if squeeze else out


def self_sr_deconv_loss(hr_pred: torch.Tensor, target: torch.Tensor,
                        flows: torch.Tensor, kernel: torch.Tensor,
                        border: int = LOSS_BORDER_LR) -> torch.Tensor:
    """Deconvolving variant: the prediction is blurred by ``kernel`` before
    the warp-decimate comparison, so the network learns the sharp image.
    A 1x1 delta kernel reduces this to :func:`self_sr_loss` exactly."""
    if kernel.numel() == 1:
        if abs(float(kernel.sum()) - 1.0) > 1e-4:
            raise ValueError("kernel must be normalized to sum 1")
        return self_sr_loss(hr_pred, target, flows, border)
    blurred = blur_with_kernel(hr_pred, kernel)
    return self_sr_loss(blurred, target, flows, border)


def anchor_consistency_loss(csr, ref_band: torch.Tensor, anchor_band: torch.Tensor,
                            tgt_band: torch.Tensor,
                            border: int = LOSS_BORDER_LR) -> torch.Tensor:
    """Two-step registration consistency through an anchor band.

    ``ref_band`` and ``tgt_band`` are the same spectral band of the two
    overlapping images; ``anchor_band`` is any band of either image. The
    flows target->anchor and anchor->ref are composed into a direct
    target->ref flow, and warping the reference by it must reproduce the
    target. ``csr`` is any callable with the CsrNet calling convention.
    """
    flow_anchor_to_ref = csr(ref_band, anchor_band)
    flow_tgt_to_anchor = csr(anchor_band, tgt_band)
    direct = compose_flows(flow_tgt_to_anchor, flow_anchor_to_ref)
    warped = pullback(ref_band, direct)
    return masked_l1(warped, tgt_band, border)


def supervised_flow_loss(pred_flow: torch.Tensor, gt_flow: torch.Tensor,
                         border: int = LOSS_BORDER_LR) -> torch.Tensor:
    """Mean L1 over both flow components, interior domain."""
    return masked_l1(pred_flow, gt_flow, border)


def supervised_l1_loss(hr_pred: torch.Tensor, gt_hr: torch.Tensor,
                       border: int = LOSS_BORDER_HR) -> torch.Tensor:
    """Mean L1 against the HR ground truth, 8 px HR border excluded."""
    return masked_l1(hr_pred, gt_hr, border)
