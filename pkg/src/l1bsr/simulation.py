"""Synthetic band-misaligned LR pair generation with ground-truth geometry.

From a clean HR 4-band crop, a pair of LR observations is simulated as:

1. blur the crop (Gaussian, sigma 0.7 by default) into a base scene B;
2. move each observation by a random scene homography H_t;
3. move each non-green band additionally by a translation-dominant band
   homography H_{t,i};
4. decimate x2 (phase (0, 0)) and add i.i.d. Gaussian noise.

The green band carries no band homography, so the stored HR ground truth
(H_t applied to all bands of B) is aligned with each image's green band.
All homographies are retained and the per-band LR flows that align I1's
bands onto I0's green frame are materialized exactly from them.

Homographies act as backward maps (see :mod:`l1bsr.geometry`): an image
moved by H satisfies ``out(x) = in(H(x))``, and the band chain
"H_t then H_{t,i}" therefore samples B at ``H_t(H_{t,i}(x))``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np
from scipy import ndimage

from . import geometry as geo
from .imagery import BAND_NAMES, GREEN

__all__ = [
    "SimulationParams",
    "SimulatedPair",
    "gaussian_blur",
    "sample_scene_homography",
    "sample_band_homography",
    "simulate_pair",
    "gt_flow",
    "band_matrix",
    "synthetic_scene",
]


@dataclass
class SimulationParams:
    """Ranges are per-component maxima in HR pixels; noise is a fraction of
    the [0, 1] dynamic range.

    The worst-case misalignment between any band of I1 and the green frame
    of I0 is ``(2 * (scene_translation + scene_corner) + band_translation +
    band_jitter) / 2`` LR pixels and must stay within the 10 px motion range
    of the registration network. The defaults sit exactly at that bound.
    """

    blur_sigma: float = 0.7
    scene_translation_range: float = 0.0
    scene_corner_range: float = 7.9
    band_translation_range: float = 4.0
    band_jitter_range: float = 0.2
    noise_std: float = 0.001
    seed: int = 0

    def max_lr_distortion(self) -> float:
        scene = self.scene_translation_range + self.scene_corner_range
        return (2.0 * scene + self.band_translation_range + self.band_jitter_range) / 2.0

    def __post_init__(self):
        if self.blur_sigma < 0:
            raise ValueError("blur_sigma must be >= 0")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        for name in ("scene_translation_range", "scene_corner_range",
                     "band_translation_range", "band_jitter_range"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.max_lr_distortion() > 10.0 + 1e-9:
            raise ValueError(
                f"parameter ranges allow {self.max_lr_distortion():.2f} LR px of "
                "inter-band distortion; the limit is 10")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class SimulatedPair:
    """Two LR observations with exact ground-truth geometry.

    ``flows[band]`` aligns I1's band onto I0's green frame: it lives on the
    LR grid and ``x + flow(x)`` is the I0-green-frame position of the scene
    point seen at I1-band pixel x. ``gt_hr_t`` is aligned with ``I_t``'s
    green band. ``homographies`` holds h0, h1 and h{t}_{band} for the
    non-green bands.
    """

    i0: np.ndarray
    i1: np.ndarray
    gt_hr0: np.ndarray
    gt_hr1: np.ndarray
    flows: dict[str, np.ndarray]
    homographies: dict[str, np.ndarray] = field(default_factory=dict)


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian, kernel truncated at 4 sigma, replicated border."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    img = np.asarray(img, dtype=np.float64)
    if sigma == 0:
        return img.copy()
    axes = (-2, -1)
    return ndimage.gaussian_filter(img, sigma, axes=axes, mode="nearest", truncate=4.0)


def _corners(height: int, width: int) -> np.ndarray:
    return np.array([[0, 0], [width - 1, 0], [0, height - 1],
                     [width - 1, height - 1]], dtype=np.float64)


def sample_scene_homography(rng: np.random.Generator, params: SimulationParams,
                            shape: tuple[int, int]) -> np.ndarray:
    """Identity-centered projective map with per-corner displacements uniform
    in the configured range, plus an optional common translation."""
    t = rng.uniform(-params.scene_translation_range, params.scene_translation_range, 2)
    shifts = rng.uniform(-params.scene_corner_range, params.scene_corner_range, (4, 2))
    if params.scene_corner_range == 0 and params.scene_translation_range == 0:
        return geo.identity_homography()
    return geo.homography_from_corner_shift(_corners(*shape), shifts + t)


def sample_band_homography(rng: np.random.Generator, params: SimulationParams,
                           shape: tuple[int, int]) -> np.ndarray:
    """Translation-dominant homography: a uniform translation plus per-corner
    projective jitter at least 10x smaller in displacement."""
    t = rng.uniform(-params.band_translation_range, params.band_translation_range, 2)
    jitter = rng.uniform(-params.band_jitter_range, params.band_jitter_range, (4, 2))
    if params.band_jitter_range == 0:
        return geo.translation_homography(*t)
    return geo.homography_from_corner_shift(_corners(*shape), jitter + t)


def band_matrix(homographies: dict[str, np.ndarray], t: int, band: str) -> np.ndarray:
    """Composite backward map of band ``band`` in image ``t``: B-HR sample
    position of HR pixel x is ``M(x)`` with ``M = H_t @ H_{t,band}``
    (green has no band homography)."""
    h_scene = homographies[f"h{t}"]
    if band == "g":
        return h_scene
    return h_scene @ homographies[f"h{t}_{band}"]


def gt_flow(homographies: dict[str, np.ndarray], band: str,
            lr_shape: tuple[int, int],
            ref_t: int = 0, ref_band: str = "g",
            tgt_t: int = 1) -> np.ndarray:
    """Exact LR flow from image ``tgt_t``'s ``band`` into image ``ref_t``'s
    ``ref_band`` frame: ``F(x) = M_ref^-1(M_tgt(2x)) / 2 - x``."""
    h, w = lr_shape
    m_ref = band_matrix(homographies, ref_t, ref_band)
    m_tgt = band_matrix(homographies, tgt_t, band)
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    hx, hy = geo.apply_homography_to_points(m_tgt, 2.0 * xs, 2.0 * ys)
    rx, ry = geo.apply_homography_to_points(geo.invert_homography(m_ref), hx, hy)
    return np.stack([rx / 2.0 - xs, ry / 2.0 - ys]).astype(np.float32)


def band_lr_flow(h_band: np.ndarray, lr_shape: tuple[int, int]) -> np.ndarray:
    """LR flow of a band homography on its own image's green frame:
    ``F(x) = H(2x) / 2 - x``. Warping gt_hr with it (and decimating)
    produces that image's misaligned band."""
    h, w = lr_shape
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    px, py = geo.apply_homography_to_points(h_band, 2.0 * xs, 2.0 * ys)
    return np.stack([px / 2.0 - xs, py / 2.0 - ys]).astype(np.float32)


def simulate_pair(hr_crop: np.ndarray, params: SimulationParams,
                  rng: np.random.Generator,
                  homographies: dict[str, np.ndarray] | None = None) -> SimulatedPair:
    """Simulate one LR pair with ground truth from an HR 4-band crop.

    ``hr_crop`` is (4, H, W) with even H, W and values in [0, 1]. Pure given
    (crop, params, rng state): same seeds give bit-identical outputs.
    ``homographies`` overrides the random geometry (keys as in
    :class:`SimulatedPair`); missing band entries default to identity.
    """
    hr_crop = np.asarray(hr_crop, dtype=np.float64)
    if hr_crop.ndim != 3 or hr_crop.shape[0] != 4:
        raise ValueError(f"expected (4, H, W) crop, got {hr_crop.shape}")
    h, w = hr_crop.shape[-2:]
    if h % 2 or w % 2:
        raise ValueError("HR crop dimensions must be even")
    if not np.all(np.isfinite(hr_crop)) or hr_crop.min() < 0 or hr_crop.max() > 1:
        raise ValueError("HR crop values must be finite and in [0, 1]")
    lr_shape = (h // 2, w // 2)

    scene = gaussian_blur(hr_crop, params.blur_sigma)
    if homographies is None:
        homographies = {}
        for t in (0, 1):
            homographies[f"h{t}"] = sample_scene_homography(rng, params, (h, w))
        for t in (0, 1):
            for band in BAND_NAMES:
                if band != "g":
                    homographies[f"h{t}_{band}"] = sample_band_homography(rng, params, (h, w))
    else:
        homographies = dict(homographies)
        for t in (0, 1):
            homographies.setdefault(f"h{t}", geo.identity_homography())
            for band in BAND_NAMES:
                if band != "g":
                    homographies.setdefault(f"h{t}_{band}", geo.identity_homography())

    # The band chain H_{t,band} after H_t is applied sequentially: the scene
    # is first moved by H_t (that resampling IS the stored HR ground truth),
    # then each non-green band is moved by its band homography and decimated.
    # Warping the stored gt_hr by the stored geometry therefore reproduces
    # the noise-free LR bands exactly.
    gt_hr = [np.clip(geo.apply_homography(scene, homographies[f"h{t}"]),
                     0.0, 1.0).astype(np.float32) for t in (0, 1)]
    images = []
    for t in (0, 1):
        bands = []
        for bi, band in enumerate(BAND_NAMES):
            if band == "g":
                bands.append(gt_hr[t][bi][0::2, 0::2].copy())
            else:
                flow = band_lr_flow(homographies[f"h{t}_{band}"], lr_shape)
                bands.append(geo.warp_and_downsample(gt_hr[t][bi], flow))
        lr = np.stack(bands).astype(np.float64)
        noise = rng.normal(0.0, params.noise_std, lr.shape) if params.noise_std > 0 else 0.0
        images.append(np.clip(lr + noise, 0.0, 1.0).astype(np.float32))

    flows = {band: gt_flow(homographies, band, lr_shape) for band in BAND_NAMES}
    return SimulatedPair(
        i0=images[0], i1=images[1],
        gt_hr0=gt_hr[0], gt_hr1=gt_hr[1],
        flows=flows, homographies=homographies)


# --------------------------------------------------------------------------
# Procedural HR scenes for desk-scale experiments (no real products needed).
# --------------------------------------------------------------------------

def _spectral_noise(rng: np.random.Generator, h: int, w: int, alpha: float) -> np.ndarray:
    """Random-phase field with a 1/f^alpha amplitude spectrum, in [0, 1]."""
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    radius = np.sqrt(fx * fx + fy * fy)
    radius[0, 0] = 1.0
    amp = radius ** (-alpha)
    amp[0, 0] = 0.0
    phase = rng.uniform(0, 2 * np.pi, (h, w))
    spec = amp * np.exp(1j * phase)
    field = np.real(np.fft.ifft2(spec))
    lo, hi = field.min(), field.max()
    return (field - lo) / max(hi - lo, 1e-12)


def synthetic_scene(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """Procedural 4-band HR scene with natural-image-like spectra: smooth
    structure, moderately sharp patch edges, fine oriented texture, and
    band-correlated radiometry (NIR least correlated with the visible bands).

    Patch edges and oriented stripes put real energy above the LR Nyquist
    rate, so decimation aliases and the misaligned bands carry complementary
    samples of the scene.
    """
    structure = _spectral_noise(rng, height, width, 2.0)
    texture = _spectral_noise(rng, height, width, 1.1)
    material = _spectral_noise(rng, height, width, 2.4)
    grain = _spectral_noise(rng, height, width, 0.7)

    # patch edges: thresholded smooth field, softened to ~1 px transitions
    plateaus = np.digitize(material, np.quantile(material, [0.3, 0.55, 0.8]))
    plateau_levels = rng.uniform(0.2, 0.8, 4)[plateaus]
    plateau_levels = ndimage.gaussian_filter(plateau_levels, 0.7, mode="nearest")

    ys, xs = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    stripes = np.sin(
        2 * np.pi * (rng.uniform(0.12, 0.3) * xs + rng.uniform(0.12, 0.3) * ys)
        + rng.uniform(0, 2 * np.pi))
    stripe_mask = ndimage.gaussian_filter(
        (material > np.quantile(material, 0.7)).astype(np.float64), 2.0, mode="nearest")

    base = 0.37 * structure + 0.30 * plateau_levels + 0.12 * texture \
        + 0.08 * stripes * stripe_mask + 0.05 * grain + 0.08
    nir_base = 0.45 * material + 0.3 * structure + 0.15 * texture + 0.1 * grain

    gains = {"b": 0.9, "g": 1.0, "r": 0.95}
    offsets = {"b": 0.05, "g": 0.0, "r": 0.02}
    bands = []
    for band in BAND_NAMES:
        if band == "n":
            plane = 0.6 * nir_base + 0.4 * base
        else:
            plane = gains[band] * base + offsets[band]
        bands.append(plane)
    img = np.stack(bands)
    return np.clip(img, 0.0, 1.0)
