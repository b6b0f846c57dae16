"""Raster types, TIFF I/O, dataset manifests and integer pre-registration.

Images are channel-first float32 numpy arrays in [0, 1]:

* MultiBandImage: (4, H, W), band order B, G, R, N.
* BandImage: (H, W), one plane extracted from a MultiBandImage.
* Flow storage: (2, H, W) float32, plane 0 = dx, plane 1 = dy, LR pixels.

Dataset layout on disk::

    <root>/manifest.json
    <root>/pairs/<id>/{I0.tif, I1.tif, flow_g_to_b.tif, ..., hr0.tif, hr1.tif}

Imagery is stored as 16-bit unsigned TIFF, flows and HR ground truth as
32-bit float TIFF. ``manifest.json`` follows the schema in
:class:`DatasetManifest`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tifffile

from .errors import DataError

__all__ = [
    "BAND_NAMES",
    "GREEN",
    "validate_multiband",
    "validate_band",
    "load_raster",
    "save_raster",
    "shift_image",
    "estimate_integer_offset",
    "extract_pair_crops",
    "ManifestEntry",
    "DatasetManifest",
    "flow_filename",
    "load_homographies",
    "save_homographies",
]

BAND_NAMES = ("b", "g", "r", "n")
GREEN = 1  # index of the green band in a MultiBandImage


def validate_multiband(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 4:
        raise ValueError(f"expected (4, H, W) multiband image, got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise DataError("multiband image contains non-finite values")
    if img.min() < 0.0 or img.max() > 1.0:
        raise DataError("multiband values outside [0, 1]")
    return img


def validate_band(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"expected (H, W) band image, got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise DataError("band image contains non-finite values")
    return img


def load_raster(path) -> np.ndarray:
    """Load a 1-, 2- or 4-plane TIFF as float32.

    16-bit integer data is scaled by 1/65535. Float imagery (1 or 4 planes)
    is clamped to [0, 1]; 2-plane rasters are flow fields and pass through
    unclamped. NaN/Inf values are rejected.
    """
    path = Path(path)
    try:
        arr = tifffile.imread(path)
    except (OSError, ValueError, tifffile.TiffFileError) as exc:
        raise DataError(f"cannot read raster {path}: {exc}") from exc
    arr = np.asarray(arr)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[0] not in (1, 2, 4):
        raise DataError(f"{path}: expected 1, 2 or 4 planes, got shape {arr.shape}")
    if arr.dtype == np.uint16:
        out = arr.astype(np.float32) / np.float32(65535.0)
    elif arr.dtype in (np.float32, np.float64):
        out = arr.astype(np.float32)
        if not np.all(np.isfinite(out)):
            raise DataError(f"{path}: non-finite values")
        if arr.shape[0] != 2:
            out = np.clip(out, 0.0, 1.0)
    else:
        raise DataError(f"{path}: unsupported dtype {arr.dtype}")
    if not np.all(np.isfinite(out)):
        raise DataError(f"{path}: non-finite values")
    return out[0] if out.shape[0] == 1 else out


def save_raster(path, img: np.ndarray, dtype: str = "float32") -> None:
    """Write a raster as TIFF. ``dtype`` is ``"uint16"`` or ``"float32"``.

    32-bit float saves round-trip bit-exactly; 16-bit saves quantize [0, 1]
    to 1/65535 steps and reject values outside [0, 1].
    """
    path = Path(path)
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[None]
    if img.ndim != 3 or img.shape[0] not in (1, 2, 4):
        raise ValueError(f"expected 1, 2 or 4 planes, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValueError("refusing to save non-finite raster")
    if dtype == "uint16":
        if img.min() < 0.0 or img.max() > 1.0:
            raise ValueError("16-bit saves require values in [0, 1]")
        data = np.round(img.astype(np.float64) * 65535.0).astype(np.uint16)
    elif dtype == "float32":
        data = img.astype(np.float32)
    else:
        raise ValueError(f"unsupported save dtype {dtype!r}")
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        tifffile.imwrite(path, data)
    except OSError as exc:
        raise DataError(f"cannot write raster {path}: {exc}") from exc


def shift_image(img: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Integer translation with zero fill: content moves by (+dx, +dy)."""
    out = np.zeros_like(img)
    h, w = img.shape[-2:]
    sy0, sy1 = max(0, dy), min(h, h + dy)
    sx0, sx1 = max(0, dx), min(w, w + dx)
    out[..., sy0:sy1, sx0:sx1] = img[..., sy0 - dy:sy1 - dy, sx0 - dx:sx1 - dx]
    return out


def estimate_integer_offset(a: np.ndarray, b: np.ndarray) -> tuple[int, int]:
    """Integer translation (dx, dy) such that ``b ~= shift_image(a, dx, dy)``.

    Phase correlation: the translation maximizing the normalized
    cross-power-spectrum correlation. Anti-symmetric for pure translations
    with enough overlap: offset(a, b) == -offset(b, a).
    """
    a = validate_band(np.asarray(a, dtype=np.float64))
    b = validate_band(np.asarray(b, dtype=np.float64))
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.std() < 1e-9 or b.std() < 1e-9:
        raise DataError("constant image: phase correlation has no unique peak")
    fa = np.fft.fft2(a - a.mean())
    fb = np.fft.fft2(b - b.mean())
    cross = fa * np.conj(fb)
    mag = np.abs(cross)
    cross /= np.maximum(mag, 1e-12)
    corr = np.real(np.fft.ifft2(cross))
    peak = np.unravel_index(np.argmax(corr), corr.shape)
    h, w = a.shape
    dy = -(peak[0] if peak[0] <= h // 2 else peak[0] - h)
    dx = -(peak[1] if peak[1] <= w // 2 else peak[1] - w)
    return int(dx), int(dy)


def extract_pair_crops(i0: np.ndarray, i1: np.ndarray, offset: tuple[int, int],
                       crop_size: int, stride: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Tile the overlap of a pre-registered pair into co-located crop pairs.

    ``offset`` comes from :func:`estimate_integer_offset` on matching bands,
    i.e. ``i1 ~= shift_image(i0, dx, dy)``; crop k of i0 at (x0, y0) pairs
    with the crop of i1 at (x0 + dx, y0 + dy). All crops lie fully inside
    both images.
    """
    dx, dy = offset
    h, w = i0.shape[-2:]
    if i1.shape[-2:] != (h, w):
        raise ValueError("pair images must share a shape")
    x_lo, x_hi = max(0, -dx), min(w - crop_size, w - crop_size - dx)
    y_lo, y_hi = max(0, -dy), min(h - crop_size, h - crop_size - dy)
    if x_hi < x_lo or y_hi < y_lo:
        raise DataError(
            f"overlap too small for crop size {crop_size} at offset ({dx}, {dy})")
    crops = []
    for y0 in range(y_lo, y_hi + 1, stride):
        for x0 in range(x_lo, x_hi + 1, stride):
            c0 = i0[..., y0:y0 + crop_size, x0:x0 + crop_size]
            c1 = i1[..., y0 + dy:y0 + dy + crop_size, x0 + dx:x0 + dx + crop_size]
            crops.append((c0, c1))
    return crops


# --------------------------------------------------------------------------
# Dataset manifests
# --------------------------------------------------------------------------

def flow_filename(band: str) -> str:
    return f"flow_g_to_{band}.tif"


@dataclass
class ManifestEntry:
    id: str
    i0: str
    i1: str
    flows: dict[str, str] | None = None
    hr: list[str] | None = None

    def to_json(self) -> dict:
        return {"id": self.id, "i0": self.i0, "i1": self.i1,
                "flows": self.flows, "hr": self.hr}


@dataclass
class DatasetManifest:
    """Schema: ``{"split": "train"|"test", "seed": int, "entries": [...]}``.

    Entry paths are relative to the manifest's directory (the dataset root).
    """

    split: str
    seed: int
    entries: list[ManifestEntry] = field(default_factory=list)
    root: Path | None = None

    def to_json(self) -> dict:
        return {"split": self.split, "seed": self.seed,
                "entries": [e.to_json() for e in self.entries]}

    def save(self, root) -> Path:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        path = root / "manifest.json"
        path.write_text(json.dumps(self.to_json(), indent=2) + "\n")
        self.root = root
        return path

    @classmethod
    def load(cls, root) -> "DatasetManifest":
        root = Path(root)
        path = root / "manifest.json" if root.is_dir() else root
        if not path.is_file():
            raise DataError(f"no manifest at {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise DataError(f"malformed manifest {path}: {exc}") from exc
        try:
            entries = [ManifestEntry(**e) for e in doc["entries"]]
            manifest = cls(split=doc["split"], seed=doc["seed"], entries=entries)
        except (KeyError, TypeError) as exc:
            raise DataError(f"manifest {path} does not match schema: {exc}") from exc
        if manifest.split not in ("train", "test"):
            raise DataError(f"manifest split must be train|test, got {manifest.split!r}")
        manifest.root = path.parent
        return manifest

    def resolve(self, rel: str) -> Path:
        if self.root is None:
            raise DataError("manifest has no root directory")
        return self.root / rel

    def load_pair(self, entry: ManifestEntry) -> dict:
        """Decode one entry; validates that shapes within the pair agree."""
        i0 = load_raster(self.resolve(entry.i0))
        i1 = load_raster(self.resolve(entry.i1))
        if i0.shape != i1.shape:
            raise DataError(f"pair {entry.id}: I0 {i0.shape} != I1 {i1.shape}")
        out = {"id": entry.id, "i0": validate_multiband(i0), "i1": validate_multiband(i1)}
        if entry.flows:
            flows = {}
            for band, rel in entry.flows.items():
                f = load_raster(self.resolve(rel))
                if f.shape != (2,) + i0.shape[-2:]:
                    raise DataError(f"pair {entry.id}: flow {band} shape {f.shape}")
                flows[band] = f
            out["flows"] = flows
        if entry.hr:
            hr = [load_raster(self.resolve(rel)) for rel in entry.hr]
            for x in hr:
                if x.shape != (4, 2 * i0.shape[1], 2 * i0.shape[2]):
                    raise DataError(f"pair {entry.id}: HR shape {x.shape}")
            out["hr"] = hr
        homog = self.resolve(entry.i0).parent / "homographies.json"
        if homog.is_file():
            out["homographies"] = load_homographies(homog)
        return out

    def validate_files(self) -> None:
        for entry in self.entries:
            self.load_pair(entry)


def save_homographies(path, matrices: dict[str, np.ndarray]) -> None:
    doc = {k: np.asarray(v, dtype=np.float64).tolist() for k, v in matrices.items()}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_homographies(path) -> dict[str, np.ndarray]:
    doc = json.loads(Path(path).read_text())
    return {k: np.asarray(v, dtype=np.float64) for k, v in doc.items()}
