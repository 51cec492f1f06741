"""Paired RGB-thermal data: ingestion, tiling, normalization, augmentation.

Covers four jobs: cutting aligned map rasters into training crops on a
metric-stride grid, squashing raw thermal ranges into 8 bits, applying
geometry-preserving train-time augmentation, and generating the
synthetic two-style corpus whose thermal channel is an exact pixelwise
function of the RGB (luminance, or inverted luminance), which gives
every downstream experiment a checkable oracle.

Manifests are JSON Lines, one record per pair with fields rgb_path,
thermal_path, style_id, split, source; image paths resolve relative to
the manifest's directory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import kernels
from .errors import DataError, DimensionError, StyleLookupError

SPLITS = ("train", "val", "test")

SYNTH_STYLES = ("synthA", "synthB")

DEFAULT_INVALID_FRACTION = 0.01

MANIFEST_FIELDS = ("rgb_path", "thermal_path", "style_id", "split", "source")


@dataclass
class ImagePair:
    """One aligned RGB + thermal sample with its provenance."""

    rgb: np.ndarray
    thermal: np.ndarray
    style_id: str
    split: str
    source: str
    valid_mask: np.ndarray | None = None

    def __post_init__(self):
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise DimensionError(f"rgb must be (H,W,3), got {self.rgb.shape}")
        if self.thermal.ndim != 3 or self.thermal.shape[2] != 1:
            raise DimensionError(f"thermal must be (H,W,1), got {self.thermal.shape}")
        if self.rgb.shape[:2] != self.thermal.shape[:2]:
            raise DimensionError(
                f"rgb {self.rgb.shape[:2]} and thermal {self.thermal.shape[:2]} dims differ"
            )
        if self.rgb.dtype != np.uint8 or self.thermal.dtype != np.uint8:
            raise DataError("image pairs store 8-bit data; normalize thermal first")
        if self.split not in SPLITS:
            raise DataError(f"split must be one of {SPLITS}, got '{self.split}'")


@dataclass
class AlignedMapPair:
    """Co-registered RGB and thermal rasters covering one surveyed region."""

    rgb_map: np.ndarray
    thermal_map: np.ndarray
    meters_per_pixel: float
    invalid_mask: np.ndarray | None = None

    def __post_init__(self):
        if self.rgb_map.shape[:2] != self.thermal_map.shape[:2]:
            raise DimensionError(
                f"rgb map {self.rgb_map.shape[:2]} and thermal map "
                f"{self.thermal_map.shape[:2]} dims differ"
            )
        if self.meters_per_pixel <= 0:
            raise DataError(f"meters_per_pixel must be positive, got {self.meters_per_pixel}")
        if self.invalid_mask is not None and self.invalid_mask.shape != self.rgb_map.shape[:2]:
            raise DimensionError("invalid_mask dims differ from the rasters")


def grid_positions(extent: int, crop: int, stride_px: float) -> list[int]:
    """Left/top pixel offsets of a regular grid: floor(i * stride) for
    i = 0 .. floor((extent - crop) / stride), so every crop stays in bounds."""
    count = int(np.floor((extent - crop) / stride_px)) + 1
    return [int(np.floor(i * stride_px)) for i in range(count)]


def grid_sample(maps: AlignedMapPair, stride_m: float, crop_px: int,
                style_id: str = "default", split: str = "train", source: str = "map",
                max_invalid_fraction: float = DEFAULT_INVALID_FRACTION) -> list[ImagePair]:
    """Cut a map pair into crop_px crops spaced stride_m apart.

    Crops whose invalid-pixel fraction exceeds ``max_invalid_fraction``
    are dropped.  The thermal map must already be 8-bit (run
    ``normalize_thermal`` first).
    """
    if stride_m <= 0:
        raise DataError(f"stride must be positive, got {stride_m}")
    h, w = maps.thermal_map.shape[:2]
    if crop_px > h or crop_px > w:
        raise DimensionError(f"crop {crop_px} exceeds map extent {h}x{w}")
    if maps.thermal_map.dtype != np.uint8:
        raise DataError("thermal map is not 8-bit; apply normalize_thermal before sampling")
    stride_px = stride_m / maps.meters_per_pixel
    thermal = maps.thermal_map.reshape(h, w, -1)[:, :, :1]
    pairs = []
    for y0 in grid_positions(h, crop_px, stride_px):
        for x0 in grid_positions(w, crop_px, stride_px):
            if maps.invalid_mask is not None:
                frac = maps.invalid_mask[y0 : y0 + crop_px, x0 : x0 + crop_px].mean()
                if frac > max_invalid_fraction:
                    continue
            pairs.append(
                ImagePair(
                    rgb=np.ascontiguousarray(maps.rgb_map[y0 : y0 + crop_px, x0 : x0 + crop_px]),
                    thermal=np.ascontiguousarray(thermal[y0 : y0 + crop_px, x0 : x0 + crop_px]),
                    style_id=style_id,
                    split=split,
                    source=source,
                )
            )
    return pairs


def normalize_thermal(raw: np.ndarray, method: str = "percentile",
                      p_lo: float = 1.0, p_hi: float = 99.0,
                      invalid_mask: np.ndarray | None = None) -> np.ndarray:
    """Linear map of a raw thermal raster onto [0, 255] with clipping.

    ``minmax`` spans the full valid range; ``percentile`` clips to the
    (p_lo, p_hi) percentiles first, which shrugs off hot-pixel outliers.
    The range statistics skip pixels flagged in ``invalid_mask``.  A
    constant raster maps to all zeros.
    """
    raw = np.asarray(raw)
    squeeze = raw.ndim == 3 and raw.shape[2] == 1
    plane = raw[:, :, 0] if squeeze else raw
    if plane.ndim != 2:
        raise DimensionError(f"thermal raster must be 2-D, got {raw.shape}")
    valid = plane if invalid_mask is None else plane[~invalid_mask.astype(bool)]
    if valid.size == 0:
        raise DataError("thermal raster has no valid pixels to normalize")
    vals = valid.astype(np.float64)
    if method == "minmax":
        lo, hi = vals.min(), vals.max()
    elif method == "percentile":
        lo, hi = np.percentile(vals, [p_lo, p_hi])
    else:
        raise DataError(f"unknown normalization '{method}' (use 'minmax' or 'percentile')")
    if hi <= lo:
        out = np.zeros_like(plane, dtype=np.uint8)
    else:
        scaled = np.clip((plane.astype(np.float64) - lo) / (hi - lo), 0.0, 1.0) * 255.0
        out = np.rint(scaled).astype(np.uint8)
    return out[:, :, None] if squeeze else out


def random_resize_crop(pair: ImagePair, out_px: int, rng: np.random.Generator,
                       scale_range: tuple[float, float] = (1.0, 1.5)) -> ImagePair:
    """Identical random resize + crop on both images, alignment preserved.

    The short side is resized to round(out_px * u) with u drawn from
    ``scale_range``, then an out_px square is cropped at a shared random
    offset.  u = 1 on an image already at out_px is the identity.
    """
    h, w = pair.rgb.shape[:2]
    if min(h, w) < out_px:
        raise DataError(f"image {h}x{w} smaller than crop target {out_px}")
    u = rng.uniform(*scale_range)
    s = (out_px * u) / min(h, w)
    new_h, new_w = max(out_px, round(h * s)), max(out_px, round(w * s))

    def resize(img):
        return kernels.bilinear_resize(np.ascontiguousarray(img, dtype=np.float64), new_h, new_w)

    rgb = resize(pair.rgb)
    thermal = resize(pair.thermal)
    oy = int(rng.integers(0, new_h - out_px + 1))
    ox = int(rng.integers(0, new_w - out_px + 1))
    rgb = rgb[oy : oy + out_px, ox : ox + out_px]
    thermal = thermal[oy : oy + out_px, ox : ox + out_px]
    mask = None
    if pair.valid_mask is not None:
        m = resize(pair.valid_mask[:, :, None].astype(np.float64))
        mask = m[oy : oy + out_px, ox : ox + out_px, 0] > 0.5
    return ImagePair(
        rgb=np.clip(np.rint(rgb), 0, 255).astype(np.uint8),
        thermal=np.clip(np.rint(thermal), 0, 255).astype(np.uint8),
        style_id=pair.style_id,
        split=pair.split,
        source=pair.source,
        valid_mask=mask,
    )


def luminance(rgb: np.ndarray) -> np.ndarray:
    """Rounded ITU-R 601 luma of an 8-bit RGB image, shape (H, W)."""
    r = rgb[:, :, 0].astype(np.float64)
    g = rgb[:, :, 1].astype(np.float64)
    b = rgb[:, :, 2].astype(np.float64)
    return np.clip(np.rint(0.299 * r + 0.587 * g + 0.114 * b), 0, 255)


def synth_oracle_thermal(rgb: np.ndarray, style_id: str) -> np.ndarray:
    """The exact thermal image each synthetic style assigns to an RGB input."""
    lum = luminance(rgb)
    if style_id == "synthA":
        out = lum
    elif style_id == "synthB":
        out = 255.0 - lum
    else:
        raise StyleLookupError(f"unknown synthetic style '{style_id}'; use {SYNTH_STYLES}")
    return out.astype(np.uint8)[:, :, None]


def synth_generate(style_id: str, n: int, size: int, seed: int,
                   split: str = "train") -> list[ImagePair]:
    """n reproducible smooth-field RGB images with oracle thermal channels.

    The RGB fields depend only on (seed, index), so the two styles paired
    with the same seed share RGB content and their thermals sum to 255.
    """
    if style_id not in SYNTH_STYLES:
        raise StyleLookupError(f"unknown synthetic style '{style_id}'; use {SYNTH_STYLES}")
    if n <= 0:
        raise DataError(f"sample count must be positive, got {n}")
    rng = np.random.default_rng(seed)
    base = max(2, size // 8)
    pairs = []
    for i in range(n):
        low = rng.uniform(0.0, 255.0, size=(base, base, 3))
        rgb = np.clip(np.rint(kernels.bilinear_resize(low, size, size)), 0, 255).astype(np.uint8)
        pairs.append(
            ImagePair(
                rgb=rgb,
                thermal=synth_oracle_thermal(rgb, style_id),
                style_id=style_id,
                split=split,
                source=f"synth-{style_id}",
            )
        )
    return pairs


# ---------------------------------------------------------------------------
# image and manifest I/O


def save_png(arr: np.ndarray, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path, format="PNG")


def load_image(path) -> np.ndarray:
    """Decode a PNG (or .npy) raster to a numpy array, 8- or 16-bit."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"image file not found: {path}")
    if path.suffix == ".npy":
        return np.load(path)
    try:
        with Image.open(path) as img:
            if img.mode in ("I;16", "I"):
                return np.asarray(img, dtype=np.uint16)
            if img.mode == "L":
                return np.asarray(img, dtype=np.uint8)
            return np.asarray(img.convert("RGB"), dtype=np.uint8)
    except (OSError, SyntaxError) as e:
        raise DataError(f"cannot decode image {path}: {e}") from e


def load_pair(record: dict, base_dir: Path) -> ImagePair:
    rgb = load_image(base_dir / record["rgb_path"])
    thermal = load_image(base_dir / record["thermal_path"])
    if thermal.ndim == 2:
        thermal = thermal[:, :, None]
    return ImagePair(
        rgb=rgb,
        thermal=thermal.astype(np.uint8),
        style_id=record["style_id"],
        split=record["split"],
        source=record["source"],
    )


def write_manifest(path, records, append: bool = False) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a" if append else "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps({k: rec[k] for k in MANIFEST_FIELDS}, sort_keys=True) + "\n")


def read_manifest(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    records = []
    with open(path, encoding="utf-8") as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            missing = [k for k in MANIFEST_FIELDS if k not in rec]
            if missing:
                raise DataError(f"{path}:{ln} missing manifest fields {missing}")
            if rec["split"] not in SPLITS:
                raise DataError(f"{path}:{ln} invalid split '{rec['split']}'")
            records.append(rec)
    return records


def validate_manifest(path) -> list[dict]:
    """Read a manifest and verify every referenced image exists and decodes.

    Total by construction: a manifest that validates cannot produce a
    mid-training decode failure on intact files.
    """
    path = Path(path)
    records = read_manifest(path)
    base = path.parent
    for rec in records:
        for key in ("rgb_path", "thermal_path"):
            p = base / rec[key]
            if not p.exists():
                raise DataError(f"manifest references missing file: {p}")
            try:
                with Image.open(p) as img:
                    img.verify()
            except Exception as e:
                raise DataError(f"manifest references undecodable file {p}: {e}") from e
    return records


class PairLoader:
    """Streams shuffled batches of ImagePairs for one split, epoch after epoch.

    Decoded images are cached in memory after first touch, which is the
    right trade at desk scale.
    """

    def __init__(self, manifest_path, split: str, batch_size: int,
                 rng: np.random.Generator, records: list[dict] | None = None):
        self.base = Path(manifest_path).parent
        recs = records if records is not None else read_manifest(manifest_path)
        self.records = [r for r in recs if r["split"] == split]
        if not self.records:
            raise DataError(f"no records with split '{split}' in {manifest_path}")
        if batch_size < 1:
            raise DataError(f"batch size must be >= 1, got {batch_size}")
        self.batch_size = batch_size
        self.rng = rng
        self._cache: dict[int, ImagePair] = {}

    def __len__(self) -> int:
        return len(self.records)

    def pair(self, index: int) -> ImagePair:
        if index not in self._cache:
            self._cache[index] = load_pair(self.records[index], self.base)
        return self._cache[index]

    def batches(self):
        """Infinite stream; each epoch is one seeded shuffle of all records."""
        n = len(self.records)
        while True:
            order = self.rng.permutation(n)
            for start in range(0, n - self.batch_size + 1, self.batch_size):
                yield [self.pair(i) for i in order[start : start + self.batch_size]]
            if n < self.batch_size:
                yield [self.pair(i) for i in order]


def to_model_range(img: np.ndarray) -> np.ndarray:
    """uint8 [0,255] -> float64 [-1,1]."""
    return img.astype(np.float64) / 127.5 - 1.0


def from_model_range(arr: np.ndarray) -> np.ndarray:
    """float [-1,1] -> uint8 with rounding and clipping."""
    return np.clip(np.rint((arr + 1.0) * 127.5), 0, 255).astype(np.uint8)
