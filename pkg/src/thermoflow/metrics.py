"""Image quality metrics: PSNR, windowed SSIM, and a Fréchet distance
over pluggable image features.

The bundled feature extractor (bilinear 8x8 grayscale, d=64) needs no
pretrained network, so Fréchet numbers from it are self-consistent
across runs of this package but NOT comparable to published FID values
computed with Inception features.  Reports carry the extractor name for
that reason.  LPIPS is reserved as a null column: it requires a
pretrained perceptual net, which this package deliberately avoids.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import kernels
from .data import luminance
from .errors import DataError, DimensionError, NumericalError

EIGENVALUE_FLOOR = -1e-8

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
DYNAMIC_RANGE = 255.0


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB against a 255 peak; inf when equal."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"psnr operands differ in shape: {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return math.inf
    return 20.0 * math.log10(DYNAMIC_RANGE / math.sqrt(mse))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _as_plane(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    if img.ndim != 2:
        raise DimensionError(f"ssim expects a single-channel image, got shape {img.shape}")
    return img


def ssim(a, b, window: int = SSIM_WINDOW, k1: float = SSIM_K1, k2: float = SSIM_K2,
         dynamic_range: float = DYNAMIC_RANGE, sigma: float = SSIM_SIGMA) -> float:
    """Mean local luminance/contrast/structure similarity, Gaussian-windowed.

    Identical images give exactly 1.0: every factor of the per-window
    ratio reduces to the same float, including the degenerate
    constant-image case where only the stabilizers remain.
    """
    a = _as_plane(a)
    b = _as_plane(b)
    if a.shape != b.shape:
        raise DimensionError(f"ssim operands differ in shape: {a.shape} vs {b.shape}")
    if min(a.shape) < window:
        raise DimensionError(f"image {a.shape} smaller than ssim window {window}")
    kern = _gaussian_window(window, sigma)
    filt = lambda img: kernels.separable_filter_valid(np.ascontiguousarray(img), kern)  # noqa: E731

    mu_a = filt(a)
    mu_b = filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# Frechet distance over Gaussian feature statistics


@dataclass
class GaussianStats:
    """First two moments of a feature set."""

    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        d = self.mean.shape[0]
        if self.cov.shape != (d, d):
            raise DimensionError(f"covariance {self.cov.shape} does not match mean dim {d}")
        if self.count < 2:
            raise DataError(f"need at least 2 samples for covariance, got {self.count}")
        if np.max(np.abs(self.cov - self.cov.T)) > 1e-10:
            raise NumericalError("covariance is not symmetric within 1e-10")


class StatsAccumulator:
    """Single-pass (Welford) accumulation of mean and covariance."""

    def __init__(self, dim: int):
        self.dim = dim
        self.count = 0
        self._mean = np.zeros(dim)
        self._m2 = np.zeros((dim, dim))

    def push(self, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        if x.shape[0] != self.dim:
            raise DimensionError(f"feature dim {x.shape[0]} != accumulator dim {self.dim}")
        self.count += 1
        delta = x - self._mean
        self._mean += delta / self.count
        self._m2 += np.outer(delta, x - self._mean)

    def finalize(self) -> GaussianStats:
        if self.count < 2:
            raise DataError(f"need at least 2 samples for covariance, got {self.count}")
        cov = self._m2 / (self.count - 1)
        cov = 0.5 * (cov + cov.T)
        return GaussianStats(mean=self._mean.copy(), cov=cov, count=self.count)


def stats_from_features(feats: np.ndarray) -> GaussianStats:
    """Two-pass mean/covariance of an (n, d) feature matrix."""
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 2:
        raise DataError(f"need an (n>=2, d) feature matrix, got {feats.shape}")
    mean = feats.mean(axis=0)
    centered = feats - mean
    cov = centered.T @ centered / (feats.shape[0] - 1)
    return GaussianStats(mean=mean, cov=0.5 * (cov + cov.T), count=feats.shape[0])


def _clamped_sqrt_eigvals(m: np.ndarray, what: str) -> np.ndarray:
    vals = np.linalg.eigvalsh(m)
    if vals.min() < EIGENVALUE_FLOOR:
        raise NumericalError(f"{what} has eigenvalue {vals.min():.3e} below {EIGENVALUE_FLOOR}")
    return np.sqrt(np.clip(vals, 0.0, None))


def frechet_distance(s1: GaussianStats, s2: GaussianStats) -> float:
    """||mu1 - mu2||^2 + Tr(C1 + C2 - 2 (C1 C2)^{1/2}).

    The cross term uses the symmetric similarity C1^{1/2} C2 C1^{1/2},
    whose eigenvalues match those of C1 C2, so one further
    eigendecomposition gives Tr((C1 C2)^{1/2}) without any non-symmetric
    square root.  Eigenvalues in [-1e-8, 0) are treated as exact zeros.
    """
    if s1.mean.shape != s2.mean.shape:
        raise DimensionError(
            f"feature dims differ: {s1.mean.shape[0]} vs {s2.mean.shape[0]}"
        )
    vals1, vecs1 = np.linalg.eigh(s1.cov)
    if vals1.min() < EIGENVALUE_FLOOR:
        raise NumericalError(
            f"covariance has eigenvalue {vals1.min():.3e} below {EIGENVALUE_FLOOR}"
        )
    root1 = (vecs1 * np.sqrt(np.clip(vals1, 0.0, None))) @ vecs1.T
    inner = root1 @ s2.cov @ root1
    inner = 0.5 * (inner + inner.T)
    trace_sqrt = _clamped_sqrt_eigvals(inner, "cross-covariance product").sum()
    diff = s1.mean - s2.mean
    fd = float(diff @ diff + np.trace(s1.cov) + np.trace(s2.cov) - 2.0 * trace_sqrt)
    return max(fd, 0.0)


# ---------------------------------------------------------------------------
# pluggable feature extraction and the evaluation report


@dataclass(frozen=True)
class FeatureExtractor:
    """A pure, deterministic image -> fixed-dim vector map."""

    name: str
    dim: int
    fn: Callable[[np.ndarray], np.ndarray]

    def __call__(self, img: np.ndarray) -> np.ndarray:
        out = np.asarray(self.fn(img), dtype=np.float64).reshape(-1)
        if out.shape[0] != self.dim:
            raise DimensionError(f"extractor '{self.name}' produced dim {out.shape[0]}, "
                                 f"declared {self.dim}")
        return out


def _gray8x8(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 3:
        img = luminance(img.astype(np.uint8))
    if img.ndim == 3:
        img = img[:, :, 0]
    small = kernels.bilinear_resize(np.ascontiguousarray(img)[:, :, None], 8, 8)
    return small.reshape(-1) / 255.0


GRAY8X8 = FeatureExtractor(name="gray8x8", dim=64, fn=_gray8x8)

EXTRACTORS = {GRAY8X8.name: GRAY8X8}


def get_extractor(name: str) -> FeatureExtractor:
    if name not in EXTRACTORS:
        raise DataError(f"unknown feature extractor '{name}'; available: {sorted(EXTRACTORS)}")
    return EXTRACTORS[name]


def evaluate(pairs, extractor: FeatureExtractor = GRAY8X8) -> dict:
    """Aggregate metrics over a stream of (generated, reference) images.

    Returns {psnr_db, ssim, frechet, lpips, extractor, n_pairs}; lpips
    is always None (reserved column).  PSNR may be inf for perfect sets.
    """
    acc_gen = StatsAccumulator(extractor.dim)
    acc_ref = StatsAccumulator(extractor.dim)
    psnrs = []
    ssims = []
    for generated, reference in pairs:
        psnrs.append(psnr(generated, reference))
        ssims.append(ssim(generated, reference))
        acc_gen.push(extractor(generated))
        acc_ref.push(extractor(reference))
    if not psnrs:
        raise DataError("empty evaluation stream")
    if len(psnrs) >= 2:
        fd = frechet_distance(acc_gen.finalize(), acc_ref.finalize())
    else:
        fd = None  # covariance undefined for a single pair
    return {
        "psnr_db": float(np.mean(psnrs)),
        "ssim": float(np.mean(ssims)),
        "frechet": fd,
        "lpips": None,
        "extractor": extractor.name,
        "n_pairs": len(psnrs),
    }
