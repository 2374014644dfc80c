"""Non-local means denoising, multiscale pixel features and augmentation.

The feature extractor produces a fixed 15-channel layout: for each Gaussian
scale, the smoothed intensity, the Gaussian-gradient magnitude, and the
smaller eigenvalue of the 2x2 structure tensor (a local-structure measure).
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .core import GraySlice, LabelMask

__all__ = [
    "AugmentConfig",
    "BfeConfig",
    "FeatureMap",
    "nl_means",
    "estimate_noise_sigma",
    "bfe",
    "augment",
    "slice_rng",
    "resize_bilinear",
    "resize_nearest",
]

BFE_CHANNELS = 15
FEATURES_PER_SCALE = 3


@dataclass(frozen=True)
class BfeConfig:
    """Scales of the multiscale pixel-feature extractor (3 channels each)."""

    scales: tuple[float, ...] = (1.0, 2.0, 4.0, 8.0, 16.0)

    def __post_init__(self):
        scales = tuple(float(s) for s in self.scales)
        object.__setattr__(self, "scales", scales)
        if any(s <= 0 for s in scales):
            raise ValueError("scales must be positive")
        if any(b <= a for a, b in zip(scales, scales[1:])):
            raise ValueError("scales must be strictly increasing")
        if len(scales) * FEATURES_PER_SCALE != BFE_CHANNELS:
            raise ValueError(
                f"need {BFE_CHANNELS // FEATURES_PER_SCALE} scales for "
                f"{BFE_CHANNELS} channels, got {len(scales)}"
            )


@dataclass(frozen=True)
class FeatureMap:
    """Dense H x W x k feature tensor tagged with its extractor."""

    values: np.ndarray
    extractor: str
    source: str | None = None

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3:
            raise ValueError(f"values must be H x W x k, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("feature values contain non-finite entries")
        object.__setattr__(self, "values", v)

    @property
    def k(self) -> int:
        return self.values.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape


@dataclass(frozen=True)
class AugmentConfig:
    """Crop / upsample / flip / photometric-jitter pipeline parameters."""

    crop_mode: str = "random"             # "random" or "center"
    crop_size: int = 224
    upsample_size: int = 560
    flip_h_prob: float = 0.5
    flip_v_prob: float = 0.5
    contrast_range: tuple[float, float] = (0.9, 1.1)
    brightness_range: tuple[float, float] = (0.9, 1.1)
    gamma_range: tuple[float, float] = (0.9, 1.1)
    seed: int = 0

    def __post_init__(self):
        if self.crop_mode not in ("random", "center"):
            raise ValueError(f"crop_mode must be 'random' or 'center', got {self.crop_mode!r}")
        if self.upsample_size < self.crop_size:
            raise ValueError("upsample_size must be >= crop_size")
        for p in (self.flip_h_prob, self.flip_v_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError("flip probabilities must lie in [0, 1]")
        for lo, hi in (self.contrast_range, self.brightness_range, self.gamma_range):
            if hi < lo or lo <= 0:
                raise ValueError("jitter ranges must be positive (low, high) pairs")

    @classmethod
    def deterministic(cls, seed: int = 0, crop_size: int = 224,
                      upsample_size: int = 560) -> "AugmentConfig":
        """Center crop + upsample only; no flips, no jitter."""
        return cls(
            crop_mode="center", crop_size=crop_size, upsample_size=upsample_size,
            flip_h_prob=0.0, flip_v_prob=0.0,
            contrast_range=(1.0, 1.0), brightness_range=(1.0, 1.0),
            gamma_range=(1.0, 1.0), seed=seed,
        )

    def deterministic_variant(self) -> "AugmentConfig":
        """This config's geometry with every random choice disabled."""
        return AugmentConfig.deterministic(
            seed=self.seed, crop_size=self.crop_size,
            upsample_size=self.upsample_size,
        )


# ---------------------------------------------------------------------------
# resizing (single implementation shared by every module)

def resize_bilinear(arr: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of (H, W) or (H, W, C) float arrays."""
    arr = np.asarray(arr)
    squeeze = arr.ndim == 2
    t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))
    t = t[None, None] if squeeze else t.permute(2, 0, 1)[None]
    out = F.interpolate(t, size=out_hw, mode="bilinear", align_corners=False)
    out = out[0, 0] if squeeze else out[0].permute(1, 2, 0)
    return out.numpy()


def resize_nearest(labels: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbor resize for integer label arrays (no new labels)."""
    t = torch.from_numpy(np.ascontiguousarray(labels, dtype=np.float32))[None, None]
    out = F.interpolate(t, size=out_hw, mode="nearest-exact")
    return out[0, 0].numpy().astype(np.int64)


# ---------------------------------------------------------------------------
# non-local means

def _box_sum_valid(arr: np.ndarray, k: int) -> np.ndarray:
    """Sum over every k x k window of ``arr`` (valid positions only)."""
    s = np.zeros((arr.shape[0] + 1, arr.shape[1] + 1), dtype=np.float64)
    np.cumsum(np.cumsum(arr, axis=0), axis=1, out=s[1:, 1:])
    return s[k:, k:] - s[:-k, k:] - s[k:, :-k] + s[:-k, :-k]


def nl_means(
    slc: GraySlice,
    patch_size: int = 5,
    search_window: int = 21,
    strength: float | None = None,
) -> GraySlice:
    """Non-local means denoising with reflect padding.

    For each pixel, the output is the weighted average of all pixels inside
    its search window; a candidate's weight is exp(-d2 / strength^2) where d2
    is the mean squared difference between the two patches.  The center pixel
    participates with weight 1.  ``strength=None`` uses 0.8x the noise level
    estimated by :func:`estimate_noise_sigma`.
    """
    if patch_size % 2 != 1:
        raise ValueError(f"patch_size must be odd, got {patch_size}")
    if search_window < patch_size:
        raise ValueError("search_window must be >= patch_size")
    h_img, w_img = slc.shape
    if min(h_img, w_img) < search_window:
        raise ValueError(
            f"image {slc.shape} smaller than search window {search_window}"
        )
    if strength is None:
        strength = 0.8 * estimate_noise_sigma(slc.pixels)
        strength = max(strength, 1e-8)  # noise-free input
    if strength <= 0:
        raise ValueError(f"strength must be > 0, got {strength}")

    f = patch_size // 2
    t = search_window // 2
    pad = t + f
    padded = np.pad(slc.pixels.astype(np.float64), pad, mode="reflect")
    inv_h2 = 1.0 / (strength * strength)
    patch_area = float(patch_size * patch_size)

    num = np.zeros((h_img, w_img), dtype=np.float64)
    den = np.zeros((h_img, w_img), dtype=np.float64)
    base = padded[pad - f : pad + f + h_img, pad - f : pad + f + w_img]
    for di in range(-t, t + 1):
        for dj in range(-t, t + 1):
            shifted = padded[
                pad + di - f : pad + di + f + h_img,
                pad + dj - f : pad + dj + f + w_img,
            ]
            d2 = _box_sum_valid((shifted - base) ** 2, patch_size) / patch_area
            w = np.exp(-d2 * inv_h2)
            num += w * padded[pad + di : pad + di + h_img, pad + dj : pad + dj + w_img]
            den += w
    out = np.clip(num / den, 0.0, 1.0).astype(np.float32)
    return GraySlice(out, slc.sample_id, slc.slice_index)


_LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


def estimate_noise_sigma(pixels: np.ndarray) -> float:
    """Noise level via median absolute deviation of the image Laplacian.

    For i.i.d. noise the Laplacian response has variance 20 * sigma^2, and
    MAD / 0.6745 estimates its standard deviation robustly.
    """
    lap = ndimage.convolve(pixels.astype(np.float64), _LAPLACIAN, mode="reflect")
    mad = np.median(np.abs(lap - np.median(lap)))
    return float(mad / 0.6745 / np.sqrt(20.0))


# ---------------------------------------------------------------------------
# multiscale pixel features

def bfe(slc: GraySlice, cfg: BfeConfig = BfeConfig()) -> FeatureMap:
    """15-channel multiscale feature map of one slice.

    Channel layout, fixed: for each scale sigma in ``cfg.scales`` (in order)
    the triple (smoothed intensity, gradient magnitude, smaller structure-
    tensor eigenvalue).  All kernels use reflect padding.
    """
    img = slc.pixels.astype(np.float64)
    if not np.all(np.isfinite(img)):
        raise ValueError("input contains non-finite values")
    channels = []
    for sigma in cfg.scales:
        smooth = ndimage.gaussian_filter(img, sigma, mode="reflect")
        gy = ndimage.gaussian_filter(img, sigma, order=(1, 0), mode="reflect")
        gx = ndimage.gaussian_filter(img, sigma, order=(0, 1), mode="reflect")
        grad = np.hypot(gx, gy)
        # structure tensor smoothed at the same scale; the smaller eigenvalue
        # responds to corners/texture rather than straight edges
        jxx = ndimage.gaussian_filter(gx * gx, sigma, mode="reflect")
        jyy = ndimage.gaussian_filter(gy * gy, sigma, mode="reflect")
        jxy = ndimage.gaussian_filter(gx * gy, sigma, mode="reflect")
        half_trace = 0.5 * (jxx + jyy)
        root = np.sqrt(np.maximum((0.5 * (jxx - jyy)) ** 2 + jxy**2, 0.0))
        small_eig = np.maximum(half_trace - root, 0.0)
        channels.extend([smooth, grad, small_eig])
    values = np.stack(channels, axis=-1).astype(np.float32)
    return FeatureMap(values, extractor="bfe", source=slc.sample_id)


# ---------------------------------------------------------------------------
# augmentation

def slice_rng(seed: int, sample_id: str, slice_index: int, epoch: int = 0) -> np.random.Generator:
    """Per-slice generator so parallel slice order never changes results."""
    return np.random.default_rng(
        [seed, zlib.crc32(sample_id.encode()), slice_index, epoch]
    )


def augment(
    slc: GraySlice,
    mask: LabelMask | None,
    cfg: AugmentConfig,
    rng: np.random.Generator | None = None,
) -> tuple[GraySlice, LabelMask | None]:
    """Crop, upsample, flip and jitter one slice (and its mask, if any).

    Geometric operations hit slice and mask identically; photometric jitter
    touches the slice only.  The mask is resampled with nearest-neighbor so
    no new class indices appear.  Pass a generator from :func:`slice_rng`
    for parallel-safe determinism; the draw order is fixed regardless of
    ``mask`` being present.
    """
    h_img, w_img = slc.shape
    cs = cfg.crop_size
    if h_img < cs or w_img < cs:
        raise ValueError(f"slice {slc.shape} smaller than crop size {cs}")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)

    if cfg.crop_mode == "random":
        top = int(rng.integers(0, h_img - cs + 1))
        left = int(rng.integers(0, w_img - cs + 1))
    else:
        top, left = (h_img - cs) // 2, (w_img - cs) // 2
    flip_h = rng.random() < cfg.flip_h_prob
    flip_v = rng.random() < cfg.flip_v_prob
    contrast = rng.uniform(*cfg.contrast_range)
    brightness = rng.uniform(*cfg.brightness_range)
    gamma = rng.uniform(*cfg.gamma_range)

    img = slc.pixels[top : top + cs, left : left + cs]
    lab = mask.labels[top : top + cs, left : left + cs] if mask is not None else None

    out_hw = (cfg.upsample_size, cfg.upsample_size)
    img = resize_bilinear(img, out_hw)
    if lab is not None:
        lab = resize_nearest(lab, out_hw)

    if flip_h:
        img = img[:, ::-1]
        lab = lab[:, ::-1] if lab is not None else None
    if flip_v:
        img = img[::-1, :]
        lab = lab[::-1, :] if lab is not None else None

    mean = img.mean()
    img = mean + (img - mean) * contrast
    img = np.clip(img * brightness, 0.0, 1.0)
    img = np.clip(img, 0.0, 1.0) ** gamma

    out_slice = GraySlice(np.ascontiguousarray(img, dtype=np.float32),
                          slc.sample_id, slc.slice_index)
    out_mask = None
    if lab is not None:
        out_mask = LabelMask(np.ascontiguousarray(lab), mask.palette)
    return out_slice, out_mask
