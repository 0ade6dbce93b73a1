"""Image fidelity metrics and evaluation-side loss arithmetic.

All functions are pure and operate on [0, 1] float rasters; PSNR and the SSIM
constants assume that dynamic range. SSIM is computed per channel over valid
(fully interior) 11x11 Gaussian windows and averaged across channels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .dataset import RasterImage
from .resample import bicubic_resample

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
PSNR_CAP_DB = 99.0  # sentinel used in tabular reports when images are identical


@dataclass(frozen=True)
class LossWeights:
    """lambda1 mixes L1 against D-SSIM; lambda_ren mixes the rendered-image
    loss against the sub-pixel loss."""

    lambda1: float = 0.2
    lambda_ren: float = 0.6

    def __post_init__(self) -> None:
        for name in ("lambda1", "lambda_ren"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


def _require_same_shape(a: RasterImage, b: RasterImage) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(f"image shapes differ: {a.data.shape} vs {b.data.shape}")


def l1(a: RasterImage, b: RasterImage) -> float:
    """Mean absolute difference over every element."""
    _require_same_shape(a, b)
    return float(np.mean(np.abs(a.data - b.data)))


def mse(a: RasterImage, b: RasterImage) -> float:
    _require_same_shape(a, b)
    d = a.data - b.data
    return float(np.mean(d * d))


def psnr(a: RasterImage, b: RasterImage) -> float:
    """Peak signal-to-noise ratio in dB on the [0, 1] range; +inf when identical."""
    m = mse(a, b)
    if m == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / m)


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    t = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def _windowed_valid(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable weighted local mean over fully interior windows."""
    n = len(k)
    rows = np.zeros((x.shape[0] - n + 1, x.shape[1]), dtype=np.float64)
    for i, kv in enumerate(k):
        rows += kv * x[i:i + rows.shape[0], :]
    out = np.zeros((rows.shape[0], x.shape[1] - n + 1), dtype=np.float64)
    for i, kv in enumerate(k):
        out += kv * rows[:, i:i + out.shape[1]]
    return out


def ssim(a: RasterImage, b: RasterImage) -> float:
    """Mean structural similarity over valid 11x11 Gaussian windows (sigma 1.5),
    per channel, averaged across channels. Result lies in [-1, 1] and equals 1
    exactly for identical inputs."""
    _require_same_shape(a, b)
    if min(a.height, a.width) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW} pixels on each side")
    k = _gaussian_window()
    per_channel = []
    for c in range(a.channels):
        x = a.data[:, :, c]
        y = b.data[:, :, c]
        mu_x = _windowed_valid(x, k)
        mu_y = _windowed_valid(y, k)
        var_x = _windowed_valid(x * x, k) - mu_x * mu_x
        var_y = _windowed_valid(y * y, k) - mu_y * mu_y
        cov = _windowed_valid(x * y, k) - mu_x * mu_y
        num = (2.0 * mu_x * mu_y + SSIM_C1) * (2.0 * cov + SSIM_C2)
        den = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (var_x + var_y + SSIM_C2)
        per_channel.append(float(np.mean(num / den)))
    return float(np.mean(per_channel))


def d_ssim(a: RasterImage, b: RasterImage) -> float:
    """Structural dissimilarity, 1 - SSIM."""
    return 1.0 - ssim(a, b)


def render_loss(rendered: RasterImage, target: RasterImage, weights: LossWeights, *,
                l1_fn: Callable[[RasterImage, RasterImage], float] = l1,
                d_ssim_fn: Callable[[RasterImage, RasterImage], float] = d_ssim) -> float:
    """(1 - lambda1) * L1 + lambda1 * D-SSIM between a render and its target."""
    return (1.0 - weights.lambda1) * l1_fn(rendered, target) + weights.lambda1 * d_ssim_fn(rendered, target)


def subpixel_loss(rendered_hr: RasterImage, lr_gt: RasterImage, weights: LossWeights) -> float:
    """render_loss between the bicubic-downsampled render and the LR ground truth.

    The render's dimensions must be an identical integer multiple of the LR
    ground truth's on both axes.
    """
    if rendered_hr.height % lr_gt.height or rendered_hr.width % lr_gt.width:
        raise ValueError(
            f"render {rendered_hr.width}x{rendered_hr.height} is not an integer multiple "
            f"of LR {lr_gt.width}x{lr_gt.height}"
        )
    if rendered_hr.height // lr_gt.height != rendered_hr.width // lr_gt.width:
        raise ValueError("render/LR scale factor differs between axes")
    down = bicubic_resample(rendered_hr, lr_gt.width, lr_gt.height)
    return render_loss(down, lr_gt, weights)


def total_loss(ren: float, sp: float, weights: LossWeights) -> float:
    """lambda_ren * rendered-image loss + (1 - lambda_ren) * sub-pixel loss."""
    return weights.lambda_ren * ren + (1.0 - weights.lambda_ren) * sp
