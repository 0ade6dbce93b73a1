"""Bicubic resampling built on the a = -0.5 piecewise-cubic convolution kernel."""

from __future__ import annotations

import numpy as np

from .dataset import RasterImage

KERNEL_A = -0.5


def cubic_kernel(x, a: float = KERNEL_A) -> np.ndarray:
    """Catmull-Rom-family cubic convolution weight; 1 at 0, 0 for |x| >= 2."""
    ax = np.abs(np.asarray(x, dtype=np.float64))
    out = np.zeros_like(ax)
    inner = ax <= 1.0
    outer = (ax > 1.0) & (ax < 2.0)
    xi = ax[inner]
    out[inner] = ((a + 2.0) * xi - (a + 3.0)) * xi * xi + 1.0
    xo = ax[outer]
    out[outer] = a * (xo * (xo * (xo - 5.0) + 8.0) - 4.0)
    return out


def axis_weights(in_size: int, out_size: int, *, antialias: bool = True) -> np.ndarray:
    """Dense (out_size, in_size) matrix of normalized bicubic sample weights.

    Source coordinates follow the half-pixel-center convention
    src = (dst + 0.5) * in/out - 0.5. When downsampling with antialias on, the
    kernel support widens by the scale ratio, the convention used to build LR
    training data for super-resolution models. Taps beyond the border clamp to
    the edge pixel, and each row is normalized so constants survive exactly.
    """
    if in_size < 1 or out_size < 1:
        raise ValueError("sizes must be >= 1")
    scale = in_size / out_size
    support = max(scale, 1.0) if antialias else 1.0
    radius = 2.0 * support
    weights = np.zeros((out_size, in_size), dtype=np.float64)
    for o in range(out_size):
        c = (o + 0.5) * scale - 0.5
        lo = int(np.ceil(c - radius))
        hi = int(np.floor(c + radius))
        taps = np.arange(lo, hi + 1)
        w = cubic_kernel((taps - c) / support)
        np.add.at(weights[o], np.clip(taps, 0, in_size - 1), w)
        weights[o] /= weights[o].sum()
    return weights


def resample_array(arr: np.ndarray, out_w: int, out_h: int, *, antialias: bool = True) -> np.ndarray:
    """Bicubic-resample an (h, w) or (h, w, c) float array to (out_h, out_w)."""
    if out_w < 1 or out_h < 1:
        raise ValueError(f"target size must be >= 1, got {out_w}x{out_h}")
    a = np.asarray(arr, dtype=np.float64)
    squeeze = a.ndim == 2
    if squeeze:
        a = a[:, :, None]
    if a.ndim != 3:
        raise ValueError(f"expected a 2D or 3D array, got shape {a.shape}")
    wy = axis_weights(a.shape[0], out_h, antialias=antialias)
    wx = axis_weights(a.shape[1], out_w, antialias=antialias)
    out = np.einsum("Yh,hwc,Xw->YXc", wy, a, wx, optimize=True)
    return out[:, :, 0] if squeeze else out


def bicubic_resample(img: RasterImage, out_w: int, out_h: int, *, antialias: bool = True) -> RasterImage:
    """Resample a raster to (out_w, out_h); all channels kept, output clamped to [0, 1]."""
    out = resample_array(img.data, out_w, out_h, antialias=antialias)
    return RasterImage(np.clip(out, 0.0, 1.0))
