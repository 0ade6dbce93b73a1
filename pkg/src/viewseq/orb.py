"""ORB features: FAST corners, intensity-centroid orientation, steered binary descriptors.

Everything here is a pure function of (image, config); repeated extraction is
byte-identical, which the ordering stage relies on for reproducible plans.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from .dataset import RasterImage, atomic_write_bytes, composite_background
from .orb_pattern import BRIEF_PATTERN, PATTERN_RADIUS, PATTERN_VERSION
from .resample import resample_array

DESCRIPTOR_BITS = 256
DESCRIPTOR_BYTES = 32
CACHE_VERSION = "orb-cache-v1"

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float64)

# Bresenham circle of radius 3 in (dy, dx) order; the segment test walks it
# contiguously.
FAST_CIRCLE = (
    (-3, 0), (-3, 1), (-2, 2), (-1, 3), (0, 3), (1, 3), (2, 2), (3, 1),
    (3, 0), (3, -1), (2, -2), (1, -3), (0, -3), (-1, -3), (-2, -2), (-3, -1),
)
FAST_ARC = 9
FAST_BORDER = 3


@dataclass(frozen=True)
class OrbConfig:
    max_features: int = 500
    fast_threshold: float = 0.08      # fraction of the full intensity scale
    n_levels: int = 8
    level_scale: float = 1.2
    orientation_radius: int = 15
    blur_sigma: float = 2.0
    background: object = 0.0          # scalar or RGB triple for compositing RGBA inputs

    def __post_init__(self) -> None:
        if isinstance(self.background, (list, tuple)):
            object.__setattr__(self, "background", tuple(float(v) for v in self.background))
        else:
            object.__setattr__(self, "background", float(self.background))

    def cache_key(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True) + CACHE_VERSION + PATTERN_VERSION
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    score: float
    angle: float = 0.0  # radians in [0, 2*pi)
    level: int = 0


@dataclass
class DescriptorSet:
    """Keypoints plus packed 256-bit descriptors, one 32-byte row per keypoint."""

    frame_id: int
    keypoints: List[Keypoint]
    descriptors: np.ndarray  # (n, 32) uint8

    def __post_init__(self) -> None:
        desc = np.asarray(self.descriptors, dtype=np.uint8)
        if desc.ndim != 2 or desc.shape[1] != DESCRIPTOR_BYTES:
            desc = desc.reshape(-1, DESCRIPTOR_BYTES)
        if desc.shape[0] != len(self.keypoints):
            raise ValueError(
                f"descriptor rows ({desc.shape[0]}) must match keypoints ({len(self.keypoints)})"
            )
        self.descriptors = desc

    def __len__(self) -> int:
        return len(self.keypoints)


def to_grayscale(img: RasterImage, background=0.0) -> RasterImage:
    """Single-channel luma (0.299 R + 0.587 G + 0.114 B); RGBA is composited first."""
    if img.channels == 1:
        return img
    if img.channels == 4:
        img = composite_background(img, background)
    luma = img.data[:, :, :3] @ GRAY_WEIGHTS
    return RasterImage(np.clip(luma, 0.0, 1.0)[:, :, None])


def gaussian_blur(arr: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with edge replication, kernel radius ceil(3*sigma)."""
    if sigma <= 0:
        return np.asarray(arr, dtype=np.float64).copy()
    r = max(1, int(math.ceil(3.0 * sigma)))
    t = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    k /= k.sum()
    a = np.asarray(arr, dtype=np.float64)
    padded = np.pad(a, ((r, r), (0, 0)), mode="edge")
    rows = np.zeros_like(a)
    for i, kv in enumerate(k):
        rows += kv * padded[i:i + a.shape[0], :]
    padded = np.pad(rows, ((0, 0), (r, r)), mode="edge")
    out = np.zeros_like(a)
    for i, kv in enumerate(k):
        out += kv * padded[:, i:i + a.shape[1]]
    return out


def _has_arc(mask: np.ndarray) -> np.ndarray:
    """True where some 9-long contiguous run around the 16-point circle holds."""
    acc = np.zeros(mask.shape[1:], dtype=bool)
    for start in range(len(FAST_CIRCLE)):
        run = mask[start].copy()
        for step in range(1, FAST_ARC):
            run &= mask[(start + step) % len(FAST_CIRCLE)]
            if not run.any():
                break
        acc |= run
    return acc


def _local_maxima(score: np.ndarray) -> np.ndarray:
    """3x3 non-maximum suppression; score plateaus resolve to the first pixel
    in scan order (strictly greater than earlier neighbors, >= later ones)."""
    pad = np.pad(score, 1, constant_values=-np.inf)
    h, w = score.shape
    keep = np.ones_like(score, dtype=bool)
    earlier = ((-1, -1), (-1, 0), (-1, 1), (0, -1))
    later = ((0, 1), (1, -1), (1, 0), (1, 1))
    for dy, dx in earlier:
        keep &= score > pad[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
    for dy, dx in later:
        keep &= score >= pad[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
    return keep


def detect_fast(img: RasterImage, intensity_threshold: float) -> List[Keypoint]:
    """FAST-9 segment-test corners with 3x3 non-maximum suppression.

    A pixel is a corner when at least 9 contiguous pixels on the radius-3
    circle are all brighter than p + t or all darker than p - t. The corner
    score is the total absolute contrast beyond the threshold over the circle.
    """
    if img.channels != 1:
        raise ValueError("detect_fast expects a grayscale raster")
    if not 0.0 < intensity_threshold < 1.0:
        raise ValueError("intensity_threshold must lie in (0, 1)")
    g = img.data[:, :, 0]
    h, w = g.shape
    b = FAST_BORDER
    if h < 2 * b + 1 or w < 2 * b + 1:
        return []
    center = g[b:h - b, b:w - b]
    ring = np.stack([g[b + dy:h - b + dy, b + dx:w - b + dx] for dy, dx in FAST_CIRCLE])
    t = intensity_threshold
    corner = _has_arc(ring > center + t) | _has_arc(ring < center - t)
    if not corner.any():
        return []
    score = np.maximum(np.abs(ring - center) - t, 0.0).sum(axis=0)
    score[~corner] = -1.0
    keep = corner & _local_maxima(score)
    ys, xs = np.nonzero(keep)
    return [
        Keypoint(x=float(x + b), y=float(y + b), score=float(score[y, x]))
        for y, x in zip(ys.tolist(), xs.tolist())
    ]


_DISC_CACHE: dict = {}


def _disc_offsets(radius: int):
    got = _DISC_CACHE.get(radius)
    if got is None:
        ys, xs = np.mgrid[-radius:radius + 1, -radius:radius + 1]
        inside = ys * ys + xs * xs <= radius * radius
        got = (ys[inside].astype(np.float64), xs[inside].astype(np.float64))
        _DISC_CACHE[radius] = got
    return got


def orientation(img: RasterImage, kp: Keypoint, radius: int = 15) -> float:
    """Intensity-centroid angle atan2(m01, m10) over a circular patch, in [0, 2*pi).

    Patch offsets falling outside the image are skipped; a radially symmetric
    patch has vanishing first moments and yields 0 by convention.
    """
    g = img.data[:, :, 0]
    h, w = g.shape
    cy, cx = int(round(kp.y)), int(round(kp.x))
    ys, xs = _disc_offsets(int(radius))
    py = ys.astype(np.int64) + cy
    px = xs.astype(np.int64) + cx
    ok = (py >= 0) & (py < h) & (px >= 0) & (px < w)
    vals = g[py[ok], px[ok]]
    m10 = float(np.dot(xs[ok], vals))
    m01 = float(np.dot(ys[ok], vals))
    if abs(m10) < 1e-12 and abs(m01) < 1e-12:
        return 0.0
    return math.atan2(m01, m10) % (2.0 * math.pi)


def steered_brief(img: RasterImage, kp: Keypoint, pattern: np.ndarray = BRIEF_PATTERN) -> np.ndarray:
    """256-bit descriptor: bit b is 1 iff the smoothed intensity at the rotated
    first point of pattern row b is less than at the rotated second point.
    Ties emit 0, so a flat patch gives the all-zero descriptor. Returns the 32
    packed bytes.
    """
    g = img.data[:, :, 0]
    h, w = g.shape
    c = math.cos(kp.angle)
    s = math.sin(kp.angle)
    p = pattern.astype(np.float64)
    rx1 = np.rint(p[:, 0] * c - p[:, 1] * s + kp.x).astype(np.int64)
    ry1 = np.rint(p[:, 0] * s + p[:, 1] * c + kp.y).astype(np.int64)
    rx2 = np.rint(p[:, 2] * c - p[:, 3] * s + kp.x).astype(np.int64)
    ry2 = np.rint(p[:, 2] * s + p[:, 3] * c + kp.y).astype(np.int64)
    np.clip(rx1, 0, w - 1, out=rx1)
    np.clip(ry1, 0, h - 1, out=ry1)
    np.clip(rx2, 0, w - 1, out=rx2)
    np.clip(ry2, 0, h - 1, out=ry2)
    bits = g[ry1, rx1] < g[ry2, rx2]
    return np.packbits(bits)


def descriptor_margin(config: OrbConfig) -> int:
    """Border width inside which keypoints are dropped so every rotated pattern
    point and orientation tap stays in bounds."""
    return int(math.ceil(max(PATTERN_RADIUS + 1.0, float(config.orientation_radius), float(FAST_BORDER))))


def extract_orb(img: RasterImage, config: OrbConfig = OrbConfig(), *, frame_id: int = -1) -> DescriptorSet:
    """Multi-scale ORB extraction.

    Runs the FAST segment test per pyramid level, keeps the strongest
    max_features corners overall, then computes an orientation and a steered
    binary descriptor for each. Keypoint coordinates are reported at base
    resolution; descriptors are sampled from a Gaussian-smoothed copy of the
    level image.
    """
    gray = to_grayscale(img, config.background)
    base = gray.data[:, :, 0]
    margin = descriptor_margin(config)

    levels = []      # (raster, scale)
    candidates = []  # (level_index, keypoint at level coords)
    for lvl in range(config.n_levels):
        s = config.level_scale ** lvl
        lw = int(round(base.shape[1] / s))
        lh = int(round(base.shape[0] / s))
        if min(lw, lh) < 2 * margin + 1:
            break
        if lvl == 0:
            level = base
        else:
            level = np.clip(resample_array(base, lw, lh), 0.0, 1.0)
        raster = RasterImage(level[:, :, None])
        levels.append((raster, s))
        for kp in detect_fast(raster, config.fast_threshold):
            if margin <= kp.x < lw - margin and margin <= kp.y < lh - margin:
                candidates.append((lvl, kp))

    candidates.sort(key=lambda lk: (-lk[1].score, lk[0], lk[1].y, lk[1].x))
    chosen = candidates[: config.max_features]
    chosen.sort(key=lambda lk: (lk[0], lk[1].y, lk[1].x))

    blurred: dict = {}
    keypoints: List[Keypoint] = []
    rows = []
    for lvl, kp in chosen:
        raster, s = levels[lvl]
        if lvl not in blurred:
            smoothed = np.clip(gaussian_blur(raster.data[:, :, 0], config.blur_sigma), 0.0, 1.0)
            blurred[lvl] = RasterImage(smoothed[:, :, None])
        ang = orientation(raster, kp, config.orientation_radius)
        rows.append(steered_brief(blurred[lvl], replace(kp, angle=ang)))
        keypoints.append(Keypoint(x=kp.x * s, y=kp.y * s, score=kp.score, angle=ang, level=lvl))

    descriptors = np.vstack(rows) if rows else np.zeros((0, DESCRIPTOR_BYTES), dtype=np.uint8)
    return DescriptorSet(frame_id=frame_id, keypoints=keypoints, descriptors=descriptors)


# ---------------------------------------------------------------------------
# Optional per-frame descriptor cache (versioned, keyed by config hash)
# ---------------------------------------------------------------------------

def save_descriptors(path: Path, dset: DescriptorSet, config: OrbConfig) -> None:
    """Write a descriptor cache blob; load_descriptors only accepts it when the
    config hash still matches."""
    kp = np.array(
        [(k.x, k.y, k.score, k.angle, k.level) for k in dset.keypoints],
        dtype=np.float64,
    ).reshape(-1, 5)
    buf = io.BytesIO()
    np.savez(
        buf,
        version=np.str_(CACHE_VERSION),
        key=np.str_(config.cache_key()),
        frame_id=np.int64(dset.frame_id),
        keypoints=kp,
        descriptors=dset.descriptors,
    )
    atomic_write_bytes(Path(path), buf.getvalue())


def load_descriptors(path: Path, config: OrbConfig) -> Optional[DescriptorSet]:
    """Read a cached DescriptorSet; None when absent or keyed by another config."""
    path = Path(path)
    if not path.is_file():
        return None
    try:
        with np.load(path) as blob:
            if str(blob["version"]) != CACHE_VERSION or str(blob["key"]) != config.cache_key():
                return None
            kp_arr = blob["keypoints"]
            keypoints = [
                Keypoint(x=float(r[0]), y=float(r[1]), score=float(r[2]), angle=float(r[3]), level=int(r[4]))
                for r in kp_arr
            ]
            return DescriptorSet(
                frame_id=int(blob["frame_id"]),
                keypoints=keypoints,
                descriptors=blob["descriptors"].astype(np.uint8),
            )
    except (OSError, ValueError, KeyError):
        return None
