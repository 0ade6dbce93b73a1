"""Shared fixtures: synthetic camera rigs, textured rasters, on-disk datasets."""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import pytest

from viewseq.dataset import (
    FrameRecord,
    MultiViewSet,
    RasterImage,
    derive_geometry,
    save_image_png,
)
from viewseq.orb import DescriptorSet, Keypoint, gaussian_blur


def look_at_matrix(center, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """Camera-to-world matrix for a camera at `center` whose z-axis points from
    the target toward the camera (Blender-style convention)."""
    center = np.asarray(center, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    z = center - target
    z = z / np.linalg.norm(z)
    x = np.cross(np.asarray(up, dtype=np.float64), z)
    if np.linalg.norm(x) < 1e-12:
        x = np.cross((1.0, 0.0, 0.0), z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    m = np.eye(4)
    m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = x, y, z, center
    return m


def ring_set(angles_deg, radius=4.0, z=0.0) -> MultiViewSet:
    """Cameras on a circle in the z-plane, all looking at the origin."""
    frames = []
    for i, a in enumerate(angles_deg):
        t = math.radians(float(a))
        c = (radius * math.cos(t), radius * math.sin(t), z)
        frames.append(FrameRecord(i, None, derive_geometry(look_at_matrix(c))))
    return MultiViewSet(frames, scene_name="ring")


def translation_set(xs) -> MultiViewSet:
    """Identity-rotation cameras at x positions `xs`."""
    frames = []
    for i, x in enumerate(xs):
        m = np.eye(4)
        m[0, 3] = float(x)
        frames.append(FrameRecord(i, None, derive_geometry(m)))
    return MultiViewSet(frames, scene_name="line")


def random_rig(rng: np.random.Generator, n: int, radius=(2.0, 6.0)) -> MultiViewSet:
    """Cameras at random positions on a spherical shell, looking at the origin."""
    frames = []
    for i in range(n):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        c = direction * rng.uniform(*radius)
        frames.append(FrameRecord(i, None, derive_geometry(look_at_matrix(c))))
    return MultiViewSet(frames, scene_name="random-rig")


def textured_raster(rng: np.random.Generator, width: int, height: int, channels: int = 3) -> RasterImage:
    """Smooth random texture with full-range contrast."""
    chans = []
    for _ in range(channels):
        layer = gaussian_blur(rng.random((height, width)), 1.0)
        lo, hi = layer.min(), layer.max()
        chans.append((layer - lo) / (hi - lo) if hi > lo else layer)
    return RasterImage(np.stack(chans, axis=2))


def random_descriptor_set(rng: np.random.Generator, frame_id: int, n: int) -> DescriptorSet:
    bits = rng.integers(0, 2, size=(n, 256)).astype(np.uint8)
    descs = np.packbits(bits, axis=1)
    kps = [Keypoint(x=float(i), y=float(i), score=1.0) for i in range(n)]
    return DescriptorSet(frame_id=frame_id, keypoints=kps, descriptors=descs)


def write_synthetic_dataset(
    out_dir: Path,
    n_frames: int,
    size: int,
    *,
    seed: int = 1234,
    arc_deg: float = 140.0,
    alpha: bool = False,
) -> Path:
    """Write PNG frames + a transforms.json manifest; cameras sit along an arc
    looking at the origin. Frames are overlapping crops of one shared scene
    texture, so neighboring views genuinely share visual content (feature
    matching has something to latch onto). Returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    shift = max(2, size // 8)
    panorama = textured_raster(rng, size + shift * (n_frames - 1), size,
                               channels=4 if alpha else 3)
    entries = []
    for i in range(n_frames):
        img = RasterImage(panorama.data[:, i * shift:i * shift + size, :])
        if alpha:
            data = img.data.copy()
            # opaque center, transparent border, like object captures
            yy, xx = np.mgrid[:size, :size]
            r = np.hypot(yy - size / 2, xx - size / 2)
            data[:, :, 3] = (r <= size * 0.4).astype(np.float64)
            img = RasterImage(data)
        name = f"r_{i}.png"
        save_image_png(img, out_dir / name)
        a = math.radians(arc_deg) * i / max(n_frames - 1, 1)
        c = (4.0 * math.cos(a), 4.0 * math.sin(a), 1.5)
        entries.append({
            "file_path": f"./{name}",
            "transform_matrix": look_at_matrix(c).tolist(),
        })
    manifest = out_dir / "transforms.json"
    manifest.write_text(json.dumps({"camera_angle_x": 0.6911112070083618, "frames": entries}, indent=2))
    return manifest


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240817)
