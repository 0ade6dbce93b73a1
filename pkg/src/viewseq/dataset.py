"""Posed multi-view image datasets: manifest parsing, camera geometry, PNG I/O."""

from __future__ import annotations

import io
import json
import os
import tempfile
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image


class DatasetError(ValueError):
    """A pose manifest or image file violates the dataset contract."""


BOTTOM_ROW_TOL = 1e-6
ORTHONORMAL_TOL = 1e-6


# ---------------------------------------------------------------------------
# Atomic file helpers (readers must never observe partial writes)
# ---------------------------------------------------------------------------

def atomic_write_bytes(path: Path, payload: bytes) -> None:
    """Write file contents via a temp file in the same directory + rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def write_json_atomic(path: Path, doc: object) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    atomic_write_bytes(Path(path), text.encode("utf-8"))


def read_json(path: Path) -> object:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# Core types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RasterImage:
    """Image raster with float values in [0, 1], shape (height, width, channels).

    Channels is 1 (gray), 3 (RGB) or 4 (RGBA). 8-bit quantization happens only
    at file I/O; everything in between stays real-valued.
    """

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3, 4):
            raise ValueError(f"raster must be (h, w, c) with c in (1, 3, 4), got {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError("raster must be non-empty")
        if not np.isfinite(arr).all():
            raise ValueError("raster values must be finite")
        if float(arr.min()) < 0.0 or float(arr.max()) > 1.0:
            raise ValueError("raster values must lie in [0, 1]")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class CameraPose:
    """Camera-to-world transform with derived center and unit viewing axis."""

    transform: np.ndarray  # (4, 4)
    center: np.ndarray     # (3,) translation column
    view_axis: np.ndarray  # (3,) normalized z-axis of the rotation block


def derive_geometry(transform: np.ndarray) -> CameraPose:
    """Extract the camera center and viewing axis from a 4x4 camera-to-world matrix.

    The center is the translation column; the viewing axis is the normalized
    third column of the rotation block. A rotation block that is not
    orthonormal within 1e-6 only warns, since estimated poses routinely drift.
    """
    mat = np.array(transform, dtype=np.float64, copy=True)
    if mat.shape != (4, 4):
        raise DatasetError(f"pose transform must be 4x4, got shape {mat.shape}")
    if not np.allclose(mat[3], (0.0, 0.0, 0.0, 1.0), rtol=0.0, atol=BOTTOM_ROW_TOL):
        raise DatasetError(f"pose bottom row must be (0, 0, 0, 1), got {mat[3].tolist()}")
    rot = mat[:3, :3]
    z = rot[:, 2]
    norm = float(np.linalg.norm(z))
    if norm == 0.0:
        raise DatasetError("degenerate rotation: zero-length z column")
    gram = rot.T @ rot
    if float(np.abs(gram - np.eye(3)).max()) > ORTHONORMAL_TOL:
        warnings.warn("pose rotation block is not orthonormal within 1e-6", stacklevel=2)
    return CameraPose(transform=mat, center=mat[:3, 3].copy(), view_axis=z / norm)


@dataclass
class FrameRecord:
    """One posed image. Pixels decode lazily from source_path on first access."""

    frame_id: int
    source_path: Optional[Path]
    pose: CameraPose
    image: Optional[RasterImage] = None
    manifest_path: Optional[str] = None  # raw file_path string as it appeared in the manifest

    def load_image(self) -> RasterImage:
        if self.image is None:
            if self.source_path is None:
                raise DatasetError(f"frame {self.frame_id} has no image source")
            self.image = load_image_png(self.source_path)
        return self.image


@dataclass
class MultiViewSet:
    """Ordered collection of posed frames; treated as immutable after load."""

    frames: list
    scene_name: str = "scene"
    scale_factor: int = 4
    camera_angle_x: Optional[float] = None

    def __post_init__(self) -> None:
        if not self.frames:
            raise DatasetError("empty dataset")
        ids = [f.frame_id for f in self.frames]
        if len(set(ids)) != len(ids):
            raise DatasetError("duplicate frame_id in dataset")
        if int(self.scale_factor) < 1:
            raise DatasetError("scale_factor must be a positive integer")

    def __len__(self) -> int:
        return len(self.frames)

    def frame_ids(self) -> list:
        return [f.frame_id for f in self.frames]

    def by_id(self, frame_id: int) -> FrameRecord:
        for f in self.frames:
            if f.frame_id == frame_id:
                return f
        raise KeyError(f"no frame with id {frame_id}")

    def poses(self) -> dict:
        return {f.frame_id: f.pose for f in self.frames}


# ---------------------------------------------------------------------------
# Manifest I/O (NeRF-synthetic style transforms.json)
# ---------------------------------------------------------------------------

def resolve_frame_path(base_dir: Path, raw: str) -> Path:
    """Resolve a manifest file_path; a missing extension implies .png."""
    p = Path(raw)
    if p.suffix == "":
        p = p.with_name(p.name + ".png")
    return (Path(base_dir) / p).resolve()


def load_pose_manifest(
    path: Path,
    *,
    scene_name: Optional[str] = None,
    scale_factor: int = 4,
    require_images: bool = True,
) -> MultiViewSet:
    """Parse a transforms.json-style pose manifest into a MultiViewSet.

    Frame ids follow manifest order starting at 0 and transforms are stored
    exactly as read. Pixels are not decoded here; FrameRecord.load_image pulls
    them on demand.
    """
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"manifest not found: {path}")
    try:
        doc = read_json(path)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"manifest does not parse: {path}: {exc}") from exc
    if not isinstance(doc, dict) or "frames" not in doc:
        raise DatasetError(f"manifest missing 'frames' list: {path}")
    entries = doc["frames"]
    if not isinstance(entries, list):
        raise DatasetError(f"manifest 'frames' must be a list: {path}")
    if len(entries) == 0:
        raise DatasetError("empty dataset")

    frames = []
    seen: dict = {}
    for idx, entry in enumerate(entries):
        if not isinstance(entry, dict) or not isinstance(entry.get("file_path"), str):
            raise DatasetError(f"frame {idx}: missing file_path")
        raw = entry["file_path"]
        if raw in seen:
            raise DatasetError(
                f"frame {idx}: duplicate file reference {raw!r} (also used by frame {seen[raw]})"
            )
        seen[raw] = idx
        try:
            mat = np.asarray(entry["transform_matrix"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"frame {idx} ({raw}): malformed matrix: {exc}") from exc
        if mat.shape != (4, 4):
            raise DatasetError(f"frame {idx} ({raw}): malformed matrix: shape {mat.shape} is not 4x4")
        src = resolve_frame_path(path.parent, raw)
        if require_images and not src.is_file():
            raise DatasetError(f"frame {idx} ({raw}): image file not found: {src}")
        frames.append(
            FrameRecord(
                frame_id=idx,
                source_path=src,
                pose=derive_geometry(mat),
                manifest_path=raw,
            )
        )

    angle = doc.get("camera_angle_x")
    return MultiViewSet(
        frames=frames,
        scene_name=scene_name or path.parent.name or "scene",
        scale_factor=scale_factor,
        camera_angle_x=float(angle) if angle is not None else None,
    )


def write_pose_manifest(
    mvs: MultiViewSet,
    path: Path,
    *,
    file_paths: Optional[Sequence[str]] = None,
    width: Optional[int] = None,
    height: Optional[int] = None,
    extra: Optional[dict] = None,
) -> None:
    """Write a transforms.json-style manifest mirroring the set's poses.

    Transforms are serialized via repr so a load/write/load cycle reproduces
    them bit for bit. file_paths overrides the per-frame file_path entries
    (defaults to each frame's original manifest path).
    """
    doc: dict = {}
    if mvs.camera_angle_x is not None:
        doc["camera_angle_x"] = mvs.camera_angle_x
    if width is not None:
        doc["width"] = int(width)
    if height is not None:
        doc["height"] = int(height)
    entries = []
    for i, fr in enumerate(mvs.frames):
        if file_paths is not None:
            fp = file_paths[i]
        elif fr.manifest_path is not None:
            fp = fr.manifest_path
        else:
            fp = f"frame_{fr.frame_id:05d}.png"
        entries.append({"file_path": fp, "transform_matrix": fr.pose.transform.tolist()})
    doc["frames"] = entries
    if extra:
        doc.update(extra)
    write_json_atomic(path, doc)


# ---------------------------------------------------------------------------
# Pixel I/O and compositing
# ---------------------------------------------------------------------------

def load_image_png(path: Path) -> RasterImage:
    """Decode an 8-bit PNG into a [0, 1] float raster, keeping gray/RGB/RGBA."""
    with Image.open(path) as im:
        if im.mode == "L":
            arr = np.asarray(im)[:, :, None]
        elif im.mode == "RGB":
            arr = np.asarray(im)
        elif im.mode == "RGBA":
            arr = np.asarray(im)
        elif im.mode in ("LA", "PA") or (im.mode == "P" and "transparency" in im.info):
            arr = np.asarray(im.convert("RGBA"))
        else:
            arr = np.asarray(im.convert("RGB"))
    return RasterImage(arr.astype(np.float64) / 255.0)


def save_image_png(img: RasterImage, path: Path) -> None:
    """Quantize to 8 bits and write a PNG atomically."""
    arr = np.rint(np.clip(img.data, 0.0, 1.0) * 255.0).astype(np.uint8)
    if img.channels == 1:
        pil = Image.fromarray(arr[:, :, 0], mode="L")
    elif img.channels == 3:
        pil = Image.fromarray(arr, mode="RGB")
    else:
        pil = Image.fromarray(arr, mode="RGBA")
    buf = io.BytesIO()
    pil.save(buf, format="PNG")
    atomic_write_bytes(Path(path), buf.getvalue())


def read_png_size(path: Path) -> tuple:
    """(width, height) from the PNG header without decoding pixel data."""
    with Image.open(path) as im:
        return im.size


def composite_background(img: RasterImage, background=0.0) -> RasterImage:
    """Alpha-composite an RGBA raster onto a constant background, yielding RGB.

    A 3-channel input passes through unchanged with a warning; background may
    be a scalar or a per-channel triple in [0, 1].
    """
    if img.channels == 3:
        warnings.warn("composite_background: input has no alpha channel; passing through", stacklevel=2)
        return img
    if img.channels != 4:
        raise ValueError(f"composite_background expects 4 channels, got {img.channels}")
    bg = np.asarray(background, dtype=np.float64).reshape(-1)
    if bg.size == 1:
        bg = np.repeat(bg, 3)
    if bg.size != 3:
        raise ValueError("background must be a scalar or a 3-vector")
    if float(bg.min()) < 0.0 or float(bg.max()) > 1.0:
        raise ValueError("background values must lie in [0, 1]")
    rgb = img.data[:, :, :3]
    alpha = img.data[:, :, 3:4]
    return RasterImage(rgb * alpha + bg[None, None, :] * (1.0 - alpha))
