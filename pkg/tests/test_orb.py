"""Feature extraction checks against brute-force oracles."""

import math

import numpy as np
import pytest

from viewseq.dataset import RasterImage
from viewseq.orb import (
    DESCRIPTOR_BYTES,
    Keypoint,
    OrbConfig,
    descriptor_margin,
    detect_fast,
    extract_orb,
    gaussian_blur,
    load_descriptors,
    orientation,
    save_descriptors,
    steered_brief,
    to_grayscale,
)
from viewseq.orb_pattern import BRIEF_PATTERN, PATTERN_RADIUS
from viewseq.similarity import hamming

from conftest import textured_raster


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------

CIRCLE = [(0, 3), (1, 3), (2, 2), (3, 1), (3, 0), (3, -1), (2, -2), (1, -3),
          (0, -3), (-1, -3), (-2, -2), (-3, -1), (-3, 0), (-3, 1), (-2, 2), (-1, 3)]


def oracle_fast_corners(gray: np.ndarray, t: float) -> set:
    """All pixels passing the 9-contiguous segment test, checked by explicit
    run-walking over the doubled circle. Pre-NMS."""
    h, w = gray.shape
    corners = set()
    for y in range(3, h - 3):
        for x in range(3, w - 3):
            p = gray[y, x]
            ring = [gray[y + dy, x + dx] for dx, dy in CIRCLE]
            for mask in ([v > p + t for v in ring], [v < p - t for v in ring]):
                doubled = mask + mask
                run = 0
                best = 0
                for v in doubled:
                    run = run + 1 if v else 0
                    best = max(best, run)
                if best >= min(9 + len(mask), 16):  # cap: full circle counts once
                    corners.add((x, y))
                    break
                if best >= 9:
                    corners.add((x, y))
                    break
    return corners


def oracle_moments(gray: np.ndarray, cx: int, cy: int, radius: int):
    m10 = 0.0
    m01 = 0.0
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            if dx * dx + dy * dy <= radius * radius:
                yy, xx = cy + dy, cx + dx
                if 0 <= yy < gray.shape[0] and 0 <= xx < gray.shape[1]:
                    m10 += dx * gray[yy, xx]
                    m01 += dy * gray[yy, xx]
    return m10, m01


def rotate_nearest(arr: np.ndarray, theta: float, cx: float, cy: float) -> np.ndarray:
    """Rotate image content by theta about (cx, cy), nearest-neighbor sampling."""
    h, w = arr.shape
    ys, xs = np.mgrid[:h, :w].astype(float)
    x0 = xs - cx
    y0 = ys - cy
    c, s = math.cos(-theta), math.sin(-theta)
    sx = np.clip(np.rint(x0 * c - y0 * s + cx).astype(int), 0, w - 1)
    sy = np.clip(np.rint(x0 * s + y0 * c + cy).astype(int), 0, h - 1)
    return arr[sy, sx]


# ---------------------------------------------------------------------------
# Grayscale
# ---------------------------------------------------------------------------

def test_grayscale_white_and_green():
    white = RasterImage(np.ones((4, 4, 3)))
    assert to_grayscale(white).data[0, 0, 0] == pytest.approx(1.0, abs=1e-12)
    green = np.zeros((4, 4, 3))
    green[:, :, 1] = 1.0
    assert to_grayscale(RasterImage(green)).data[0, 0, 0] == pytest.approx(0.587, abs=1e-15)


def test_grayscale_matches_weighted_sum_oracle(rng):
    img = textured_raster(rng, 9, 7)
    got = to_grayscale(img).data[:, :, 0]
    want = (0.299 * img.data[:, :, 0] + 0.587 * img.data[:, :, 1] + 0.114 * img.data[:, :, 2])
    assert np.abs(got - np.clip(want, 0, 1)).max() < 1e-9


def test_grayscale_composites_alpha_first(rng):
    rgba = rng.random((6, 6, 4))
    rgba[:, :, 3] = 0.0
    # fully transparent over black background -> black -> zero luma
    out = to_grayscale(RasterImage(rgba), background=0.0)
    assert np.abs(out.data).max() == 0.0


# ---------------------------------------------------------------------------
# FAST
# ---------------------------------------------------------------------------

def test_fast_constant_image_empty():
    assert detect_fast(RasterImage(np.full((32, 32, 1), 0.5)), 0.1) == []


def test_fast_bright_dot_found_and_in_oracle():
    img = np.zeros((32, 32))
    yy, xx = np.mgrid[:32, :32]
    img[(yy - 16) ** 2 + (xx - 16) ** 2 <= 6.25] = 1.0
    kps = detect_fast(RasterImage(img[:, :, None]), 0.1)
    assert len(kps) >= 1
    oracle = oracle_fast_corners(img, 0.1)
    assert oracle, "oracle must agree something is there"
    for kp in kps:
        assert (int(kp.x), int(kp.y)) in oracle
        assert math.hypot(kp.x - 16, kp.y - 16) <= 5.0


def test_fast_single_square_corners():
    sq = np.zeros((32, 32))
    sq[10:22, 10:22] = 1.0
    kps = detect_fast(RasterImage(sq[:, :, None]), 0.1)
    oracle = oracle_fast_corners(sq, 0.1)
    assert sorted((kp.x, kp.y) for kp in kps) == [(10, 10), (10, 21), (21, 10), (21, 21)]
    for kp in kps:
        assert (int(kp.x), int(kp.y)) in oracle


def test_fast_checkerboard_corners():
    # An ideal binary X-junction never has a 9-contiguous arc (the circle
    # alternates through four quadrants), and the brute-force oracle confirms
    # the segment test finds nothing on it. A lightly anti-aliased board, as
    # any real capture would be, fires exactly at the grid intersections.
    n = 40
    yy, xx = np.mgrid[:n, :n]
    board = (((yy // 8) + (xx // 8)) % 2).astype(float)
    assert oracle_fast_corners(board, 0.1) == set()
    assert detect_fast(RasterImage(board[:, :, None]), 0.1) == []

    soft = np.clip(gaussian_blur(board, 0.8), 0.0, 1.0)
    kps = detect_fast(RasterImage(soft[:, :, None]), 0.1)
    assert kps
    oracle = oracle_fast_corners(soft, 0.1)
    for kp in kps:
        assert (int(kp.x), int(kp.y)) in oracle
        # near a grid intersection, never deep inside a square
        dx = min(kp.x % 8, 8 - kp.x % 8)
        dy = min(kp.y % 8, 8 - kp.y % 8)
        assert max(dx, dy) <= 2.0


def test_fast_detection_is_subset_of_oracle(rng):
    img = textured_raster(rng, 24, 24, channels=1)
    arr = img.data[:, :, 0]
    kps = detect_fast(img, 0.05)
    oracle = oracle_fast_corners(arr, 0.05)
    for kp in kps:
        assert (int(kp.x), int(kp.y)) in oracle


def test_fast_nms_no_adjacent_keypoints(rng):
    img = textured_raster(rng, 32, 32, channels=1)
    kps = detect_fast(img, 0.04)
    pts = [(kp.x, kp.y) for kp in kps]
    for i in range(len(pts)):
        for j in range(i + 1, len(pts)):
            cheb = max(abs(pts[i][0] - pts[j][0]), abs(pts[i][1] - pts[j][1]))
            assert cheb >= 2


def test_fast_threshold_validation():
    img = RasterImage(np.zeros((16, 16, 1)))
    with pytest.raises(ValueError):
        detect_fast(img, 0.0)
    with pytest.raises(ValueError):
        detect_fast(img, 1.0)


# ---------------------------------------------------------------------------
# Orientation
# ---------------------------------------------------------------------------

def test_orientation_symmetric_patch_is_zero():
    yy, xx = np.mgrid[:41, :41]
    sym = np.zeros((41, 41))
    sym[(yy - 20) ** 2 + (xx - 20) ** 2 <= 100] = 0.7
    kp = Keypoint(x=20.0, y=20.0, score=1.0)
    assert orientation(RasterImage(sym[:, :, None]), kp, 15) == 0.0


def test_orientation_half_planes_match_moment_oracle():
    kp = Keypoint(x=20.0, y=20.0, score=1.0)
    bright_px = np.zeros((41, 41))
    bright_px[:, 21:] = 1.0
    got = orientation(RasterImage(bright_px[:, :, None]), kp, 15)
    m10, m01 = oracle_moments(bright_px, 20, 20, 15)
    assert got == pytest.approx(math.atan2(m01, m10) % (2 * math.pi), abs=1e-12)
    assert got == pytest.approx(0.0, abs=1e-9)

    bright_py = np.zeros((41, 41))
    bright_py[21:, :] = 1.0
    got = orientation(RasterImage(bright_py[:, :, None]), kp, 15)
    m10, m01 = oracle_moments(bright_py, 20, 20, 15)
    assert got == pytest.approx(math.atan2(m01, m10) % (2 * math.pi), abs=1e-12)
    assert got == pytest.approx(math.pi / 2, abs=1e-9)


def test_orientation_random_matches_oracle(rng):
    img = textured_raster(rng, 41, 41, channels=1)
    arr = img.data[:, :, 0]
    for _ in range(10):
        cx = int(rng.integers(16, 25))
        cy = int(rng.integers(16, 25))
        got = orientation(img, Keypoint(x=float(cx), y=float(cy), score=1.0), 15)
        m10, m01 = oracle_moments(arr, cx, cy, 15)
        assert got == pytest.approx(math.atan2(m01, m10) % (2 * math.pi), abs=1e-9)


# ---------------------------------------------------------------------------
# Steered descriptor
# ---------------------------------------------------------------------------

def test_brief_constant_patch_all_zero():
    img = RasterImage(np.full((64, 64, 1), 0.5))
    d = steered_brief(img, Keypoint(x=32.0, y=32.0, score=1.0, angle=0.3))
    assert d.shape == (DESCRIPTOR_BYTES,)
    assert int(d.sum()) == 0


def test_brief_deterministic(rng):
    img = textured_raster(rng, 64, 64, channels=1)
    kp = Keypoint(x=32.0, y=32.0, score=1.0, angle=1.234)
    assert np.array_equal(steered_brief(img, kp), steered_brief(img, kp))


@pytest.mark.parametrize("deg", [5, 10, 15, -10])
def test_brief_rotation_consistency(rng, deg):
    base = np.clip(gaussian_blur(rng.random((64, 64)), 2.0), 0, 1)
    img = RasterImage(base[:, :, None])
    theta = math.radians(deg)
    rot = RasterImage(np.clip(rotate_nearest(base, theta, 32, 32), 0, 1)[:, :, None])
    alpha = 0.9
    d1 = steered_brief(img, Keypoint(x=32.0, y=32.0, score=1.0, angle=alpha))
    d2 = steered_brief(rot, Keypoint(x=32.0, y=32.0, score=1.0, angle=alpha + theta))
    assert hamming(d1, d2) < 64


# ---------------------------------------------------------------------------
# Full extraction
# ---------------------------------------------------------------------------

def test_extract_constant_image_empty():
    dset = extract_orb(RasterImage(np.full((64, 64, 3), 0.5)), OrbConfig())
    assert len(dset) == 0
    assert dset.descriptors.shape == (0, DESCRIPTOR_BYTES)


def test_extract_feature_cap(rng):
    img = textured_raster(rng, 96, 96)
    dset = extract_orb(img, OrbConfig(max_features=10))
    assert 0 < len(dset) <= 10


def test_extract_deterministic(rng):
    img = textured_raster(rng, 96, 96)
    cfg = OrbConfig(max_features=80)
    a = extract_orb(img, cfg, frame_id=5)
    b = extract_orb(img, cfg, frame_id=5)
    assert a.keypoints == b.keypoints
    assert np.array_equal(a.descriptors, b.descriptors)
    assert a.frame_id == 5


def test_extract_keypoints_leave_pattern_in_bounds(rng):
    img = textured_raster(rng, 96, 96)
    cfg = OrbConfig(max_features=200)
    dset = extract_orb(img, cfg)
    assert len(dset) > 0
    margin = descriptor_margin(cfg)
    assert margin >= PATTERN_RADIUS
    for kp in dset.keypoints:
        # level-space coordinates: undo the base-resolution scaling
        s = cfg.level_scale ** kp.level
        lx, ly = kp.x / s, kp.y / s
        lw = round(96 / s)
        lh = round(96 / s)
        c, sn = math.cos(kp.angle), math.sin(kp.angle)
        for x1, y1, x2, y2 in BRIEF_PATTERN:
            for px, py in ((x1, y1), (x2, y2)):
                rx = round(px * c - py * sn + lx)
                ry = round(px * sn + py * c + ly)
                assert 0 <= rx < lw and 0 <= ry < lh
        assert 0.0 <= kp.angle < 2 * math.pi


def test_extract_self_distance_zero(rng):
    img = textured_raster(rng, 96, 96)
    dset = extract_orb(img, OrbConfig(max_features=50))
    for row in dset.descriptors:
        assert hamming(row, row) == 0


# ---------------------------------------------------------------------------
# Descriptor cache
# ---------------------------------------------------------------------------

def test_descriptor_cache_round_trip(tmp_path, rng):
    img = textured_raster(rng, 96, 96)
    cfg = OrbConfig(max_features=40)
    dset = extract_orb(img, cfg, frame_id=3)
    p = tmp_path / "d.npz"
    save_descriptors(p, dset, cfg)
    back = load_descriptors(p, cfg)
    assert back is not None
    assert back.frame_id == 3
    assert back.keypoints == dset.keypoints
    assert np.array_equal(back.descriptors, dset.descriptors)


def test_descriptor_cache_rejects_other_config(tmp_path, rng):
    img = textured_raster(rng, 96, 96)
    cfg = OrbConfig(max_features=40)
    dset = extract_orb(img, cfg, frame_id=0)
    p = tmp_path / "d.npz"
    save_descriptors(p, dset, cfg)
    assert load_descriptors(p, OrbConfig(max_features=41)) is None
    assert load_descriptors(tmp_path / "absent.npz", cfg) is None
