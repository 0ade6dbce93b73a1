"""Pairwise frame dissimilarity: ORB mean match distance and pose-geometry measures.

Every measure is symmetric, total over frame pairs, and returns a
Dissimilarity where lower means more similar. Pairs that provide no evidence
(too few descriptor matches, a camera sitting on the scene origin) come back
undefined and rank as +inf during selection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from .dataset import CameraPose, MultiViewSet, atomic_write_bytes
from .orb import DESCRIPTOR_BYTES, DescriptorSet

DEFAULT_MIN_MATCHES = 8
WORLD_ORIGIN = (0.0, 0.0, 0.0)


class MeasureKind(str, Enum):
    ORB_MEAN_MATCH = "orb_mean_match"
    POSE_ANGLE_TO_ORIGIN = "pose_angle_to_origin"
    POSE_CENTER_DISTANCE = "pose_center_distance"
    POSE_DIRECTION_ANGLE = "pose_direction_angle"


@dataclass(frozen=True)
class Dissimilarity:
    """Lower is more similar. Undefined means the pair offers no evidence and
    must rank behind every defined score."""

    value: float
    defined: bool = True

    def __post_init__(self) -> None:
        if self.defined and not math.isfinite(self.value):
            raise ValueError("a defined dissimilarity must be finite")
        if self.defined and self.value < 0.0:
            raise ValueError("dissimilarity must be non-negative")

    def rank_value(self) -> float:
        return self.value if self.defined else math.inf


UNDEFINED = Dissimilarity(value=math.inf, defined=False)


@dataclass(frozen=True)
class MatchSet:
    """Mutual-best descriptor pairs as (index_in_a, index_in_b, hamming)."""

    pairs: Tuple[Tuple[int, int, int], ...]

    def __len__(self) -> int:
        return len(self.pairs)


# ---------------------------------------------------------------------------
# Descriptor matching
# ---------------------------------------------------------------------------

def hamming(a: np.ndarray, b: np.ndarray) -> int:
    """Bit-count of XOR between two packed 256-bit descriptors (0..256)."""
    a = np.asarray(a, dtype=np.uint8).reshape(-1)
    b = np.asarray(b, dtype=np.uint8).reshape(-1)
    if a.shape != (DESCRIPTOR_BYTES,) or b.shape != (DESCRIPTOR_BYTES,):
        raise ValueError(f"descriptors must be {DESCRIPTOR_BYTES} packed bytes")
    return int(np.bitwise_count(np.bitwise_xor(a, b)).sum())


def hamming_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(|a|, |b|) matrix of Hamming distances between packed descriptor rows."""
    a = np.asarray(a, dtype=np.uint8).reshape(-1, DESCRIPTOR_BYTES)
    b = np.asarray(b, dtype=np.uint8).reshape(-1, DESCRIPTOR_BYTES)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((a.shape[0], b.shape[0]), dtype=np.int64)
    x = np.bitwise_xor(a[:, None, :], b[None, :, :])
    return np.bitwise_count(x).sum(axis=2, dtype=np.int64)


def cross_check_match(a: DescriptorSet, b: DescriptorSet) -> MatchSet:
    """Mutual-best Hamming matching.

    (k, l) is kept iff l is the nearest descriptor in b to a[k] AND k is the
    nearest in a to b[l]; argmin ties resolve to the lowest index, so the
    result is deterministic and symmetric.
    """
    if len(a) == 0 or len(b) == 0:
        return MatchSet(())
    dist = hamming_matrix(a.descriptors, b.descriptors)
    best_b = dist.argmin(axis=1)  # first minimum = lowest index on ties
    best_a = dist.argmin(axis=0)
    pairs = tuple(
        (k, int(best_b[k]), int(dist[k, best_b[k]]))
        for k in range(dist.shape[0])
        if int(best_a[best_b[k]]) == k
    )
    return MatchSet(pairs)


def orb_dissimilarity(a: DescriptorSet, b: DescriptorSet, min_matches: int = DEFAULT_MIN_MATCHES) -> Dissimilarity:
    """Mean Hamming distance over cross-checked matches.

    Undefined when there are no matches or fewer than min_matches; a mean
    over a couple of pairs is noise, not similarity evidence.
    """
    matches = cross_check_match(a, b)
    if len(matches) == 0 or len(matches) < min_matches:
        return UNDEFINED
    return Dissimilarity(float(sum(p[2] for p in matches.pairs)) / len(matches))


# ---------------------------------------------------------------------------
# Pose-geometry measures (scalar math keeps them cheap and bitwise symmetric)
# ---------------------------------------------------------------------------

def _angle_between(ux, uy, uz, vx, vy, vz) -> Optional[float]:
    nu = math.sqrt(ux * ux + uy * uy + uz * uz)
    nv = math.sqrt(vx * vx + vy * vy + vz * vz)
    if nu == 0.0 or nv == 0.0:
        return None
    cosang = (ux * vx + uy * vy + uz * vz) / (nu * nv)
    return math.acos(min(1.0, max(-1.0, cosang)))


def pose_angle_to_origin(p: CameraPose, q: CameraPose, origin=WORLD_ORIGIN) -> Dissimilarity:
    """Angle between the origin->center vectors of two cameras, in radians.

    Undefined when either camera sits exactly on the origin.
    """
    ox, oy, oz = (float(v) for v in origin)
    ang = _angle_between(
        float(p.center[0]) - ox, float(p.center[1]) - oy, float(p.center[2]) - oz,
        float(q.center[0]) - ox, float(q.center[1]) - oy, float(q.center[2]) - oz,
    )
    if ang is None:
        return UNDEFINED
    return Dissimilarity(ang)


def pose_center_distance(p: CameraPose, q: CameraPose) -> Dissimilarity:
    """Euclidean distance between camera centers, in world units."""
    dx = float(p.center[0]) - float(q.center[0])
    dy = float(p.center[1]) - float(q.center[1])
    dz = float(p.center[2]) - float(q.center[2])
    return Dissimilarity(math.sqrt(dx * dx + dy * dy + dz * dz))


def pose_direction_angle(p: CameraPose, q: CameraPose) -> Dissimilarity:
    """Angle between the two viewing axes, in radians."""
    ang = _angle_between(
        float(p.view_axis[0]), float(p.view_axis[1]), float(p.view_axis[2]),
        float(q.view_axis[0]), float(q.view_axis[1]), float(q.view_axis[2]),
    )
    if ang is None:  # view_axis is unit by construction; kept for safety
        return UNDEFINED
    return Dissimilarity(ang)


# ---------------------------------------------------------------------------
# Cached pairwise tables
# ---------------------------------------------------------------------------

class ScoreTable:
    """Memoized symmetric pairwise dissimilarities for one measure.

    score(i, j) evaluates lazily; dense() materializes the full matrix (with
    +inf at undefined pairs) for vectorized selection, using the exact same
    per-pair evaluations, so selection semantics cannot diverge between the
    two access paths.
    """

    def __init__(self, kind: MeasureKind, frame_ids: Sequence[int],
                 pair_fn: Callable[[int, int], Dissimilarity]):
        self.kind = kind
        self.frame_ids = tuple(sorted(frame_ids))
        self._pair_fn = pair_fn
        self._cache: Dict[Tuple[int, int], Dissimilarity] = {}
        self._dense: Optional[np.ndarray] = None

    def score(self, i: int, j: int) -> Dissimilarity:
        key = (i, j) if i <= j else (j, i)
        got = self._cache.get(key)
        if got is None:
            got = self._pair_fn(*key)
            self._cache[key] = got
        return got

    def dense(self) -> np.ndarray:
        """(n, n) matrix over sorted frame_ids; undefined pairs hold +inf."""
        if self._dense is None:
            ids = self.frame_ids
            n = len(ids)
            mat = np.zeros((n, n), dtype=np.float64)
            for ai in range(n):
                for bi in range(ai + 1, n):
                    mat[ai, bi] = mat[bi, ai] = self.score(ids[ai], ids[bi]).rank_value()
            self._dense = mat
        return self._dense

    def index_of(self, frame_id: int) -> int:
        return self.frame_ids.index(frame_id)

    def dump_csv(self, path: Path) -> None:
        """Write every unordered pair as `i,j,measure,value,defined` rows."""
        lines = ["i,j,measure,value,defined"]
        for ai, fid_a in enumerate(self.frame_ids):
            for fid_b in self.frame_ids[ai + 1:]:
                d = self.score(fid_a, fid_b)
                value = repr(d.value) if d.defined else ""
                lines.append(f"{fid_a},{fid_b},{self.kind.value},{value},{str(d.defined).lower()}")
        atomic_write_bytes(Path(path), ("\n".join(lines) + "\n").encode("utf-8"))


class ScoreProvider:
    """Builds and caches a ScoreTable per measure for one dataset.

    The ORB measure needs per-frame descriptor sets; pose measures need only
    the poses already on the MultiViewSet. The scene origin is configurable
    for captures whose interest point is not the world origin.
    """

    def __init__(self, mvs: MultiViewSet, *,
                 descriptors: Optional[Dict[int, DescriptorSet]] = None,
                 origin=WORLD_ORIGIN,
                 min_matches: int = DEFAULT_MIN_MATCHES):
        self._mvs = mvs
        self._descriptors = descriptors
        self._origin = tuple(float(v) for v in origin)
        self._min_matches = int(min_matches)
        self._poses = mvs.poses()
        self._tables: Dict[MeasureKind, ScoreTable] = {}

    def table(self, kind: MeasureKind) -> ScoreTable:
        kind = MeasureKind(kind)
        got = self._tables.get(kind)
        if got is not None:
            return got
        ids = self._mvs.frame_ids()
        if kind is MeasureKind.ORB_MEAN_MATCH:
            descs = self._descriptors
            if descs is None:
                raise ValueError("the ORB measure requires per-frame descriptor sets")
            missing = [fid for fid in ids if fid not in descs]
            if missing:
                raise ValueError(f"descriptor sets missing for frames {missing}")
            fn = lambda i, j: orb_dissimilarity(descs[i], descs[j], self._min_matches)
        elif kind is MeasureKind.POSE_ANGLE_TO_ORIGIN:
            poses, origin = self._poses, self._origin
            fn = lambda i, j: pose_angle_to_origin(poses[i], poses[j], origin)
        elif kind is MeasureKind.POSE_CENTER_DISTANCE:
            poses = self._poses
            fn = lambda i, j: pose_center_distance(poses[i], poses[j])
        else:
            poses = self._poses
            fn = lambda i, j: pose_direction_angle(poses[i], poses[j])
        got = ScoreTable(kind, ids, fn)
        self._tables[kind] = got
        return got
