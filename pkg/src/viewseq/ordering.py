"""Frame ordering: greedy nearest-neighbor chains, threshold-bounded subsequences,
multi-round planning, aggregation, and misalignment accounting.

All selection is deterministic: undefined scores rank +inf, value ties and the
all-undefined fallback resolve to the lowest frame id, and rounds process
starts in ascending id order. Identical inputs and config always produce
byte-identical plans.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .dataset import MultiViewSet, RasterImage, read_json, write_json_atomic
from .similarity import (
    MeasureKind,
    ScoreProvider,
    ScoreTable,
    WORLD_ORIGIN,
    pose_angle_to_origin,
)

MISALIGNMENT_THRESHOLD = math.pi / 4.0
EVERY_IMAGE = "every_image"
THRESHOLD_MODE_VALUE = "value"
THRESHOLD_MODE_CANDIDATE_RANK = "candidate_rank"
PLAN_SPEC_VERSION = "1"


class AggregationError(RuntimeError):
    """An upsampled-output map does not satisfy the plan contract."""


@dataclass
class OrderingConfig:
    """Measures, threshold ladder, and start policy for subsequence planning.

    thresholds are in the units of threshold_measure (radians for angle
    measures, world units for center distance, bits for the ORB measure) and
    run strictest first, i.e. ascending. threshold_mode "candidate_rank" is an
    experimental variant where each threshold is a candidate count K and a
    chain stops when the selected neighbor is not among the K nearest
    remaining frames by the threshold measure.
    """

    select_measure: MeasureKind = MeasureKind.ORB_MEAN_MATCH
    threshold_measure: MeasureKind = MeasureKind.POSE_ANGLE_TO_ORIGIN
    thresholds: Tuple[float, ...] = (math.radians(15.0), math.radians(30.0), math.radians(45.0))
    min_subseq_len: int = 8
    start_policy: object = EVERY_IMAGE  # EVERY_IMAGE or a single frame_id
    threshold_mode: str = THRESHOLD_MODE_VALUE

    def __post_init__(self) -> None:
        self.select_measure = MeasureKind(self.select_measure)
        self.threshold_measure = MeasureKind(self.threshold_measure)
        self.thresholds = tuple(float(t) for t in self.thresholds)
        if not self.thresholds:
            raise ValueError("at least one threshold is required")
        if any(b <= a for a, b in zip(self.thresholds, self.thresholds[1:])):
            raise ValueError("thresholds must be strictly increasing (strictest first)")
        if self.min_subseq_len < 1:
            raise ValueError("min_subseq_len must be >= 1")
        if self.threshold_mode not in (THRESHOLD_MODE_VALUE, THRESHOLD_MODE_CANDIDATE_RANK):
            raise ValueError(f"unknown threshold_mode {self.threshold_mode!r}")
        if self.start_policy != EVERY_IMAGE and not isinstance(self.start_policy, int):
            raise ValueError("start_policy must be 'every_image' or a frame_id")


@dataclass
class Subsequence:
    """An ordered clip of frames with per-transition (select, threshold) scores.

    round is the threshold-round index that produced the clip; singleton
    fallbacks carry round == number of rounds, plain full greedy orders use -1.
    A transition score of +inf records a forced pick where every remaining
    candidate was undefined.
    """

    subseq_id: int
    round: int
    start_frame: int
    frames: List[int]
    transition_scores: List[Tuple[float, float]]

    def __post_init__(self) -> None:
        if len(self.transition_scores) != max(len(self.frames) - 1, 0):
            raise ValueError("one transition score pair per consecutive frame pair")
        if len(set(self.frames)) != len(self.frames):
            raise ValueError("a frame may not repeat within a subsequence")
        if self.frames and self.frames[0] != self.start_frame:
            raise ValueError("frames must begin at start_frame")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def is_singleton(self) -> bool:
        return len(self.frames) == 1


@dataclass
class CoverageState:
    """Which frames are covered and by which (round, subseq_id, position)."""

    covered: set = field(default_factory=set)
    provenance: Dict[int, Tuple[int, int, int]] = field(default_factory=dict)


@dataclass(frozen=True)
class MisalignmentReport:
    count: int
    offending_pairs: Tuple[Tuple[int, int, float], ...]


@dataclass
class Plan:
    """Ordering output consumed by the upsample and aggregate stages."""

    subsequences: List[Subsequence]
    coverage: CoverageState
    rounds: List[dict]
    config: OrderingConfig


# ---------------------------------------------------------------------------
# Selection core
# ---------------------------------------------------------------------------

def _check_table(mvs: MultiViewSet, table: ScoreTable) -> Tuple[Tuple[int, ...], Dict[int, int]]:
    ids = tuple(sorted(mvs.frame_ids()))
    if table.frame_ids != ids:
        raise ValueError("score table does not cover exactly this dataset's frames")
    return ids, {fid: i for i, fid in enumerate(ids)}


def _pick_next(values_row: np.ndarray, pool: np.ndarray) -> int:
    """Index (into the id ordering) of the next frame: lowest score wins, ties
    and the all-undefined case fall back to the lowest frame id."""
    positions = np.nonzero(pool)[0]
    return int(positions[np.argmin(values_row[positions])])


def greedy_order(mvs: MultiViewSet, scores: ScoreTable, start: int) -> Subsequence:
    """Order all frames into one chain by repeated nearest-neighbor extension.

    Each step appends the remaining frame with the lowest dissimilarity to the
    current tail. The result is always a permutation of the input ids.
    """
    ids, pos = _check_table(mvs, scores)
    if start not in pos:
        raise ValueError(f"start frame {start} not in dataset")
    dense = scores.dense()
    pool = np.ones(len(ids), dtype=bool)
    pool[pos[start]] = False
    seq = [start]
    transitions: List[Tuple[float, float]] = []
    cur = pos[start]
    for _ in range(len(ids) - 1):
        nxt = _pick_next(dense[cur], pool)
        val = float(dense[cur, nxt])
        transitions.append((val, val))
        pool[nxt] = False
        seq.append(ids[nxt])
        cur = nxt
    return Subsequence(subseq_id=0, round=-1, start_frame=start, frames=seq,
                       transition_scores=transitions)


def _rank_of_candidate(thr_row: np.ndarray, pool: np.ndarray, candidate: int) -> int:
    """1-based rank of candidate among the pool by (threshold value, position)."""
    positions = np.nonzero(pool)[0]
    cand_key = (float(thr_row[candidate]), candidate)
    better = sum(1 for p in positions if (float(thr_row[p]), int(p)) < cand_key)
    return better + 1


def adaptive_length_subsequences(
    mvs: MultiViewSet,
    select: ScoreTable,
    threshold: ScoreTable,
    epsilon: float,
    start_frames: Sequence[int],
    *,
    round_index: int = 0,
    first_subseq_id: int = 0,
    threshold_mode: str = THRESHOLD_MODE_VALUE,
) -> List[Subsequence]:
    """Greedy chains from each start, truncated by the threshold measure.

    Each start gets a fresh pool of all other frames. Extension picks the
    select-measure nearest neighbor of the current tail; before accepting it,
    the threshold measure between tail and candidate is tested and the chain
    is truncated at the tail when the score exceeds epsilon or is undefined.

    In "candidate_rank" mode (experimental) epsilon is a count K and the chain
    stops when the candidate does not rank within the K nearest remaining
    frames by the threshold measure.
    """
    ids, pos = _check_table(mvs, select)
    _check_table(mvs, threshold)
    sel = select.dense()
    thr = threshold.dense()
    rank_mode = threshold_mode == THRESHOLD_MODE_CANDIDATE_RANK
    if rank_mode and (epsilon < 1 or epsilon != int(epsilon)) and math.isfinite(epsilon):
        raise ValueError("candidate_rank thresholds must be positive whole counts")

    out: List[Subsequence] = []
    sid = first_subseq_id
    for start in start_frames:
        if start not in pos:
            raise ValueError(f"start frame {start} not in dataset")
        pool = np.ones(len(ids), dtype=bool)
        pool[pos[start]] = False
        seq = [start]
        transitions: List[Tuple[float, float]] = []
        cur = pos[start]
        while pool.any():
            nxt = _pick_next(sel[cur], pool)
            tval = float(thr[cur, nxt])
            if rank_mode:
                ok = math.isfinite(tval) and _rank_of_candidate(thr[cur], pool, nxt) <= int(epsilon)
            else:
                ok = tval <= epsilon  # undefined is +inf and always truncates
            if not ok:
                break
            transitions.append((float(sel[cur, nxt]), tval))
            pool[nxt] = False
            seq.append(ids[nxt])
            cur = nxt
        out.append(Subsequence(subseq_id=sid, round=round_index, start_frame=start,
                               frames=seq, transition_scores=transitions))
        sid += 1
    return out


def multi_threshold_plan(mvs: MultiViewSet, config: OrderingConfig,
                         provider: ScoreProvider) -> Plan:
    """Round-by-round subsequence construction from strictest to loosest threshold.

    Each round starts chains only from frames not yet covered (so dense regions
    get the smoothest clips first) while chains may still traverse covered
    frames for context. A chain is accepted when it reaches min_subseq_len;
    accepted chains mark all their frames covered, earliest
    (round, subseq_id, position) winning provenance. Frames left uncovered
    after the final round are emitted as singleton clips destined for
    single-image upsampling.
    """
    select = provider.table(config.select_measure)
    threshold = provider.table(config.threshold_measure)
    ids = sorted(mvs.frame_ids())

    coverage = CoverageState()
    subsequences: List[Subsequence] = []
    rounds: List[dict] = []
    sid = 0

    for r, eps in enumerate(config.thresholds):
        starts = [fid for fid in ids if fid not in coverage.covered]
        if config.start_policy != EVERY_IMAGE:
            starts = [fid for fid in starts if fid == config.start_policy]
        made = adaptive_length_subsequences(
            mvs, select, threshold, eps, starts,
            round_index=r, first_subseq_id=0, threshold_mode=config.threshold_mode,
        ) if starts else []
        accepted = [s for s in made if len(s) >= config.min_subseq_len]
        for sub in accepted:
            sub.subseq_id = sid
            sid += 1
            subsequences.append(sub)
            for position, fid in enumerate(sub.frames):
                coverage.covered.add(fid)
                coverage.provenance.setdefault(fid, (r, sub.subseq_id, position))
        rounds.append({
            "round": r,
            "epsilon": eps,
            "n_starts": len(starts),
            "subseq_ids": [s.subseq_id for s in accepted],
        })

    singleton_round = len(config.thresholds)
    singleton_ids = []
    for fid in ids:
        if fid not in coverage.covered:
            sub = Subsequence(subseq_id=sid, round=singleton_round, start_frame=fid,
                              frames=[fid], transition_scores=[])
            sid += 1
            subsequences.append(sub)
            coverage.covered.add(fid)
            coverage.provenance[fid] = (singleton_round, sub.subseq_id, 0)
            singleton_ids.append(sub.subseq_id)
    rounds.append({
        "round": singleton_round,
        "epsilon": None,
        "n_starts": len(singleton_ids),
        "subseq_ids": singleton_ids,
    })

    return Plan(subsequences=subsequences, coverage=coverage, rounds=rounds, config=config)


def aggregate(upsampled: Dict[int, List[RasterImage]], plan: Plan) -> Dict[int, RasterImage]:
    """Resolve exactly one upsampled image per frame from the plan's provenance.

    Every subsequence in the plan must have an output list of matching length;
    violations raise AggregationError naming the subsequence.
    """
    for sub in plan.subsequences:
        got = upsampled.get(sub.subseq_id)
        if got is None:
            raise AggregationError(f"missing upsampled output for subsequence {sub.subseq_id}")
        if len(got) != len(sub.frames):
            raise AggregationError(
                f"subsequence {sub.subseq_id}: expected {len(sub.frames)} upsampled frames, got {len(got)}"
            )
    plan_frames = {fid for sub in plan.subsequences for fid in sub.frames}
    if plan_frames != set(plan.coverage.provenance):
        raise AggregationError("plan does not cover every frame exactly once in provenance")
    return {
        fid: upsampled[sub_id][position]
        for fid, (_round, sub_id, position) in sorted(plan.coverage.provenance.items())
    }


def count_misalignments(seq: Subsequence, mvs: MultiViewSet,
                        threshold: float = MISALIGNMENT_THRESHOLD,
                        origin=WORLD_ORIGIN) -> MisalignmentReport:
    """Count consecutive pairs whose camera-to-origin directions differ by more
    than the threshold angle. A pair with an undefined angle (a camera exactly
    on the origin) counts as offending with angle +inf."""
    poses = mvs.poses()
    offending = []
    for a, b in zip(seq.frames, seq.frames[1:]):
        d = pose_angle_to_origin(poses[a], poses[b], origin)
        ang = d.value if d.defined else math.inf
        if ang > threshold:
            offending.append((a, b, ang))
    return MisalignmentReport(count=len(offending), offending_pairs=tuple(offending))


# ---------------------------------------------------------------------------
# Plan file and ordering report
# ---------------------------------------------------------------------------

def _score_to_json(v: float):
    return None if math.isinf(v) else v


def _score_from_json(v) -> float:
    return math.inf if v is None else float(v)


def plan_to_doc(plan: Plan, *, scene_name: str = "scene") -> dict:
    cfg = plan.config
    return {
        "spec_version": PLAN_SPEC_VERSION,
        "scene": scene_name,
        "config": {
            "select_measure": cfg.select_measure.value,
            "threshold_measure": cfg.threshold_measure.value,
            "thresholds": list(cfg.thresholds),
            "min_subseq_len": cfg.min_subseq_len,
            "start_policy": cfg.start_policy,
            "threshold_mode": cfg.threshold_mode,
        },
        "rounds": plan.rounds,
        "subsequences": [
            {
                "subseq_id": s.subseq_id,
                "round": s.round,
                "start_frame": s.start_frame,
                "frames": s.frames,
                "transition_scores": [
                    [_score_to_json(a), _score_to_json(b)] for a, b in s.transition_scores
                ],
                "single_image": s.is_singleton,
            }
            for s in plan.subsequences
        ],
        "coverage": {
            str(fid): list(prov) for fid, prov in sorted(plan.coverage.provenance.items())
        },
    }


def plan_from_doc(doc: dict) -> Plan:
    cfg_doc = doc["config"]
    config = OrderingConfig(
        select_measure=MeasureKind(cfg_doc["select_measure"]),
        threshold_measure=MeasureKind(cfg_doc["threshold_measure"]),
        thresholds=tuple(cfg_doc["thresholds"]),
        min_subseq_len=int(cfg_doc["min_subseq_len"]),
        start_policy=cfg_doc["start_policy"],
        threshold_mode=cfg_doc["threshold_mode"],
    )
    subsequences = [
        Subsequence(
            subseq_id=int(s["subseq_id"]),
            round=int(s["round"]),
            start_frame=int(s["start_frame"]),
            frames=[int(f) for f in s["frames"]],
            transition_scores=[
                (_score_from_json(a), _score_from_json(b)) for a, b in s["transition_scores"]
            ],
        )
        for s in doc["subsequences"]
    ]
    coverage = CoverageState()
    for fid, prov in doc["coverage"].items():
        coverage.provenance[int(fid)] = (int(prov[0]), int(prov[1]), int(prov[2]))
        coverage.covered.add(int(fid))
    return Plan(subsequences=subsequences, coverage=coverage,
                rounds=list(doc["rounds"]), config=config)


def write_plan(plan: Plan, path: Path, *, scene_name: str = "scene") -> None:
    write_json_atomic(Path(path), plan_to_doc(plan, scene_name=scene_name))


def read_plan(path: Path) -> Plan:
    return plan_from_doc(read_json(Path(path)))


def ordering_report(plan: Plan, mvs: MultiViewSet, *,
                    threshold: float = MISALIGNMENT_THRESHOLD,
                    origin=WORLD_ORIGIN) -> dict:
    """Misalignment counts, length histogram, and per-round coverage for a plan."""
    per_subseq = []
    total = 0
    histogram: Dict[str, int] = {}
    for sub in plan.subsequences:
        report = count_misalignments(sub, mvs, threshold, origin)
        total += report.count
        histogram[str(len(sub))] = histogram.get(str(len(sub)), 0) + 1
        per_subseq.append({
            "subseq_id": sub.subseq_id,
            "round": sub.round,
            "length": len(sub),
            "misalignments": report.count,
            "offending_pairs": [
                [a, b, _score_to_json(ang)] for a, b, ang in report.offending_pairs
            ],
        })
    rounds_cov: Dict[str, int] = {}
    for fid, (r, _sid, _pos) in plan.coverage.provenance.items():
        rounds_cov[str(r)] = rounds_cov.get(str(r), 0) + 1
    return {
        "spec_version": PLAN_SPEC_VERSION,
        "misalignment_threshold": threshold,
        "total_misalignments": total,
        "subsequences": per_subseq,
        "length_histogram": histogram,
        "frames_first_covered_per_round": rounds_cov,
        "n_frames": len(mvs),
        "n_subsequences": len(plan.subsequences),
    }
