"""Pipeline orchestration: degrade -> plan -> upsample -> aggregate -> evaluate.

The upsampler is a pluggable boundary. The built-in "reference_bicubic" mode
upsamples in-process and makes the whole chain runnable with no external
software; any real video upsampler is invoked as a subprocess through a JSON
manifest + output-directory contract.
"""

from __future__ import annotations

import math
import os
import shlex
import subprocess
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .dataset import (
    DatasetError,
    MultiViewSet,
    RasterImage,
    atomic_write_bytes,
    composite_background,
    load_image_png,
    load_pose_manifest,
    read_json,
    read_png_size,
    save_image_png,
    write_json_atomic,
    write_pose_manifest,
)
from .metrics import PSNR_CAP_DB, LossWeights, psnr, ssim
from .orb import DescriptorSet, OrbConfig, extract_orb, load_descriptors, save_descriptors
from .ordering import (
    MISALIGNMENT_THRESHOLD,
    AggregationError,
    OrderingConfig,
    Plan,
    count_misalignments,
    multi_threshold_plan,
    ordering_report,
    read_plan,
    write_plan,
)
from .similarity import MeasureKind, ScoreProvider, WORLD_ORIGIN

MANIFEST_SPEC_VERSION = "1"
REFERENCE_UPSAMPLER = "reference_bicubic"
UPSAMPLE_TIMEOUT_ENV = "VIEWSEQ_UPSAMPLE_TIMEOUT"
FRAME_NAME = "frame_{frame_id:05d}.png"
SUBSEQ_DIR = "subseq_{subseq_id:04d}"


class PipelineError(RuntimeError):
    """A pipeline stage contract was violated."""


@dataclass
class PipelineConfig:
    """Everything one end-to-end run needs; loadable from a single JSON file.

    scale_factor is the upsampling factor promised to (and verified against)
    the upsampler. degrade_factor is the downsample divisor used to build the
    LR dataset and defaults to scale_factor; set it higher for runs whose
    target resolution is below the source (for example degrade by 8, upsample
    by 4 in scene-scale captures).
    """

    dataset: Path
    root: Path
    scale_factor: int = 4
    degrade_factor: Optional[int] = None
    upsampler: str = REFERENCE_UPSAMPLER
    per_subsequence: bool = False
    background: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    scene_origin: Tuple[float, float, float] = WORLD_ORIGIN
    scene_name: Optional[str] = None
    ordering: OrderingConfig = field(default_factory=OrderingConfig)
    orb: OrbConfig = field(default_factory=OrbConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    min_matches: int = 8
    dump_scores: bool = False

    def __post_init__(self) -> None:
        self.dataset = Path(self.dataset).resolve()
        self.root = Path(self.root).resolve()
        if int(self.scale_factor) < 2:
            raise ValueError("scale_factor must be >= 2")
        if self.degrade_factor is not None and int(self.degrade_factor) < 2:
            raise ValueError("degrade_factor must be >= 2 when set")
        self.background = tuple(float(v) for v in self.background)
        if len(self.background) != 3 or any(not 0.0 <= v <= 1.0 for v in self.background):
            raise ValueError("background must be three values in [0, 1]")
        self.scene_origin = tuple(float(v) for v in self.scene_origin)
        if self.upsampler != REFERENCE_UPSAMPLER:
            for placeholder in ("{manifest}", "{outdir}"):
                if placeholder not in self.upsampler:
                    raise ValueError(f"external upsampler command must contain {placeholder}")

    # -- layout under root -------------------------------------------------
    @property
    def lr_dir(self) -> Path: return self.root / "lr"

    @property
    def lr_manifest_path(self) -> Path: return self.lr_dir / "manifest.json"

    @property
    def degrade_sidecar_path(self) -> Path: return self.lr_dir / "degrade.json"

    @property
    def plan_path(self) -> Path: return self.root / "plan.json"

    @property
    def upsample_manifest_path(self) -> Path: return self.root / "upsample_manifest.json"

    @property
    def upsampled_dir(self) -> Path: return self.root / "upsampled"

    @property
    def hr_dir(self) -> Path: return self.root / "hr"

    @property
    def hr_manifest_path(self) -> Path: return self.hr_dir / "transforms.json"

    @property
    def reports_dir(self) -> Path: return self.root / "reports"

    @property
    def cache_dir(self) -> Path: return self.root / "cache" / "orb"

    def effective_degrade_factor(self) -> int:
        return int(self.degrade_factor) if self.degrade_factor is not None else int(self.scale_factor)

    # -- JSON round trip ----------------------------------------------------
    def to_doc(self) -> dict:
        return {
            "dataset": str(self.dataset),
            "root": str(self.root),
            "scale_factor": int(self.scale_factor),
            "degrade_factor": None if self.degrade_factor is None else int(self.degrade_factor),
            "upsampler": self.upsampler,
            "per_subsequence": self.per_subsequence,
            "background": list(self.background),
            "scene_origin": list(self.scene_origin),
            "scene_name": self.scene_name,
            "ordering": {
                "select_measure": self.ordering.select_measure.value,
                "threshold_measure": self.ordering.threshold_measure.value,
                "thresholds": list(self.ordering.thresholds),
                "min_subseq_len": self.ordering.min_subseq_len,
                "start_policy": self.ordering.start_policy,
                "threshold_mode": self.ordering.threshold_mode,
            },
            "orb": {
                "max_features": self.orb.max_features,
                "fast_threshold": self.orb.fast_threshold,
                "n_levels": self.orb.n_levels,
                "level_scale": self.orb.level_scale,
                "orientation_radius": self.orb.orientation_radius,
                "blur_sigma": self.orb.blur_sigma,
                "background": self.orb.background,
            },
            "loss": {"lambda1": self.loss.lambda1, "lambda_ren": self.loss.lambda_ren},
            "min_matches": self.min_matches,
            "dump_scores": self.dump_scores,
        }

    @classmethod
    def from_doc(cls, doc: dict, *, base_dir: Optional[Path] = None) -> "PipelineConfig":
        doc = dict(doc)
        ordering = OrderingConfig(**doc.pop("ordering", {}))
        orb = OrbConfig(**doc.pop("orb", {}))
        loss = LossWeights(**doc.pop("loss", {}))
        if base_dir is not None:
            for key in ("dataset", "root"):
                if key in doc and doc[key] is not None and not Path(doc[key]).is_absolute():
                    doc[key] = Path(base_dir) / doc[key]
        return cls(ordering=ordering, orb=orb, loss=loss, **doc)

    @classmethod
    def from_json(cls, path: Path) -> "PipelineConfig":
        path = Path(path)
        return cls.from_doc(read_json(path), base_dir=path.parent)


def frame_filename(frame_id: int) -> str:
    return FRAME_NAME.format(frame_id=frame_id)


def subseq_dirname(subseq_id: int) -> str:
    return SUBSEQ_DIR.format(subseq_id=subseq_id)


# ---------------------------------------------------------------------------
# degrade
# ---------------------------------------------------------------------------

def cmd_degrade(config: PipelineConfig) -> Path:
    """Bicubic-downsample every source frame into root/lr plus a pose manifest
    and a provenance sidecar. Non-divisible dimensions round up. Rerunning
    over the same inputs rewrites identical bytes."""
    from .resample import bicubic_resample

    hr = load_pose_manifest(config.dataset, scale_factor=config.scale_factor,
                            scene_name=config.scene_name)
    factor = config.effective_degrade_factor()
    config.lr_dir.mkdir(parents=True, exist_ok=True)

    sizes = []
    names = []
    source_dims = None
    for fr in hr.frames:
        img = load_image_png(fr.source_path)
        if source_dims is None:
            source_dims = (img.width, img.height)
        elif (img.width, img.height) != source_dims:
            raise DatasetError(
                f"frame {fr.frame_id} is {img.width}x{img.height}; "
                f"all frames in a set must share dimensions ({source_dims[0]}x{source_dims[1]})"
            )
        out_w = math.ceil(img.width / factor)
        out_h = math.ceil(img.height / factor)
        lr = bicubic_resample(img, out_w, out_h)
        name = frame_filename(fr.frame_id)
        save_image_png(lr, config.lr_dir / name)
        sizes.append({"frame_id": fr.frame_id, "width": out_w, "height": out_h})
        names.append(name)

    write_pose_manifest(hr, config.lr_manifest_path, file_paths=names,
                        width=sizes[0]["width"], height=sizes[0]["height"])
    write_json_atomic(config.degrade_sidecar_path, {
        "spec_version": MANIFEST_SPEC_VERSION,
        "source_manifest": str(config.dataset),
        "degrade_factor": factor,
        "scale_factor": int(config.scale_factor),
        "background": list(config.background),
        "frames": sizes,
    })
    print(f"degrade: wrote {len(hr.frames)} LR frames (factor {factor}) to {config.lr_dir}")
    return config.lr_manifest_path


# ---------------------------------------------------------------------------
# plan
# ---------------------------------------------------------------------------

def load_working_set(config: PipelineConfig) -> MultiViewSet:
    """The LR set produced by degrade, or the input dataset itself when no
    degrade output exists (native-LR captures)."""
    if config.lr_manifest_path.is_file():
        return load_pose_manifest(config.lr_manifest_path, scale_factor=config.scale_factor,
                                  scene_name=config.scene_name)
    return load_pose_manifest(config.dataset, scale_factor=config.scale_factor,
                              scene_name=config.scene_name)


def _needs_orb(config: PipelineConfig) -> bool:
    kinds = (config.ordering.select_measure, config.ordering.threshold_measure)
    return MeasureKind.ORB_MEAN_MATCH in kinds


def compute_descriptor_sets(config: PipelineConfig, mvs: MultiViewSet) -> Dict[int, DescriptorSet]:
    """Per-frame ORB descriptors, cached under root/cache keyed by config hash.

    The pipeline-wide background policy overrides the feature config's
    compositing background so RGBA frames are extracted under the same
    background used for evaluation, and the cache key tracks it."""
    orb_cfg = replace(config.orb, background=config.background)
    config.cache_dir.mkdir(parents=True, exist_ok=True)
    key = orb_cfg.cache_key()
    out: Dict[int, DescriptorSet] = {}
    for fr in mvs.frames:
        cache_path = config.cache_dir / f"frame_{fr.frame_id:05d}_{key}.npz"
        dset = load_descriptors(cache_path, orb_cfg)
        if dset is None or dset.frame_id != fr.frame_id:
            dset = extract_orb(load_image_png(fr.source_path), orb_cfg, frame_id=fr.frame_id)
            save_descriptors(cache_path, dset, orb_cfg)
        out[fr.frame_id] = dset
    return out


def build_upsample_manifest(config: PipelineConfig, mvs: MultiViewSet, plan: Plan) -> dict:
    """Manifest handed to the upsampler: per-subsequence LR frame paths plus
    the expected output layout. LR paths are verified to exist at write time."""
    by_id = {fr.frame_id: fr for fr in mvs.frames}
    subs = []
    for sub in plan.subsequences:
        frames = []
        for fid in sub.frames:
            fr = by_id[fid]
            rel = os.path.relpath(fr.source_path, config.root)
            if not fr.source_path.is_file():
                raise PipelineError(f"LR frame missing for manifest: {fr.source_path}")
            w, h = read_png_size(fr.source_path)
            frames.append({"frame_id": fid, "lr_path": rel, "width": w, "height": h})
        subs.append({
            "subseq_id": sub.subseq_id,
            "round": sub.round,
            "single_image": sub.is_singleton,
            "frames": frames,
        })
    return {
        "spec_version": MANIFEST_SPEC_VERSION,
        "scene": mvs.scene_name,
        "scale_factor": int(config.scale_factor),
        "output_root": "upsampled",
        "output_pattern": "subseq_{subseq_id:04d}/frame_{frame_id:05d}.png",
        "subsequences": subs,
    }


def cmd_plan(config: PipelineConfig) -> Plan:
    """Extract features as needed, build the multi-threshold plan, and write
    plan.json + upsample_manifest.json. Prints a coverage and misalignment
    summary."""
    mvs = load_working_set(config)
    descriptors = compute_descriptor_sets(config, mvs) if _needs_orb(config) else None
    provider = ScoreProvider(mvs, descriptors=descriptors, origin=config.scene_origin,
                             min_matches=config.min_matches)
    plan = multi_threshold_plan(mvs, config.ordering, provider)
    write_plan(plan, config.plan_path, scene_name=mvs.scene_name)
    manifest = build_upsample_manifest(config, mvs, plan)
    write_json_atomic(config.upsample_manifest_path, manifest)

    if config.dump_scores:
        config.reports_dir.mkdir(parents=True, exist_ok=True)
        for kind in {config.ordering.select_measure, config.ordering.threshold_measure}:
            provider.table(kind).dump_csv(config.reports_dir / f"scores_{kind.value}.csv")

    total_mis = sum(count_misalignments(s, mvs, origin=config.scene_origin).count
                    for s in plan.subsequences)
    singles = sum(1 for s in plan.subsequences if s.is_singleton)
    print(f"plan: {len(plan.subsequences)} subsequences "
          f"({singles} single-image), {len(plan.coverage.covered)}/{len(mvs)} frames covered")
    for info in plan.rounds:
        eps = "singleton" if info["epsilon"] is None else f"eps={info['epsilon']:.6g}"
        print(f"  round {info['round']}: {eps}, starts={info['n_starts']}, "
              f"accepted={len(info['subseq_ids'])}")
    print(f"plan: {total_mis} transitions exceed the "
          f"{math.degrees(MISALIGNMENT_THRESHOLD):.0f} degree misalignment diagnostic")
    return plan


# ---------------------------------------------------------------------------
# upsample
# ---------------------------------------------------------------------------

def _expected_outputs(config: PipelineConfig, manifest: dict) -> List[Tuple[int, Path, int, int]]:
    """(subseq_id, path, width, height) for every output the backend must write."""
    scale = int(manifest["scale_factor"])
    out = []
    for sub in manifest["subsequences"]:
        sdir = config.upsampled_dir / subseq_dirname(sub["subseq_id"])
        for fr in sub["frames"]:
            out.append((
                sub["subseq_id"],
                sdir / frame_filename(fr["frame_id"]),
                int(fr["width"]) * scale,
                int(fr["height"]) * scale,
            ))
    return out


def _reference_upsample(config: PipelineConfig, manifest: dict) -> None:
    from .resample import bicubic_resample

    scale = int(manifest["scale_factor"])
    for sub in manifest["subsequences"]:
        sdir = config.upsampled_dir / subseq_dirname(sub["subseq_id"])
        for fr in sub["frames"]:
            lr = load_image_png(config.root / fr["lr_path"])
            hr = bicubic_resample(lr, lr.width * scale, lr.height * scale)
            save_image_png(hr, sdir / frame_filename(fr["frame_id"]))


def _run_external(command: str, manifest_path: Path, outdir: Path, scope: str) -> None:
    rendered = command.replace("{manifest}", str(manifest_path)).replace("{outdir}", str(outdir))
    timeout_env = os.environ.get(UPSAMPLE_TIMEOUT_ENV)
    timeout = float(timeout_env) if timeout_env else None
    try:
        result = subprocess.run(shlex.split(rendered), timeout=timeout)
    except FileNotFoundError as exc:
        raise PipelineError(f"upsampler command not found ({scope}): {exc}") from exc
    except subprocess.TimeoutExpired as exc:
        raise PipelineError(f"upsampler timed out after {timeout}s ({scope})") from exc
    if result.returncode != 0:
        raise PipelineError(f"upsampler exited with status {result.returncode} ({scope})")


def cmd_upsample(config: PipelineConfig) -> None:
    """Run the configured upsampler over the manifest, then verify that every
    expected output exists at LR x scale_factor resolution. Partial output is
    a hard error; nothing gets silently aggregated."""
    if not config.upsample_manifest_path.is_file():
        raise PipelineError(f"no upsample manifest at {config.upsample_manifest_path}; run plan first")
    manifest = read_json(config.upsample_manifest_path)
    config.upsampled_dir.mkdir(parents=True, exist_ok=True)

    if config.upsampler == REFERENCE_UPSAMPLER:
        _reference_upsample(config, manifest)
    elif config.per_subsequence:
        for sub in manifest["subsequences"]:
            part = dict(manifest)
            part["subsequences"] = [sub]
            part_path = config.root / f"upsample_manifest_{subseq_dirname(sub['subseq_id'])}.json"
            write_json_atomic(part_path, part)
            _run_external(config.upsampler, part_path, config.upsampled_dir,
                          f"subsequence {sub['subseq_id']}")
    else:
        _run_external(config.upsampler, config.upsample_manifest_path,
                      config.upsampled_dir, "whole manifest")

    for subseq_id, path, want_w, want_h in _expected_outputs(config, manifest):
        if not path.is_file():
            raise PipelineError(f"subsequence {subseq_id}: missing upsampled output {path}")
        got_w, got_h = read_png_size(path)
        if (got_w, got_h) != (want_w, want_h):
            raise PipelineError(
                f"subsequence {subseq_id}: {path.name} is {got_w}x{got_h}, expected {want_w}x{want_h}"
            )
    n = len(manifest["subsequences"])
    print(f"upsample: verified outputs for {n} subsequences in {config.upsampled_dir}")


# ---------------------------------------------------------------------------
# aggregate
# ---------------------------------------------------------------------------

def cmd_aggregate(config: PipelineConfig) -> Path:
    """Deduplicate upsampled subsequences into exactly one HR image per frame
    (earliest round, then lowest subsequence id, then earliest position) and
    emit a pose manifest for downstream training."""
    plan = read_plan(config.plan_path)
    mvs = load_working_set(config)

    for sub in plan.subsequences:
        sdir = config.upsampled_dir / subseq_dirname(sub.subseq_id)
        missing = [fid for fid in sub.frames if not (sdir / frame_filename(fid)).is_file()]
        if missing:
            raise AggregationError(
                f"subsequence {sub.subseq_id}: missing upsampled frames {missing}"
            )
        present = len(list(sdir.glob("frame_*.png")))
        if present != len(sub.frames):
            raise AggregationError(
                f"subsequence {sub.subseq_id}: expected {len(sub.frames)} upsampled frames, found {present}"
            )

    if set(plan.coverage.provenance) != set(mvs.frame_ids()):
        raise AggregationError("plan provenance does not cover the dataset exactly")

    config.hr_dir.mkdir(parents=True, exist_ok=True)
    provenance_doc = {}
    first_size: Optional[Tuple[int, int]] = None
    for fid, (rnd, sid, _pos) in sorted(plan.coverage.provenance.items()):
        src = config.upsampled_dir / subseq_dirname(sid) / frame_filename(fid)
        atomic_write_bytes(config.hr_dir / frame_filename(fid), src.read_bytes())
        if first_size is None:
            first_size = read_png_size(src)
        provenance_doc[str(fid)] = {"round": rnd, "subseq_id": sid}

    names = [frame_filename(fr.frame_id) for fr in mvs.frames]
    write_pose_manifest(
        mvs, config.hr_manifest_path, file_paths=names,
        width=first_size[0] if first_size else None,
        height=first_size[1] if first_size else None,
        extra={
            "spec_version": MANIFEST_SPEC_VERSION,
            "scale_factor": int(config.scale_factor),
            "loss_weights": {"lambda1": config.loss.lambda1, "lambda_ren": config.loss.lambda_ren},
        },
    )
    config.reports_dir.mkdir(parents=True, exist_ok=True)
    write_json_atomic(config.reports_dir / "aggregate_provenance.json", {
        "spec_version": MANIFEST_SPEC_VERSION,
        "frames": provenance_doc,
    })
    print(f"aggregate: wrote {len(provenance_doc)} HR frames to {config.hr_dir}")
    return config.hr_manifest_path


# ---------------------------------------------------------------------------
# eval / report
# ---------------------------------------------------------------------------

def _metric_ready(img: RasterImage, background) -> RasterImage:
    if img.channels == 4:
        return composite_background(img, background)
    return img


def cmd_eval(config: PipelineConfig, reference: Path, eval_dir: Optional[Path] = None) -> dict:
    """Per-frame and mean PSNR/SSIM of the aggregated output against a
    reference dataset, under the configured background policy. Writes JSON and
    CSV reports; infinite PSNR is marked "inf" in JSON and capped at 99 dB in
    the CSV and in means."""
    ref = load_pose_manifest(Path(reference), scale_factor=config.scale_factor,
                             scene_name=config.scene_name)
    out_dir = Path(eval_dir) if eval_dir is not None else config.hr_dir

    rows = []
    psnr_values = []
    ssim_values = []
    for fr in ref.frames:
        out_path = out_dir / frame_filename(fr.frame_id)
        if not out_path.is_file():
            raise PipelineError(f"eval: missing output image {out_path}")
        gt = _metric_ready(load_image_png(fr.source_path), config.background)
        got = _metric_ready(load_image_png(out_path), config.background)
        if (got.width, got.height) != (gt.width, gt.height):
            raise PipelineError(
                f"eval: frame {fr.frame_id} is {got.width}x{got.height}, "
                f"reference is {gt.width}x{gt.height}"
            )
        p = psnr(got, gt)
        s = ssim(got, gt)
        rows.append({
            "frame_id": fr.frame_id,
            "psnr_db": "inf" if math.isinf(p) else p,
            "ssim": s,
        })
        psnr_values.append(min(p, PSNR_CAP_DB))
        ssim_values.append(s)

    doc = {
        "spec_version": MANIFEST_SPEC_VERSION,
        "ssim_channels": "per_channel_mean",
        "psnr_cap_db": PSNR_CAP_DB,
        "background": list(config.background),
        "loss_weights": {"lambda1": config.loss.lambda1, "lambda_ren": config.loss.lambda_ren},
        "frames": rows,
        "summary": {
            "mean_psnr_db": float(np.mean(psnr_values)),
            "mean_ssim": float(np.mean(ssim_values)),
            "n_frames": len(rows),
        },
    }
    config.reports_dir.mkdir(parents=True, exist_ok=True)
    write_json_atomic(config.reports_dir / "metrics.json", doc)

    csv_lines = ["frame_id,psnr_db,ssim"]
    for row, capped in zip(rows, psnr_values):
        csv_lines.append(f"{row['frame_id']},{capped!r},{row['ssim']!r}")
    csv_lines.append(f"mean,{float(np.mean(psnr_values))!r},{float(np.mean(ssim_values))!r}")
    atomic_write_bytes(config.reports_dir / "metrics.csv",
                       ("\n".join(csv_lines) + "\n").encode("utf-8"))
    print(f"eval: mean PSNR {doc['summary']['mean_psnr_db']:.2f} dB, "
          f"mean SSIM {doc['summary']['mean_ssim']:.4f} over {len(rows)} frames")
    return doc


def cmd_report(config: PipelineConfig) -> dict:
    """Write the ordering report (misalignments, length histogram, per-round
    coverage) for an existing plan."""
    plan = read_plan(config.plan_path)
    mvs = load_working_set(config)
    doc = ordering_report(plan, mvs, origin=config.scene_origin)
    config.reports_dir.mkdir(parents=True, exist_ok=True)
    write_json_atomic(config.reports_dir / "ordering_report.json", doc)
    print(f"report: {doc['total_misalignments']} misaligned transitions across "
          f"{doc['n_subsequences']} subsequences")
    return doc


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

def cmd_run(config: PipelineConfig, eval_reference: Optional[Path] = None) -> None:
    """Full chain: degrade, plan, upsample, aggregate, then eval against the
    source dataset (or eval_reference). Eval is skipped with a notice when the
    aggregated resolution cannot match the reference (degrade and upsample
    factors differ)."""
    cmd_degrade(config)
    cmd_plan(config)
    cmd_upsample(config)
    cmd_aggregate(config)
    cmd_report(config)
    reference = Path(eval_reference) if eval_reference is not None else config.dataset
    if eval_reference is None and config.effective_degrade_factor() != int(config.scale_factor):
        print("run: eval skipped (degrade and upsample factors differ; "
              "pass an explicit reference at the output resolution)")
        return
    cmd_eval(config, reference)
