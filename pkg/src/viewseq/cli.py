"""Command-line front end for the sequencing/upsampling pipeline.

Configuration lives in a single JSON file (see PipelineConfig.to_doc for the
schema); every common field can be overridden with a flag. All stage outputs
land under --root.
"""

from __future__ import annotations

import argparse
import math
import sys
from pathlib import Path
from typing import List, Optional

from .dataset import read_json
from .ordering import AggregationError
from .pipeline import (
    PipelineConfig,
    PipelineError,
    cmd_aggregate,
    cmd_degrade,
    cmd_eval,
    cmd_plan,
    cmd_report,
    cmd_run,
    cmd_upsample,
)

ANGLE_MEASURES = ("pose_angle_to_origin", "pose_direction_angle")


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="JSON config file")
    parser.add_argument("--dataset", type=Path, help="pose manifest of the input dataset")
    parser.add_argument("--root", type=Path, help="output root directory")
    parser.add_argument("--scale-factor", type=int, help="upsampling factor (default 4)")
    parser.add_argument("--degrade-factor", type=int,
                        help="downsample divisor when it differs from the upsampling factor")
    parser.add_argument("--upsampler",
                        help='"reference_bicubic" or an external command template with '
                             "{manifest} and {outdir} placeholders")
    parser.add_argument("--background", type=float, nargs=3, metavar=("R", "G", "B"),
                        help="background color for alpha compositing (default 0 0 0)")
    parser.add_argument("--scene-origin", type=float, nargs=3, metavar=("X", "Y", "Z"),
                        help="scene origin override for angle measures (default 0 0 0)")
    parser.add_argument("--select-measure", help="measure used to pick the next frame")
    parser.add_argument("--threshold-measure", help="measure tested against the threshold ladder")
    parser.add_argument("--thresholds", type=float, nargs="+",
                        help="threshold ladder in the threshold measure's units, strictest first")
    parser.add_argument("--thresholds-deg", type=float, nargs="+",
                        help="threshold ladder in degrees (angle measures only)")
    parser.add_argument("--min-subseq-len", type=int, help="minimum accepted clip length (default 8)")
    parser.add_argument("--max-features", type=int, help="ORB keypoint cap per frame (default 500)")
    parser.add_argument("--min-matches", type=int,
                        help="matches required before an ORB score counts (default 8)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="viewseq",
        description="Order unordered multi-view images into video-like clips, "
                    "hand them to an upsampler, and rebuild a full-resolution dataset.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    specs = {
        "degrade": "bicubic-downsample the dataset into an LR working copy",
        "plan": "order frames and write the plan and upsampler manifest",
        "upsample": "run the configured upsampler and verify its outputs",
        "aggregate": "deduplicate upsampled clips into one image per frame",
        "eval": "PSNR/SSIM of the aggregated output against a reference",
        "report": "write the ordering report for an existing plan",
        "run": "full chain: degrade, plan, upsample, aggregate, report, eval",
    }
    for name, help_text in specs.items():
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
        if name == "plan":
            p.add_argument("--dump-scores", action="store_true",
                           help="also write pairwise score CSVs for debugging")
        if name == "upsample":
            p.add_argument("--per-subsequence", action="store_true",
                           help="invoke the external command once per subsequence")
        if name == "eval":
            p.add_argument("--reference", type=Path, required=True,
                           help="pose manifest of the ground-truth dataset")
            p.add_argument("--eval-dir", type=Path,
                           help="directory of images to score (default: the aggregate output)")
        if name == "run":
            p.add_argument("--eval-reference", type=Path,
                           help="reference manifest for the final eval step")
    return parser


def config_from_args(args: argparse.Namespace) -> PipelineConfig:
    doc = {}
    base_dir: Optional[Path] = None
    if args.config:
        doc = dict(read_json(args.config))
        base_dir = Path(args.config).parent

    def setval(key, value):
        if value is not None:
            doc[key] = value

    setval("dataset", str(args.dataset) if args.dataset else None)
    setval("root", str(args.root) if args.root else None)
    setval("scale_factor", args.scale_factor)
    setval("degrade_factor", args.degrade_factor)
    setval("upsampler", args.upsampler)
    setval("background", list(args.background) if args.background else None)
    setval("scene_origin", list(args.scene_origin) if args.scene_origin else None)
    if getattr(args, "per_subsequence", False):
        doc["per_subsequence"] = True
    if getattr(args, "dump_scores", False):
        doc["dump_scores"] = True

    ordering = dict(doc.get("ordering", {}))
    if args.select_measure:
        ordering["select_measure"] = args.select_measure
    if args.threshold_measure:
        ordering["threshold_measure"] = args.threshold_measure
    if args.thresholds:
        ordering["thresholds"] = list(args.thresholds)
    if args.thresholds_deg:
        measure = ordering.get("threshold_measure", "pose_angle_to_origin")
        if measure not in ANGLE_MEASURES:
            raise SystemExit("--thresholds-deg only applies to angle threshold measures")
        ordering["thresholds"] = [math.radians(v) for v in args.thresholds_deg]
    if args.min_subseq_len is not None:
        ordering["min_subseq_len"] = args.min_subseq_len
    if ordering:
        doc["ordering"] = ordering

    orb = dict(doc.get("orb", {}))
    if args.max_features is not None:
        orb["max_features"] = args.max_features
    if orb:
        doc["orb"] = orb
    if args.min_matches is not None:
        doc["min_matches"] = args.min_matches

    if "dataset" not in doc or "root" not in doc:
        raise SystemExit("both a dataset manifest and an output root are required "
                         "(via --config or --dataset/--root)")

    # Paths typed on the command line are relative to the caller's cwd, not the
    # config file, so resolve CLI overrides before handing off.
    if args.dataset:
        doc["dataset"] = str(Path(args.dataset).resolve())
    if args.root:
        doc["root"] = str(Path(args.root).resolve())
    try:
        return PipelineConfig.from_doc(doc, base_dir=base_dir)
    except (TypeError, ValueError) as exc:
        raise SystemExit(f"invalid configuration: {exc}") from exc


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    config = config_from_args(args)
    try:
        if args.command == "degrade":
            cmd_degrade(config)
        elif args.command == "plan":
            cmd_plan(config)
        elif args.command == "upsample":
            cmd_upsample(config)
        elif args.command == "aggregate":
            cmd_aggregate(config)
        elif args.command == "eval":
            cmd_eval(config, args.reference, args.eval_dir)
        elif args.command == "report":
            cmd_report(config)
        elif args.command == "run":
            cmd_run(config, args.eval_reference)
    except (PipelineError, AggregationError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
