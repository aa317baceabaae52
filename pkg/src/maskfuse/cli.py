"""Command-line surface.

Subcommands: ``synth`` (generate a synthetic scene), ``pipeline`` (full
run), ``query`` / ``eval`` (downstream), plus one stage-level command per
pipeline stage (``render-depth``, ``supplement``, ``lift``, ``merge``,
``segment``, ``vote``, ``postprocess``) so each module can be exercised
from the shell in isolation.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal invariant
violation.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import DEPTH_MODES, PipelineConfig
from .depth import SyntheticDepthConfig, render_synthetic_depth, supplement_depth
from .errors import DataError, InvariantViolation, StageError
from .evaluation import evaluate, transfer_gt_labels
from .features import QuerySet, attach_features, read_feature_file, query as query_features
from .features import label_instances
from .instances import (
    InstanceMap,
    InstanceRecord,
    dominant_vote,
    export_crop_manifest,
    read_crop_manifest,
    write_crop_manifest,
)
from .masks import BestView, select_frames
from .merge import MaskSet, MergeConfig, dump_mask_set, hierarchical_merge, load_mask_set
from .pipeline import (
    build_working_cloud,
    instance_records_json,
    lift_all_frames,
    load_frames,
    run_pipeline,
    segment_cloud,
    write_instance_map,
)
from .postprocess import PostprocessConfig, knn_fill, split_and_filter
from .sceneio import SceneDirectory, read_ply, write_depth_png, write_ply
from .segmentation import dump_segments
from .synth import SceneSpec, generate

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INTERNAL = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("pipeline configuration")
    group.add_argument("--config", type=Path, help="JSON config file; flags override it")
    for field in dataclasses.fields(PipelineConfig):
        flag = "--" + field.name.replace("_", "-")
        if field.type == "bool":
            group.add_argument(flag, action=argparse.BooleanOptionalAction, default=None)
        elif field.name == "depth_mode":
            group.add_argument(flag, choices=DEPTH_MODES, default=None)
        elif field.type.startswith("int"):
            group.add_argument(flag, type=int, default=None)
        else:
            group.add_argument(flag, type=float, default=None)


def _config_from_args(args) -> PipelineConfig:
    cfg = PipelineConfig.from_file(args.config) if args.config else PipelineConfig()
    overrides = {}
    for field in dataclasses.fields(PipelineConfig):
        value = getattr(args, field.name, None)
        if value is not None:
            overrides[field.name] = value
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
        cfg.validate()
    return cfg


def _add_common(parser):
    parser.add_argument("--threads", type=int, default=1, help="worker cap for parallel stages")
    parser.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="maskfuse", description=__doc__)
    parser.add_argument("--version", action="version", version=f"maskfuse {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic scene directory")
    p.add_argument("out", type=Path)
    p.add_argument("--spec", type=Path, help="SceneSpec JSON file; flags override it")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--objects", type=int, nargs=2, metavar=("MIN", "MAX"), default=None)
    p.add_argument("--frames", type=int, default=None)
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--height", type=int, default=None)
    p.add_argument("--reflective-probability", type=float, default=None)
    p.add_argument("--depth-dropout", type=float, default=None)
    p.add_argument("--pose-jitter-deg", type=float, default=None)
    p.add_argument("--pose-jitter-m", type=float, default=None)
    p.add_argument("--mask-erosion-px", type=int, default=None)
    _add_common(p)

    p = sub.add_parser("pipeline", help="run the full fusion pipeline")
    p.add_argument("scene", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--keep-intermediate", action="store_true")
    _add_config_flags(p)
    _add_common(p)

    p = sub.add_parser("render-depth", help="render synthetic depth for the strided frames")
    p.add_argument("scene", type=Path)
    p.add_argument("--out", type=Path, required=True)
    _add_config_flags(p)
    _add_common(p)

    p = sub.add_parser("supplement", help="merge raw depth with rendered synthetic depth")
    p.add_argument("scene", type=Path)
    p.add_argument("--synth-dir", type=Path, required=True, help="output of render-depth")
    p.add_argument("--out", type=Path, required=True)
    _add_config_flags(p)
    _add_common(p)

    p = sub.add_parser("lift", help="lift per-frame 2D masks to 3D index-set masks")
    p.add_argument("scene", type=Path)
    p.add_argument("--out", type=Path, required=True, help="masks JSON-lines file")
    _add_config_flags(p)
    _add_common(p)

    p = sub.add_parser("merge", help="hierarchically merge lifted masks")
    p.add_argument("masks", type=Path, help="masks JSON-lines file from lift")
    p.add_argument("--out", type=Path, required=True)
    _add_config_flags(p)
    _add_common(p)

    p = sub.add_parser("segment", help="surface-segment the working cloud")
    p.add_argument("scene", type=Path)
    p.add_argument("--out", type=Path, required=True, help="debug PLY with segment ids")
    _add_config_flags(p)
    _add_common(p)

    p = sub.add_parser("vote", help="assign merged mask groups to surface segments")
    p.add_argument("scene", type=Path)
    p.add_argument("--masks", type=Path, required=True, help="merged masks JSON-lines")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    _add_config_flags(p)
    _add_common(p)

    p = sub.add_parser("postprocess", help="split/filter/fill an instance map")
    p.add_argument("scene", type=Path)
    p.add_argument("map_dir", type=Path, help="directory with instance_map.ply + instances.json")
    p.add_argument("--out", type=Path, required=True)
    _add_config_flags(p)
    _add_common(p)

    p = sub.add_parser("query", help="rank instances against labeled query vectors")
    p.add_argument("map_dir", type=Path, help="pipeline output directory")
    p.add_argument("--features", type=Path, required=True, help="instance feature file")
    p.add_argument("--queries", type=Path, required=True, help="labeled query vector file")
    p.add_argument("--top-k", type=int, default=5)
    p.add_argument("--assign-labels", action="store_true", help="write instances_labeled.json")
    _add_common(p)

    p = sub.add_parser("eval", help="evaluate a predicted instance map against ground truth")
    p.add_argument("--pred", type=Path, required=True, help="instance_map.ply or its directory")
    p.add_argument("--gt", type=Path, required=True, help="GT PLY (or point->id JSON)")
    p.add_argument("--report-dir", type=Path, help="also write CSV + figures here")
    _add_common(p)

    return parser


def _load_map_dir(map_dir: Path) -> tuple[np.ndarray, InstanceMap]:
    ply = read_ply(map_dir / "instance_map.ply")
    try:
        payload = json.loads((map_dir / "instances.json").read_text())
    except FileNotFoundError:
        raise DataError(f"missing {map_dir / 'instances.json'}") from None
    records = {}
    for obj in payload["instances"]:
        bv = obj.get("best_view")
        records[obj["instance_id"]] = InstanceRecord(
            instance_id=obj["instance_id"],
            point_count=obj["point_count"],
            score=obj["score"],
            best_view=None
            if bv is None
            else BestView(
                frame=bv["frame"],
                mask_id=bv["mask_id"],
                pixel_count=bv["pixel_count"],
                bbox=tuple(bv["bbox"]),
            ),
            label=obj.get("label"),
        )
    imap = InstanceMap(ids=ply["instance_id"].astype(np.int32), records=records)
    return ply["points"], imap


def _working_cloud_like(points: np.ndarray, cfg: PipelineConfig):
    from .geometry import WorkingCloud

    return WorkingCloud(points=points, voxel_size=cfg.voxel_size)


def cmd_synth(args) -> int:
    spec = SceneSpec.from_json(args.spec.read_text()) if args.spec else SceneSpec()
    overrides = {
        "seed": args.seed,
        "object_count": tuple(args.objects) if args.objects else None,
        "frame_count": args.frames,
        "image_width": args.width,
        "image_height": args.height,
        "reflective_probability": args.reflective_probability,
        "depth_dropout": args.depth_dropout,
        "pose_jitter_deg": args.pose_jitter_deg,
        "pose_jitter_m": args.pose_jitter_m,
        "mask_erosion_px": args.mask_erosion_px,
    }
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if overrides:
        spec = dataclasses.replace(spec, **overrides)
    generate(spec, args.out)
    print(json.dumps({"scene": str(args.out), "frames": spec.frame_count}))
    return EXIT_OK


def cmd_pipeline(args) -> int:
    cfg = _config_from_args(args)
    result = run_pipeline(
        args.scene,
        cfg,
        out_dir=args.out,
        threads=args.threads,
        keep_intermediate=args.keep_intermediate,
    )
    print(
        json.dumps(
            {
                "out": str(args.out),
                "instances": len(result.instance_map.records),
                "cloud_points": len(result.cloud),
                "seconds": round(sum(result.timings.values()), 2),
            }
        )
    )
    return EXIT_OK


def cmd_render_depth(args) -> int:
    cfg = _config_from_args(args)
    scene = SceneDirectory.open(args.scene)
    cloud = build_working_cloud(scene, cfg)
    splat_cfg = SyntheticDepthConfig(cfg.splat_radius, cfg.z_buffer_tolerance)
    args.out.mkdir(parents=True, exist_ok=True)
    for i in select_frames(len(scene.frame_ids), cfg.frame_stride):
        t = scene.frame_ids[i]
        synth = render_synthetic_depth(
            cloud, scene.intrinsics, scene.load_pose(t), splat_cfg, scene.load_depth(t).scale
        )
        write_depth_png(args.out / f"depth_{t:06d}.png", synth)
    print(json.dumps({"out": str(args.out)}))
    return EXIT_OK


def cmd_supplement(args) -> int:
    from .sceneio import read_depth_png

    cfg = _config_from_args(args)
    scene = SceneDirectory.open(args.scene)
    args.out.mkdir(parents=True, exist_ok=True)
    for i in select_frames(len(scene.frame_ids), cfg.frame_stride):
        t = scene.frame_ids[i]
        raw = scene.load_depth(t)
        synth = read_depth_png(args.synth_dir / f"depth_{t:06d}.png", scale=raw.scale)
        merged = supplement_depth(raw, synth, cfg.prefer_raw_when_synth_missing)
        write_depth_png(args.out / f"depth_{t:06d}.png", merged)
    print(json.dumps({"out": str(args.out)}))
    return EXIT_OK


def cmd_lift(args) -> int:
    cfg = _config_from_args(args)
    scene = SceneDirectory.open(args.scene)
    cloud = build_working_cloud(scene, cfg)
    frames = load_frames(scene, cfg, cloud, threads=args.threads)
    per_frame = lift_all_frames(frames, cloud, cfg, threads=args.threads)
    combined = MaskSet(masks=[m for s in per_frame for m in s.masks])
    dump_mask_set(args.out, combined)
    print(json.dumps({"out": str(args.out), "masks": len(combined.masks)}))
    return EXIT_OK


def cmd_merge(args) -> int:
    cfg = _config_from_args(args)
    combined = load_mask_set(args.masks)
    by_frame: dict[int, list] = {}
    for m in combined.masks:
        by_frame.setdefault(m.best_view.frame, []).append(m)
    per_frame = [MaskSet(masks=by_frame[t]) for t in sorted(by_frame)]
    merged = hierarchical_merge(per_frame, MergeConfig(cfg.or_threshold, cfg.dedup_voxel))
    dump_mask_set(args.out, merged)
    print(json.dumps({"out": str(args.out), "groups": len(merged.masks)}))
    return EXIT_OK


def cmd_segment(args) -> int:
    cfg = _config_from_args(args)
    scene = SceneDirectory.open(args.scene)
    cloud = build_working_cloud(scene, cfg)
    viewpoints = np.array(
        [scene.load_pose(scene.frame_ids[i]).camera_center
         for i in select_frames(len(scene.frame_ids), cfg.frame_stride)]
    )
    segments = segment_cloud(cloud, cfg, viewpoints, threads=args.threads)
    dump_segments(args.out, cloud, segments)
    print(json.dumps({"out": str(args.out), "segments": len(segments)}))
    return EXIT_OK


def cmd_vote(args) -> int:
    cfg = _config_from_args(args)
    scene = SceneDirectory.open(args.scene)
    cloud = build_working_cloud(scene, cfg)
    viewpoints = np.array(
        [scene.load_pose(scene.frame_ids[i]).camera_center
         for i in select_frames(len(scene.frame_ids), cfg.frame_stride)]
    )
    segments = segment_cloud(cloud, cfg, viewpoints, threads=args.threads)
    merged = load_mask_set(args.masks)
    imap = dominant_vote(segments, merged)
    args.out.mkdir(parents=True, exist_ok=True)
    write_ply(
        args.out / "instance_map.ply",
        cloud.points,
        colors=cloud.colors,
        int_props={"instance_id": imap.ids},
    )
    (args.out / "instances.json").write_text(instance_records_json(imap) + "\n")
    print(json.dumps({"out": str(args.out), "instances": len(imap.records)}))
    return EXIT_OK


def cmd_postprocess(args) -> int:
    cfg = _config_from_args(args)
    scene = SceneDirectory.open(args.scene)
    points, imap = _load_map_dir(args.map_dir)
    cloud = _working_cloud_like(points, cfg)
    post_cfg = PostprocessConfig(
        dbscan_eps=cfg.dbscan_eps,
        dbscan_min_pts=cfg.dbscan_min_pts,
        min_instance_points=cfg.min_instance_points,
        knn_fill_radius=cfg.knn_fill_radius,
    )
    imap = split_and_filter(imap, cloud, post_cfg, workers=args.threads)
    imap = knn_fill(imap, cloud, post_cfg.knn_fill_radius, workers=args.threads)
    frames = load_frames(scene, cfg, _working_cloud_like(points, cfg), depth_mode="raw",
                         threads=args.threads)
    crops = export_crop_manifest(imap, frames, cfg.pad_fraction)
    args.out.mkdir(parents=True, exist_ok=True)
    write_ply(args.out / "instance_map.ply", points, int_props={"instance_id": imap.ids})
    (args.out / "instances.json").write_text(instance_records_json(imap) + "\n")
    write_crop_manifest(args.out / "crop_manifest.jsonl", crops)
    print(json.dumps({"out": str(args.out), "instances": len(imap.records)}))
    return EXIT_OK


def cmd_query(args) -> int:
    _, imap = _load_map_dir(args.map_dir)
    manifest_path = args.map_dir / "crop_manifest.jsonl"
    manifest = read_crop_manifest(manifest_path) if manifest_path.exists() else None
    imap = attach_features(imap, read_feature_file(args.features), manifest=manifest)
    queries = QuerySet.from_records(read_feature_file(args.queries))
    if not queries.entries:
        raise DataError(f"{args.queries}: no labeled query records (key kind 2)")
    out = {
        "queries": [
            {
                "label": label,
                "matches": [
                    {"instance_id": iid, "score": round(score, 6)}
                    for iid, score in query_features(imap, vec, args.top_k)
                ],
            }
            for label, vec in queries.entries
        ]
    }
    print(json.dumps(out, indent=2))
    if args.assign_labels:
        labeled = label_instances(imap, queries)
        (args.map_dir / "instances_labeled.json").write_text(
            instance_records_json(labeled) + "\n"
        )
    return EXIT_OK


def cmd_eval(args) -> int:
    pred_path = args.pred / "instance_map.ply" if args.pred.is_dir() else args.pred
    pred = read_ply(pred_path)
    if "instance_id" not in pred:
        raise DataError(f"{pred_path}: no instance_id property")
    if args.gt.suffix == ".json":
        mapping = json.loads(args.gt.read_text())
        gt_ids = np.zeros(len(pred["points"]), dtype=np.int32)
        for index, iid in mapping.items():
            gt_ids[int(index)] = iid
    else:
        gt = read_ply(args.gt)
        if "instance_id" not in gt:
            raise DataError(f"{args.gt}: no instance_id property")
        gt_ids = transfer_gt_labels(
            gt["points"], gt["instance_id"], pred["points"], workers=args.threads
        )
    report = evaluate(pred["instance_id"].astype(np.int32), gt_ids)
    print(json.dumps(report.to_dict(), indent=2))
    if args.report_dir:
        from .report import render_report

        paths = render_report(report, args.report_dir)
        log.info("report written to %s", ", ".join(str(p) for p in paths))
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "pipeline": cmd_pipeline,
    "render-depth": cmd_render_depth,
    "supplement": cmd_supplement,
    "lift": cmd_lift,
    "merge": cmd_merge,
    "segment": cmd_segment,
    "vote": cmd_vote,
    "postprocess": cmd_postprocess,
    "query": cmd_query,
    "eval": cmd_eval,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        cause = exc.__cause__
        return EXIT_DATA if isinstance(cause, DataError) else EXIT_INTERNAL
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except InvariantViolation as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
