"""End-to-end orchestration: scene directory in, instance map out.

Stage order: load cloud -> voxel downsample -> select frames -> per-frame
depth construction (raw / synthetic render / supplemented) -> lift 2D masks
to 3D -> hierarchical merge -> normals -> surface segmentation -> dominant
vote -> postprocess (split, filter, fill) -> crop manifest.  Every stage is
deterministic, so a run manifest with input/output hashes suffices to check
byte-exact reproduction.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import PipelineConfig
from .depth import SyntheticDepthConfig, render_synthetic_depth, supplement_depth
from .errors import StageError
from .geometry import WorkingCloud, estimate_normals, voxel_downsample
from .instances import (
    CropRequest,
    InstanceMap,
    dominant_vote,
    export_crop_manifest,
    write_crop_manifest,
)
from .masks import PosedFrame, ScoreWeights, lift_masks, select_frames
from .merge import MaskSet, MergeConfig, dump_mask_set, hierarchical_merge
from .postprocess import PostprocessConfig, knn_fill, split_and_filter
from .sceneio import SceneDirectory, write_ply
from .segmentation import build_graph, felzenszwalb_segment

log = logging.getLogger(__name__)


@dataclass
class PipelineResult:
    cloud: WorkingCloud
    instance_map: InstanceMap
    crop_requests: list[CropRequest]
    frames: list[PosedFrame]
    merged: MaskSet
    timings: dict[str, float] = field(default_factory=dict)


def _stage(name: str, timings: dict, fn, *args, **kwargs):
    start = time.perf_counter()
    try:
        result = fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, str(exc)) from exc
    timings[name] = time.perf_counter() - start
    log.info("stage %-12s %.2fs", name, timings[name])
    return result


def build_working_cloud(scene: SceneDirectory, cfg: PipelineConfig) -> WorkingCloud:
    data = scene.load_cloud()
    return voxel_downsample(data["points"], cfg.voxel_size, colors=data.get("colors"))


def load_frames(
    scene: SceneDirectory,
    cfg: PipelineConfig,
    cloud: WorkingCloud,
    depth_mode: str | None = None,
    threads: int = 1,
) -> list[PosedFrame]:
    """Load the strided frames with the configured depth construction."""
    mode = depth_mode or cfg.depth_mode
    selected = [scene.frame_ids[i] for i in select_frames(len(scene.frame_ids), cfg.frame_stride)]
    splat_cfg = SyntheticDepthConfig(
        splat_radius=cfg.splat_radius, z_buffer_tolerance=cfg.z_buffer_tolerance
    )

    def load_one(t: int) -> PosedFrame:
        pose = scene.load_pose(t)
        raw = scene.load_depth(t)
        if mode == "raw":
            depth = raw
        else:
            synth = render_synthetic_depth(cloud, scene.intrinsics, pose, splat_cfg, raw.scale)
            if mode == "synthetic":
                depth = synth
            else:
                depth = supplement_depth(raw, synth, cfg.prefer_raw_when_synth_missing)
        return PosedFrame(
            index=t,
            depth=depth,
            intrinsics=scene.intrinsics,
            pose=pose,
            mask_labels=scene.load_mask(t),
            color_path=scene.color_path(t) if scene.color_path(t).exists() else None,
        )

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(load_one, selected))
    return [load_one(t) for t in selected]


def lift_all_frames(
    frames: list[PosedFrame],
    cloud: WorkingCloud,
    cfg: PipelineConfig,
    threads: int = 1,
) -> list[MaskSet]:
    weights = ScoreWeights(alpha=cfg.alpha, beta=cfg.beta, raw_counts=cfg.raw_counts)

    def lift_one(frame: PosedFrame) -> list:
        return lift_masks(
            frame,
            cloud,
            r_snap=cfg.snap_radius,
            min_mask_points=cfg.min_mask_points,
            weights=weights,
            dedup_cell=cfg.dedup_voxel,
            workers=1,
        )

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_frame = list(pool.map(lift_one, frames))
    else:
        per_frame = [lift_one(f) for f in frames]
    # group ids assigned after the parallel section, in frame order, so the
    # id sequence never depends on scheduling
    gid = 1
    sets = []
    for masks in per_frame:
        for m in masks:
            m.group_id = gid
            gid += 1
        sets.append(MaskSet(masks=masks))
    return sets


def segment_cloud(cloud: WorkingCloud, cfg: PipelineConfig, viewpoints, threads: int = 1):
    estimate_normals(cloud, k=cfg.normals_k, viewpoints=viewpoints, workers=threads)
    graph = build_graph(cloud, k_graph=cfg.k_graph, workers=threads)
    return felzenszwalb_segment(graph, k_fz=cfg.k_fz, min_size=cfg.min_segment_size)


def run_pipeline(
    scene: SceneDirectory | str | Path,
    cfg: PipelineConfig | None = None,
    depth_mode: str | None = None,
    out_dir: str | Path | None = None,
    threads: int = 1,
    keep_intermediate: bool = False,
) -> PipelineResult:
    """Run the full fusion pipeline over a scene directory.

    With ``out_dir`` the instance map (PLY + JSON sidecar), crop manifest,
    and a run manifest with content hashes are written there.
    """
    cfg = cfg or PipelineConfig()
    if not isinstance(scene, SceneDirectory):
        scene = SceneDirectory.open(scene)
    timings: dict[str, float] = {}

    cloud = _stage("cloud", timings, build_working_cloud, scene, cfg)
    frames = _stage("depth", timings, load_frames, scene, cfg, cloud, depth_mode, threads)
    per_frame = _stage("lift", timings, lift_all_frames, frames, cloud, cfg, threads)
    merged = _stage(
        "merge", timings, hierarchical_merge, per_frame, MergeConfig(cfg.or_threshold, cfg.dedup_voxel)
    )
    viewpoints = np.array([f.pose.camera_center for f in frames])
    segments = _stage("segment", timings, segment_cloud, cloud, cfg, viewpoints, threads)

    imap = _stage("vote", timings, dominant_vote, segments, merged)
    post_cfg = PostprocessConfig(
        dbscan_eps=cfg.dbscan_eps,
        dbscan_min_pts=cfg.dbscan_min_pts,
        min_instance_points=cfg.min_instance_points,
        knn_fill_radius=cfg.knn_fill_radius,
    )
    imap = _stage("split", timings, split_and_filter, imap, cloud, post_cfg, threads)
    imap = _stage("fill", timings, knn_fill, imap, cloud, post_cfg.knn_fill_radius, threads)
    crops = _stage("manifest", timings, export_crop_manifest, imap, frames, cfg.pad_fraction)

    result = PipelineResult(
        cloud=cloud,
        instance_map=imap,
        crop_requests=crops,
        frames=frames,
        merged=merged,
        timings=timings,
    )
    if out_dir is not None:
        _stage("write", timings, write_outputs, result, scene, cfg, Path(out_dir), keep_intermediate)
    return result


def instance_records_json(imap: InstanceMap) -> str:
    records = []
    for iid in sorted(imap.records):
        rec = imap.records[iid]
        bv = rec.best_view
        records.append(
            {
                "instance_id": rec.instance_id,
                "point_count": rec.point_count,
                "score": rec.score,
                "best_view": None
                if bv is None
                else {
                    "frame": bv.frame,
                    "mask_id": bv.mask_id,
                    "pixel_count": bv.pixel_count,
                    "bbox": list(bv.bbox),
                },
                "label": rec.label,
            }
        )
    return json.dumps({"instances": records}, indent=2, sort_keys=True)


def write_instance_map(out_dir: Path, result: PipelineResult) -> None:
    write_ply(
        out_dir / "instance_map.ply",
        result.cloud.points,
        colors=result.cloud.colors,
        int_props={"instance_id": result.instance_map.ids},
    )
    (out_dir / "instances.json").write_text(instance_records_json(result.instance_map) + "\n")


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_outputs(
    result: PipelineResult,
    scene: SceneDirectory,
    cfg: PipelineConfig,
    out_dir: Path,
    keep_intermediate: bool = False,
) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    write_instance_map(out_dir, result)
    write_crop_manifest(out_dir / "crop_manifest.jsonl", result.crop_requests)
    if keep_intermediate:
        dump_mask_set(out_dir / "merged_masks.jsonl", result.merged)
    outputs = ["instance_map.ply", "instances.json", "crop_manifest.jsonl"]
    manifest = {
        "scene": str(scene.root),
        "config": json.loads(cfg.to_json()),
        "frames_used": [f.index for f in result.frames],
        "input_hashes": {"cloud.ply": _sha256(scene.cloud_path)},
        "output_hashes": {name: _sha256(out_dir / name) for name in outputs},
    }
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
