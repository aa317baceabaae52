"""Hierarchical merging of candidate 3D masks across frames.

Two masks merge when their overlap ratio — intersection size over the
LARGER mask's size — exceeds the threshold.  Using the larger mask in the
denominator keeps big masks from swallowing small ones on slim evidence.
Frames combine pairwise, level by level, halving the set count until one
remains; within one combination step all mask pairs are evaluated on the
incoming masks and unified with union-find, so grouping equals the
transitive closure of the pairwise decisions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .masks import BestView, InstanceMask3D
from .union_find import DisjointSet


@dataclass(frozen=True)
class MergeConfig:
    """``or_threshold`` gates merging (strict >); ``dedup_voxel`` is the
    fine grid used to thin lifted points before index assignment."""

    or_threshold: float = 0.3
    dedup_voxel: float = 0.005

    def __post_init__(self):
        if not (0 < self.or_threshold <= 1):
            raise DataError(f"or_threshold must be in (0, 1], got {self.or_threshold}")
        if self.dedup_voxel < 0:
            raise DataError("dedup_voxel must be >= 0")


@dataclass
class MaskSet:
    """A collection of 3D masks at one hierarchy level."""

    masks: list[InstanceMask3D]
    level: int = 0

    def __len__(self) -> int:
        return len(self.masks)


def overlap_ratio(a: InstanceMask3D, b: InstanceMask3D) -> float:
    """|a & b| / max(|a|, |b|); both index sets must be nonempty."""
    inter = np.intersect1d(a.points, b.points, assume_unique=True).size
    return inter / max(len(a), len(b))


def _evaluation_order(masks: list[InstanceMask3D]) -> list[int]:
    # descending size, then ascending group id: fixed order for determinism
    return sorted(range(len(masks)), key=lambda i: (-len(masks[i]), masks[i].group_id))


def merge_masks(masks: list[InstanceMask3D], cfg: MergeConfig) -> list[InstanceMask3D]:
    """Unify every mask pair whose overlap ratio strictly exceeds the threshold.

    All pairwise decisions are taken on the input masks; union-find then
    realizes their transitive closure.  A merged group keeps the group id of
    its largest member and the score/best view of its highest-scoring member.
    """
    if not masks:
        return []
    order = _evaluation_order(masks)
    dsu = DisjointSet(len(masks))
    for a_pos in range(len(order)):
        for b_pos in range(a_pos + 1, len(order)):
            i, j = order[a_pos], order[b_pos]
            if overlap_ratio(masks[i], masks[j]) > cfg.or_threshold:
                dsu.union(i, j)
    merged: list[InstanceMask3D] = []
    rank = {idx: pos for pos, idx in enumerate(order)}
    for members in dsu.groups().values():
        members = sorted(members, key=rank.__getitem__)
        rep = masks[members[0]]
        best = max(members, key=lambda m: (masks[m].score, -rank[m]))
        points = rep.points
        if len(members) > 1:
            points = np.unique(np.concatenate([masks[m].points for m in members]))
        merged.append(
            InstanceMask3D(
                group_id=rep.group_id,
                points=points,
                score=masks[best].score,
                best_view=masks[best].best_view,
            )
        )
    merged.sort(key=lambda m: m.group_id)
    return merged


def merge_pair(left: MaskSet, right: MaskSet, cfg: MergeConfig) -> MaskSet:
    """Combine two frame-level mask sets into one merged set."""
    return MaskSet(
        masks=merge_masks(left.masks + right.masks, cfg),
        level=max(left.level, right.level) + 1,
    )


def hierarchical_merge(per_frame: list[MaskSet], cfg: MergeConfig) -> MaskSet:
    """Merge sets pairwise per level until a single set remains.

    Sets at positions (2i, 2i+1) combine; an odd trailing set promotes
    unchanged.  Final group ids are compacted to 1..G in ascending order of
    the surviving ids.
    """
    if not per_frame:
        raise DataError("hierarchical_merge requires at least one mask set")
    sets = list(per_frame)
    while len(sets) > 1:
        merged: list[MaskSet] = []
        for i in range(0, len(sets) - 1, 2):
            merged.append(merge_pair(sets[i], sets[i + 1], cfg))
        if len(sets) % 2:
            merged.append(sets[-1])
        sets = merged
    final = sets[0]
    compacted = [
        InstanceMask3D(
            group_id=new_id,
            points=m.points,
            score=m.score,
            best_view=m.best_view,
        )
        for new_id, m in enumerate(sorted(final.masks, key=lambda m: m.group_id), start=1)
    ]
    return MaskSet(masks=compacted, level=final.level)


def dump_mask_set(path, mask_set: MaskSet) -> None:
    """Debug dump: one JSON object per mask."""
    with open(path, "w") as fh:
        for m in mask_set.masks:
            fh.write(
                json.dumps(
                    {
                        "group_id": m.group_id,
                        "point_indices": m.points.tolist(),
                        "score": m.score,
                        "best_view": {
                            "frame": m.best_view.frame,
                            "mask_id": m.best_view.mask_id,
                            "pixel_count": m.best_view.pixel_count,
                            "bbox": list(m.best_view.bbox),
                        },
                    }
                )
                + "\n"
            )


def load_mask_set(path, level: int = 0) -> MaskSet:
    masks = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            bv = obj["best_view"]
            masks.append(
                InstanceMask3D(
                    group_id=obj["group_id"],
                    points=np.asarray(obj["point_indices"], dtype=np.int64),
                    score=obj["score"],
                    best_view=BestView(
                        frame=bv["frame"],
                        mask_id=bv["mask_id"],
                        pixel_count=bv["pixel_count"],
                        bbox=tuple(bv["bbox"]),
                    ),
                )
            )
    return MaskSet(masks=masks, level=level)
