"""Dominant-group voting and the per-instance map it produces.

Every surface segment is an atomic voting unit: it counts how many of its
points each merged mask group covers and adopts the winning group wholesale
(ties break to the smaller group id; zero coverage leaves the segment
unassigned).  Segments won by the same group coalesce into one instance.
The winning group's running score and best view carry over to the instance
record and later select the 2D crop used for feature extraction.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataError, InvariantViolation
from .masks import BestView, InstanceMask3D, PosedFrame, ScoreWeights, mask_score
from .merge import MaskSet
from .segmentation import SurfaceSegment, segment_labels

log = logging.getLogger(__name__)

__all__ = [
    "ScoreWeights",
    "mask_score",
    "InstanceRecord",
    "InstanceMap",
    "CropRequest",
    "dominant_vote",
    "export_crop_manifest",
    "write_crop_manifest",
    "read_crop_manifest",
]


@dataclass
class InstanceRecord:
    instance_id: int
    point_count: int
    score: float
    best_view: BestView | None
    feature: np.ndarray | None = None
    label: str | None = None


@dataclass
class InstanceMap:
    """Per-point instance ids (0 = unassigned) plus per-instance records."""

    ids: np.ndarray
    records: dict[int, InstanceRecord] = field(default_factory=dict)

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int32)
        self.validate()

    def validate(self) -> None:
        present, counts = np.unique(self.ids[self.ids > 0], return_counts=True)
        if set(present.tolist()) != set(self.records):
            raise InvariantViolation(
                f"instance ids {sorted(present.tolist())} do not match records "
                f"{sorted(self.records)}"
            )
        for iid, count in zip(present.tolist(), counts.tolist()):
            if self.records[iid].point_count != count:
                raise InvariantViolation(
                    f"instance {iid}: record says {self.records[iid].point_count} points, "
                    f"map has {count}"
                )

    def instance_points(self, instance_id: int) -> np.ndarray:
        return np.flatnonzero(self.ids == instance_id)

    def copy(self) -> "InstanceMap":
        return InstanceMap(
            ids=self.ids.copy(), records={k: replace(v) for k, v in self.records.items()}
        )


def dominant_vote(segments: list[SurfaceSegment], masks: MaskSet) -> InstanceMap:
    """Assign each segment the mask group covering most of its points.

    Groups that win at least one segment become instances; instance ids are
    assigned 1..K in ascending group id order.
    """
    if not segments:
        raise DataError("dominant_vote requires at least one segment")
    n_points = int(max(seg.points.max() for seg in segments)) + 1
    seg_of_point = segment_labels(segments, n_points)
    groups = sorted(masks.masks, key=lambda m: m.group_id)
    n_segments = len(segments)
    votes = np.zeros((n_segments, len(groups)), dtype=np.int64)
    for col, mask in enumerate(groups):
        np.add.at(votes[:, col], seg_of_point[mask.points], 1)

    ids = np.zeros(n_points, dtype=np.int32)
    winner_of_segment = votes.argmax(axis=1)  # first max: ties to smaller group id
    covered = votes.max(axis=1) > 0
    winning_groups = sorted({int(winner_of_segment[s]) for s in range(n_segments) if covered[s]})
    instance_of_group = {g: i + 1 for i, g in enumerate(winning_groups)}
    records: dict[int, InstanceRecord] = {}
    for s, seg in enumerate(segments):
        if not covered[s]:
            continue
        iid = instance_of_group[int(winner_of_segment[s])]
        ids[seg.points] = iid
    for g, iid in instance_of_group.items():
        mask = groups[g]
        records[iid] = InstanceRecord(
            instance_id=iid,
            point_count=int(np.count_nonzero(ids == iid)),
            score=mask.score,
            best_view=mask.best_view,
        )
    return InstanceMap(ids=ids, records=records)


@dataclass(frozen=True)
class CropRequest:
    """Where to crop an instance's best 2D view from, padded and clipped."""

    instance_id: int
    frame: int
    mask_id: int
    bbox: tuple[int, int, int, int]


def export_crop_manifest(
    imap: InstanceMap,
    frames: list[PosedFrame],
    pad_fraction: float = 0.1,
) -> list[CropRequest]:
    """One crop request per instance from its best view.

    The stored 2D bbox is dilated by ``pad_fraction`` of its width/height on
    each side, then clipped to the image.
    """
    by_index = {f.index: f for f in frames}
    requests = []
    for iid in sorted(imap.records):
        rec = imap.records[iid]
        if rec.best_view is None:
            raise InvariantViolation(f"instance {iid} has no best view")
        bv = rec.best_view
        if bv.frame not in by_index:
            raise DataError(f"instance {iid}: best-view frame {bv.frame} not loaded")
        intr = by_index[bv.frame].intrinsics
        x0, y0, x1, y1 = bv.bbox
        dx = pad_fraction * (x1 - x0)
        dy = pad_fraction * (y1 - y0)
        box = (
            max(0, int(np.floor(x0 - dx))),
            max(0, int(np.floor(y0 - dy))),
            min(intr.width, int(np.ceil(x1 + dx))),
            min(intr.height, int(np.ceil(y1 + dy))),
        )
        requests.append(
            CropRequest(instance_id=iid, frame=bv.frame, mask_id=bv.mask_id, bbox=box)
        )
    return requests


def write_crop_manifest(path, requests: list[CropRequest]) -> None:
    with open(path, "w") as fh:
        for req in requests:
            fh.write(
                json.dumps(
                    {
                        "instance_id": req.instance_id,
                        "frame": req.frame,
                        "mask_id": req.mask_id,
                        "bbox": list(req.bbox),
                    }
                )
                + "\n"
            )


def read_crop_manifest(path) -> list[CropRequest]:
    out = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            out.append(
                CropRequest(
                    instance_id=obj["instance_id"],
                    frame=obj["frame"],
                    mask_id=obj["mask_id"],
                    bbox=tuple(obj["bbox"]),
                )
            )
    return out
