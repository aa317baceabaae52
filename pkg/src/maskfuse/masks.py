"""Lift per-frame 2D mask label images into 3D index-set masks.

Each 2D mask id in a frame becomes one candidate 3D mask: its pixels with
valid depth are back-projected and snapped onto the working cloud, so a 3D
mask is a deduplicated set of cloud indices.  Every lifted mask carries a
view score (weighted pixel + point fractions) and remembers the frame and
2D mask it came from, which later drives crop selection.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .geometry import (
    CameraIntrinsics,
    DepthImage,
    Pose,
    WorkingCloud,
    back_project,
    snap_to_cloud,
)

DEFAULT_MIN_MASK_POINTS = 25


@dataclass(frozen=True)
class ScoreWeights:
    """Weights for the pixel-fraction and point-fraction score terms."""

    alpha: float = 1.0
    beta: float = 1.0
    raw_counts: bool = False  # weight raw counts instead of fractions

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise DataError("score weights must be nonnegative")
        if self.alpha + self.beta <= 0:
            raise DataError("at least one score weight must be positive")


def mask_score(
    pixel_count: int,
    point_count: int,
    frame_pixels: int,
    cloud_points: int,
    weights: ScoreWeights = ScoreWeights(),
) -> float:
    """View score: alpha * pixel term + beta * point term.

    Terms are fractions of the frame / cloud by default so alpha and beta
    act on commensurate scales; ``raw_counts`` switches to unnormalized
    counts.
    """
    if frame_pixels <= 0 or cloud_points <= 0:
        raise DataError("score denominators must be positive")
    if weights.raw_counts:
        return weights.alpha * pixel_count + weights.beta * point_count
    return (
        weights.alpha * (pixel_count / frame_pixels)
        + weights.beta * (point_count / cloud_points)
    )


@dataclass(frozen=True)
class BestView:
    """The (frame, 2D mask) pair a 3D mask currently scores highest from."""

    frame: int
    mask_id: int
    pixel_count: int
    bbox: tuple[int, int, int, int]  # x0, y0, x1, y1; half-open


@dataclass
class InstanceMask3D:
    """A candidate 3D mask: sorted unique working-cloud indices plus metadata."""

    group_id: int
    points: np.ndarray
    score: float
    best_view: BestView

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.int64)
        if self.points.size == 0:
            raise DataError(f"mask group {self.group_id} has no points")
        if self.score < 0:
            raise DataError(f"mask group {self.group_id} has negative score {self.score}")

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class PosedFrame:
    """One time step: supplemented depth, pose, intrinsics, and mask labels."""

    index: int
    depth: DepthImage
    intrinsics: CameraIntrinsics
    pose: Pose
    mask_labels: np.ndarray
    color_path: Path | None = None

    def __post_init__(self):
        shape = (self.intrinsics.height, self.intrinsics.width)
        if self.depth.values.shape != shape:
            raise DataError(f"frame {self.index}: depth shape {self.depth.values.shape} != {shape}")
        if self.mask_labels.shape != shape:
            raise DataError(f"frame {self.index}: mask shape {self.mask_labels.shape} != {shape}")


def select_frames(total_frames: int, stride: int) -> list[int]:
    """Every stride-th frame index starting at 0."""
    if stride < 1:
        raise DataError(f"stride must be >= 1, got {stride}")
    return list(range(0, total_frames, stride))


def mask_bbox(selected: np.ndarray) -> tuple[int, int, int, int]:
    """Half-open (x0, y0, x1, y1) bounding box of a boolean pixel mask."""
    vs, us = np.nonzero(selected)
    return int(us.min()), int(vs.min()), int(us.max()) + 1, int(vs.max()) + 1


def _dedup_grid(points: np.ndarray, cell: float) -> np.ndarray:
    """Keep one representative per cell of edge ``cell`` (first occurrence)."""
    keys = np.floor(points / cell).astype(np.int64)
    _, first = np.unique(keys, axis=0, return_index=True)
    return points[np.sort(first)]


def lift_masks(
    frame: PosedFrame,
    cloud: WorkingCloud,
    r_snap: float,
    min_mask_points: int = DEFAULT_MIN_MASK_POINTS,
    weights: ScoreWeights = ScoreWeights(),
    dedup_cell: float = 0.0,
    group_start: int = 1,
    workers: int = 1,
) -> list[InstanceMask3D]:
    """Lift every 2D mask in the frame to a 3D index-set mask.

    Pixels with zero depth do not project.  Back-projected points are
    optionally thinned on a ``dedup_cell`` grid before snapping (the fine
    dedup resolution; 0 disables), then snapped to the cloud within
    ``r_snap``.  Masks snapping to fewer than ``min_mask_points`` cloud
    points are dropped as projection noise.  Group ids are assigned in
    ascending 2D mask id order starting at ``group_start``.
    """
    labels = frame.mask_labels
    depth_values = frame.depth.values
    out: list[InstanceMask3D] = []
    next_gid = group_start
    ids = np.unique(labels)
    ids = ids[ids > 0]
    frame_pixels = frame.intrinsics.pixel_count
    for mid in ids:
        selected = labels == mid
        pixel_count = int(selected.sum())
        bbox = mask_bbox(selected)
        projectable = selected & (depth_values > 0)
        if not projectable.any():
            continue
        vs, us = np.nonzero(projectable)
        world = back_project(
            us, vs, depth_values[vs, us], frame.intrinsics, frame.pose, frame.depth.scale
        )
        if dedup_cell > 0:
            world = _dedup_grid(world, dedup_cell)
        indices = snap_to_cloud(world, cloud, r_snap, workers=workers)
        if len(indices) < min_mask_points:
            continue
        score = mask_score(pixel_count, len(indices), frame_pixels, len(cloud), weights)
        out.append(
            InstanceMask3D(
                group_id=next_gid,
                points=indices,
                score=score,
                best_view=BestView(
                    frame=frame.index, mask_id=int(mid), pixel_count=pixel_count, bbox=bbox
                ),
            )
        )
        next_gid += 1
    return out
