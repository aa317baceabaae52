"""Pipeline configuration: one flat record of every stage's tunables.

Field names mirror the CLI flags (kebab-case there, snake_case here), and
the resolved configuration is embedded verbatim in the run manifest so a
run can be reproduced byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

from .errors import DataError

DEPTH_MODES = ("raw", "synthetic", "supplemented")


@dataclass
class PipelineConfig:
    # working cloud
    voxel_size: float = 0.02
    normals_k: int = 30
    # frame selection / lifting
    frame_stride: int = 10
    r_snap: float | None = None  # None: 2 x voxel_size
    min_mask_points: int = 25
    # depth construction
    depth_mode: str = "supplemented"
    splat_radius: int = 1
    z_buffer_tolerance: float = 0.0
    prefer_raw_when_synth_missing: bool = False
    # merging
    or_threshold: float = 0.3
    dedup_voxel: float = 0.005
    # surface segmentation
    k_graph: int = 10
    k_fz: float = 0.05
    min_segment_size: int = 50
    # scoring
    alpha: float = 1.0
    beta: float = 1.0
    raw_counts: bool = False
    pad_fraction: float = 0.1
    # postprocess
    dbscan_eps: float = 0.05
    dbscan_min_pts: int = 10
    min_instance_points: int = 50
    knn_fill_radius: float = 0.04

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.voxel_size <= 0:
            raise DataError("voxel_size must be positive")
        if self.frame_stride < 1:
            raise DataError("frame_stride must be >= 1")
        if self.depth_mode not in DEPTH_MODES:
            raise DataError(f"depth_mode must be one of {DEPTH_MODES}, got {self.depth_mode!r}")
        if not (0 < self.or_threshold <= 1):
            raise DataError("or_threshold must be in (0, 1]")
        if self.r_snap is not None and self.r_snap <= 0:
            raise DataError("r_snap must be positive")
        if self.min_mask_points < 1:
            raise DataError("min_mask_points must be >= 1")
        for name in ("k_graph", "normals_k", "min_segment_size"):
            if getattr(self, name) < 1:
                raise DataError(f"{name} must be >= 1")
        if self.k_fz <= 0:
            raise DataError("k_fz must be positive")

    @property
    def snap_radius(self) -> float:
        return self.r_snap if self.r_snap is not None else 2.0 * self.voxel_size

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        try:
            obj = json.loads(open(path).read())
        except FileNotFoundError:
            raise DataError(f"missing config file {path}") from None
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON ({exc})") from None
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise DataError(f"{path}: unknown config fields {sorted(unknown)}")
        return cls(**obj)
