"""Synthetic depth rendering from the working cloud and depth supplementation.

The supplemented image takes the raw sensor value only where both raw and
synthetic are valid; wherever either is missing the synthetic value wins,
including the case where the synthetic value is itself 0.  See
``supplement_depth`` for the opt-in alternative that keeps valid raw depth
when the synthetic render has a hole.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .geometry import CameraIntrinsics, DepthImage, Pose, WorkingCloud, project

_FAR_SENTINEL = np.int64(1) << 30


@dataclass(frozen=True)
class SyntheticDepthConfig:
    """Point-splat rendering knobs.

    ``splat_radius`` dilates each projected point into a (2r+1)^2 pixel
    square.  With ``z_buffer_tolerance`` 0 each covered pixel takes the
    nearest contributor; a positive tolerance (meters) instead averages all
    contributors within that distance of the nearest one.
    """

    splat_radius: int = 1
    z_buffer_tolerance: float = 0.0

    def __post_init__(self):
        if self.splat_radius < 0:
            raise DataError(f"splat_radius must be >= 0, got {self.splat_radius}")
        if self.z_buffer_tolerance < 0:
            raise DataError("z_buffer_tolerance must be >= 0")


def render_synthetic_depth(
    cloud: WorkingCloud,
    intrinsics: CameraIntrinsics,
    pose: Pose,
    cfg: SyntheticDepthConfig = SyntheticDepthConfig(),
    scale: float = 1000.0,
) -> DepthImage:
    """Rasterize the cloud into a z-buffered depth image; uncovered pixels are 0."""
    u, v, d, ok = project(cloud.points, intrinsics, pose, scale=scale)
    u, v, d = u[ok], v[ok], d[ok]
    w, h = intrinsics.width, intrinsics.height
    nearest = np.full(h * w, _FAR_SENTINEL, dtype=np.int64)
    r = cfg.splat_radius
    for dv in range(-r, r + 1):
        for du in range(-r, r + 1):
            uu = u + du
            vv = v + dv
            inside = (uu >= 0) & (uu < w) & (vv >= 0) & (vv < h)
            np.minimum.at(nearest, vv[inside] * w + uu[inside], d[inside])
    covered = nearest < _FAR_SENTINEL

    if cfg.z_buffer_tolerance > 0:
        tol = np.int64(np.ceil(cfg.z_buffer_tolerance * scale))
        total = np.zeros(h * w, dtype=np.int64)
        count = np.zeros(h * w, dtype=np.int64)
        for dv in range(-r, r + 1):
            for du in range(-r, r + 1):
                uu = u + du
                vv = v + dv
                inside = (uu >= 0) & (uu < w) & (vv >= 0) & (vv < h)
                flat = vv[inside] * w + uu[inside]
                keep = d[inside] <= nearest[flat] + tol
                np.add.at(total, flat[keep], d[inside][keep])
                np.add.at(count, flat[keep], 1)
        values = np.zeros(h * w, dtype=np.int64)
        values[covered] = np.floor(total[covered] / count[covered] + 0.5).astype(np.int64)
    else:
        values = np.where(covered, nearest, 0)

    values = np.clip(values, 0, np.iinfo(np.uint16).max).astype(np.uint16)
    return DepthImage(values.reshape(h, w), scale=scale)


def supplement_depth(
    raw: DepthImage,
    synth: DepthImage,
    prefer_raw_when_synth_missing: bool = False,
) -> DepthImage:
    """Patch missing raw depth with the synthetic render, pixel by pixel.

    The default rule is: output = synth if raw == 0 or synth == 0, else raw.
    Note the second disjunct zeroes valid raw depth wherever the synthetic
    render has a hole; ``prefer_raw_when_synth_missing`` keeps the raw value
    in that case instead.
    """
    if raw.values.shape != synth.values.shape:
        raise DataError(
            f"depth dimension mismatch: raw {raw.values.shape} vs synth {synth.values.shape}"
        )
    if raw.scale != synth.scale:
        raise DataError(f"depth scale mismatch: raw {raw.scale} vs synth {synth.scale}")
    r = raw.values
    s = synth.values
    if prefer_raw_when_synth_missing:
        out = np.where(r == 0, s, r)
    else:
        out = np.where((r == 0) | (s == 0), s, r)
    return DepthImage(out.astype(np.uint16), scale=raw.scale)
