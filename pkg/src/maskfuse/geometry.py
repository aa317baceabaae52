"""Camera model, point-cloud container, and the low-level geometric kernels.

Conventions used throughout the package:

* Pixel coordinates (u, v): u is the column index, v the row index, both
  zero-based integers at pixel centers.
* Depth images store z-depth (camera-space z), not ray length, as unsigned
  16-bit values; 0 means missing.  ``scale`` converts stored units to
  meters (default 1000: millimeters).
* Poses are 4x4 camera-to-world transforms.
* Back-projection of pixel (u, v) with stored depth d:

      z = d / scale
      p_cam = ((u - cx) * z / fx,  (v - cy) * z / fy,  z)
      p_world = R @ p_cam + t
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DataError

DEFAULT_DEPTH_SCALE = 1000.0

# Covariance eigenvalue (m^2) below which a neighborhood is not even
# planar; appropriate for desk-scale clouds at centimeter resolution.
DEGENERATE_EIGENVALUE = 1e-12


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera parameters; focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise DataError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise DataError(
                f"principal point ({self.cx}, {self.cy}) outside image "
                f"{self.width}x{self.height}"
            )

    @property
    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    @property
    def pixel_count(self) -> int:
        return self.width * self.height


class Pose:
    """A rigid 4x4 camera-to-world transform."""

    __slots__ = ("matrix",)

    def __init__(self, matrix: np.ndarray):
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.shape != (4, 4):
            raise DataError(f"pose must be 4x4, got shape {matrix.shape}")
        rot = matrix[:3, :3]
        if abs(np.linalg.det(rot) - 1.0) > 1e-6:
            raise DataError(f"pose rotation determinant {np.linalg.det(rot):.9f} != 1")
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6):
            raise DataError("pose rotation block is not orthonormal")
        if not np.allclose(matrix[3], [0.0, 0.0, 0.0, 1.0], atol=1e-9):
            raise DataError("pose last row must be (0, 0, 0, 1)")
        self.matrix = matrix

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]

    @property
    def camera_center(self) -> np.ndarray:
        """World position of the camera origin."""
        return self.translation

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Camera-space points (N, 3) to world space."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return pts @ self.rotation.T + self.translation

    def transform_inverse(self, points: np.ndarray) -> np.ndarray:
        """World-space points (N, 3) to camera space."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return (pts - self.translation) @ self.rotation

    def __eq__(self, other) -> bool:
        return isinstance(other, Pose) and np.array_equal(self.matrix, other.matrix)


@dataclass
class DepthImage:
    """Height x width grid of raw depth values; 0 marks missing depth."""

    values: np.ndarray
    scale: float = DEFAULT_DEPTH_SCALE

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise DataError(f"depth image must be 2-D, got shape {self.values.shape}")
        if self.values.dtype != np.uint16:
            if np.any(self.values < 0) or np.any(self.values > np.iinfo(np.uint16).max):
                raise DataError("depth values outside uint16 range")
            self.values = self.values.astype(np.uint16)
        if self.scale <= 0:
            raise DataError(f"depth scale must be positive, got {self.scale}")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def meters(self) -> np.ndarray:
        """Depth in meters as float64; missing pixels stay exactly 0."""
        return self.values.astype(np.float64) / self.scale


@dataclass
class WorkingCloud:
    """Voxel-downsampled scene cloud all 3D masks index into.

    ``points`` is (N, 3) float64 in meters.  ``normals`` is populated by
    :func:`estimate_normals`; ``degenerate`` flags points whose neighborhood
    had no usable plane fit.  The k-d tree is built lazily and is read-only
    afterwards.
    """

    points: np.ndarray
    voxel_size: float
    colors: np.ndarray | None = None
    normals: np.ndarray | None = None
    degenerate: np.ndarray | None = None
    _kdtree: cKDTree | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise DataError(f"cloud points must be (N, 3), got {self.points.shape}")
        if len(self.points) == 0:
            raise DataError("working cloud may not be empty")
        if self.voxel_size <= 0:
            raise DataError(f"voxel size must be positive, got {self.voxel_size}")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def kdtree(self) -> cKDTree:
        if self._kdtree is None:
            self._kdtree = cKDTree(self.points)
        return self._kdtree


def pixel_grid(intrinsics: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """(u, v) integer coordinate grids of shape (height, width)."""
    v, u = np.mgrid[0 : intrinsics.height, 0 : intrinsics.width]
    return u.astype(np.int64), v.astype(np.int64)


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Round halves away from zero (platform-independent, unlike np.round)."""
    x = np.asarray(x)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def back_project(
    u,
    v,
    depth,
    intrinsics: CameraIntrinsics,
    pose: Pose,
    scale: float = DEFAULT_DEPTH_SCALE,
) -> np.ndarray:
    """Lift pixels with raw depth values to world points, shape (N, 3).

    All depths must be positive; zero depth means missing and is the
    caller's job to filter out first.
    """
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    v = np.atleast_1d(np.asarray(v, dtype=np.float64))
    depth = np.atleast_1d(np.asarray(depth, dtype=np.float64))
    if np.any(depth <= 0):
        raise DataError("back_project requires strictly positive depth values")
    z = depth / scale
    x = (u - intrinsics.cx) * z / intrinsics.fx
    y = (v - intrinsics.cy) * z / intrinsics.fy
    cam = np.stack([x, y, z], axis=1)
    return pose.transform(cam)


def project(
    points: np.ndarray,
    intrinsics: CameraIntrinsics,
    pose: Pose,
    scale: float = DEFAULT_DEPTH_SCALE,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Project world points to integer pixels and raw depth values.

    Returns ``(u, v, d, in_view)``.  A point is out of view when its
    camera-space z is <= 0, its rounded pixel falls outside the image, or
    its depth does not round to a representable positive value.  Out-of-view
    entries hold zeros; this is a value, not an error.
    """
    cam = pose.transform_inverse(points)
    z = cam[:, 2]
    in_view = z > 0
    # avoid divide-by-zero on already-rejected points
    safe_z = np.where(in_view, z, 1.0)
    u = round_half_away(intrinsics.fx * cam[:, 0] / safe_z + intrinsics.cx).astype(np.int64)
    v = round_half_away(intrinsics.fy * cam[:, 1] / safe_z + intrinsics.cy).astype(np.int64)
    d = round_half_away(z * scale).astype(np.int64)
    in_view &= (u >= 0) & (u < intrinsics.width) & (v >= 0) & (v < intrinsics.height)
    in_view &= (d > 0) & (d <= np.iinfo(np.uint16).max)
    u[~in_view] = 0
    v[~in_view] = 0
    d[~in_view] = 0
    return u, v, d, in_view


def voxel_downsample(
    points: np.ndarray,
    voxel_size: float,
    colors: np.ndarray | None = None,
    return_inverse: bool = False,
):
    """Collapse points to one centroid per occupied voxel cell.

    Cells are cubes of edge ``voxel_size`` anchored at the origin; the
    representative is the centroid of the cell's members (colors averaged).
    Output is ordered by lexicographic cell key, which makes the operation
    deterministic and idempotent.  With ``return_inverse`` the per-input
    cell index is returned alongside, for label transfer.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3 or len(points) == 0:
        raise DataError("voxel_downsample requires a nonempty (N, 3) point array")
    if voxel_size <= 0:
        raise DataError(f"voxel size must be positive, got {voxel_size}")
    cells = np.floor(points / voxel_size).astype(np.int64)
    _, first, inverse = np.unique(cells, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.ravel()
    n_cells = len(first)
    counts = np.bincount(inverse, minlength=n_cells).astype(np.float64)
    centroids = np.zeros((n_cells, 3))
    np.add.at(centroids, inverse, points)
    centroids /= counts[:, None]
    mean_colors = None
    if colors is not None:
        colors = np.asarray(colors)
        acc = np.zeros((n_cells, 3))
        np.add.at(acc, inverse, colors.astype(np.float64))
        mean_colors = np.clip(round_half_away(acc / counts[:, None]), 0, 255).astype(np.uint8)
    cloud = WorkingCloud(points=centroids, voxel_size=voxel_size, colors=mean_colors)
    if return_inverse:
        return cloud, inverse
    return cloud


def snap_to_cloud(
    points: np.ndarray,
    cloud: WorkingCloud,
    r_max: float,
    workers: int = 1,
) -> np.ndarray:
    """Map points to their nearest cloud index within ``r_max``.

    Points farther than ``r_max`` from every cloud point are dropped.
    Returns a sorted, deduplicated int64 index array.
    """
    if r_max <= 0:
        raise DataError(f"r_max must be positive, got {r_max}")
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if len(points) == 0:
        return np.empty(0, dtype=np.int64)
    dist, idx = cloud.kdtree.query(points, k=1, distance_upper_bound=r_max, workers=workers)
    hit = np.isfinite(dist) & (dist <= r_max)
    return np.unique(idx[hit]).astype(np.int64)


def estimate_normals(
    cloud: WorkingCloud,
    k: int = 30,
    viewpoints: np.ndarray | None = None,
    workers: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-point unit normals from k-NN covariance, oriented toward cameras.

    The normal is the eigenvector of the smallest covariance eigenvalue.
    Signs are canonicalized, then flipped to face the nearest viewpoint
    when viewpoints are given.  Neighborhoods of rank < 2 get the fallback
    normal (0, 0, 1) and a degeneracy flag.  Results are stored on the
    cloud and returned as ``(normals, degenerate)``.
    """
    n = len(cloud)
    if k < 3:
        raise DataError(f"normal estimation needs k >= 3, got {k}")
    if n < k:
        raise DataError(f"cloud has {n} points, fewer than k={k}")
    _, idx = cloud.kdtree.query(cloud.points, k=k, workers=workers)
    neigh = cloud.points[idx]  # (N, k, 3)
    centered = neigh - neigh.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    eigvals, eigvecs = np.linalg.eigh(cov)  # ascending
    normals = eigvecs[:, :, 0].copy()
    degenerate = eigvals[:, 1] < DEGENERATE_EIGENVALUE
    normals[degenerate] = (0.0, 0.0, 1.0)

    # canonical sign: last nonzero component positive
    flip = (normals[:, 2] < 0) | (
        (normals[:, 2] == 0) & ((normals[:, 1] < 0) | ((normals[:, 1] == 0) & (normals[:, 0] < 0)))
    )
    normals[flip] *= -1.0

    if viewpoints is not None and len(viewpoints) > 0:
        viewpoints = np.atleast_2d(np.asarray(viewpoints, dtype=np.float64))
        vp_tree = cKDTree(viewpoints)
        _, nearest_vp = vp_tree.query(cloud.points, k=1, workers=workers)
        to_vp = viewpoints[nearest_vp] - cloud.points
        facing_away = np.einsum("ij,ij->i", normals, to_vp) < 0
        normals[facing_away & ~degenerate] *= -1.0

    norms = np.linalg.norm(normals, axis=1)
    normals /= norms[:, None]
    cloud.normals = normals
    cloud.degenerate = degenerate
    return normals, degenerate
