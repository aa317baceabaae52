"""Graph-based surface segmentation over the working cloud.

The cloud becomes a symmetric k-NN graph whose edge weights measure normal
disagreement, w(i, j) = 1 - max(0, n_i . n_j); coplanar neighbors cost 0,
perpendicular or opposing normals cost 1.  The graph is partitioned with
the classic efficient graph segmentation sweep: edges ascend by weight and
two components merge only if the edge is no heavier than either side's
internal variation plus a size-dependent slack k/|C|.  Undersized
components are then folded into their lowest-weight neighbor.  The
resulting surface segments are the atomic voting units downstream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .geometry import WorkingCloud
from .sceneio import write_ply
from .union_find import DisjointSet


@dataclass
class SegmentGraph:
    """Undirected simple graph over cloud indices; edges sorted by (i, j)."""

    n_nodes: int
    edges: np.ndarray  # (E, 2) int64, i < j
    weights: np.ndarray  # (E,) float64 in [0, 1]


@dataclass
class SurfaceSegment:
    """One normal-coherent region: a sorted set of working-cloud indices."""

    segment_id: int
    points: np.ndarray

    def __len__(self) -> int:
        return len(self.points)


def build_graph(cloud: WorkingCloud, k_graph: int = 10, workers: int = 1) -> SegmentGraph:
    """Symmetric k-NN graph with normal-dissimilarity edge weights."""
    if cloud.normals is None:
        raise DataError("build_graph requires estimated normals")
    n = len(cloud)
    if n < k_graph + 1:
        raise DataError(f"cloud has {n} points, need more than k_graph={k_graph}")
    _, idx = cloud.kdtree.query(cloud.points, k=k_graph + 1, workers=workers)
    src = np.repeat(np.arange(n, dtype=np.int64), k_graph)
    dst = idx[:, 1:].reshape(-1).astype(np.int64)  # drop self column
    lo = np.minimum(src, dst)
    hi = np.maximum(src, dst)
    keep = lo != hi  # guards against duplicate coordinates
    edges = np.unique(np.column_stack([lo[keep], hi[keep]]), axis=0)
    dots = np.einsum("ij,ij->i", cloud.normals[edges[:, 0]], cloud.normals[edges[:, 1]])
    weights = 1.0 - np.clip(dots, 0.0, 1.0)
    return SegmentGraph(n_nodes=n, edges=edges, weights=weights)


def felzenszwalb_segment(
    graph: SegmentGraph, k_fz: float = 0.05, min_size: int = 50
) -> list[SurfaceSegment]:
    """Partition the graph into surface segments.

    Edges are processed in ascending weight (ties by edge index).  Components
    C1, C2 joined by an edge of weight w merge iff
    w <= min(Int(C1) + k_fz/|C1|, Int(C2) + k_fz/|C2|), where Int is the
    largest weight already absorbed into the component.  A second pass over
    the same edge order folds components smaller than ``min_size`` into
    whichever neighbor their cheapest edge reaches first.  Segment ids are
    dense, ordered by each segment's smallest member index.
    """
    if k_fz <= 0:
        raise DataError(f"k_fz must be positive, got {k_fz}")
    n = graph.n_nodes
    dsu = DisjointSet(n)
    internal = np.zeros(n)
    order = np.argsort(graph.weights, kind="stable")
    for e in order:
        i, j = graph.edges[e]
        w = graph.weights[e]
        ri, rj = dsu.find(int(i)), dsu.find(int(j))
        if ri == rj:
            continue
        if w <= min(internal[ri] + k_fz / dsu.size[ri], internal[rj] + k_fz / dsu.size[rj]):
            root = dsu.union(ri, rj)
            internal[root] = w
    # fold undersized components; ascending edge order makes the first edge
    # touching a small component its lowest-weight escape
    for e in order:
        i, j = graph.edges[e]
        ri, rj = dsu.find(int(i)), dsu.find(int(j))
        if ri == rj:
            continue
        if dsu.size[ri] < min_size or dsu.size[rj] < min_size:
            dsu.union(ri, rj)

    members: dict[int, list[int]] = {}
    for node in range(n):
        members.setdefault(dsu.find(node), []).append(node)
    segments = [
        SurfaceSegment(segment_id=sid, points=np.asarray(pts, dtype=np.int64))
        for sid, pts in enumerate(sorted(members.values(), key=lambda p: p[0]))
    ]
    return segments


def segment_labels(segments: list[SurfaceSegment], n_points: int) -> np.ndarray:
    """Per-point segment id array; every point belongs to exactly one segment."""
    labels = np.full(n_points, -1, dtype=np.int64)
    for seg in segments:
        labels[seg.points] = seg.segment_id
    if (labels < 0).any():
        raise DataError("segments do not cover the cloud")
    return labels


def dump_segments(path, cloud: WorkingCloud, segments: list[SurfaceSegment]) -> None:
    """Debug dump: the cloud with a per-vertex segment id property."""
    labels = segment_labels(segments, len(cloud))
    write_ply(path, cloud.points, colors=cloud.colors, int_props={"segment_id": labels})
