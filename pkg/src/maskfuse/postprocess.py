"""Instance-map refinement: split disconnected instances, drop slivers,
and propagate labels into unassigned points.

The DBSCAN here is deliberately order-independent: clusters are the
connected components of core points under eps-adjacency, labeled by the
smallest core index they contain, and border points join the cluster of
their smallest-index core neighbor.  That makes results invariant to input
permutation (up to the relabeling the component ordering implies) and easy
to check against a brute-force oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree

from .errors import DataError
from .geometry import WorkingCloud
from .instances import InstanceMap


@dataclass(frozen=True)
class PostprocessConfig:
    dbscan_eps: float = 0.05
    dbscan_min_pts: int = 10
    min_instance_points: int = 50
    knn_fill_radius: float = 0.04

    def __post_init__(self):
        for name in ("dbscan_eps", "dbscan_min_pts", "min_instance_points", "knn_fill_radius"):
            if getattr(self, name) <= 0:
                raise DataError(f"{name} must be positive")


def dbscan(points: np.ndarray, eps: float, min_pts: int, workers: int = 1) -> np.ndarray:
    """Density clustering; returns per-point labels, -1 for noise.

    A point is core when at least ``min_pts`` points (itself included) lie
    within ``eps``.  Labels are dense, ordered by each cluster's smallest
    core index.
    """
    if eps <= 0 or min_pts < 1:
        raise DataError("dbscan requires eps > 0 and min_pts >= 1")
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    labels = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return labels
    tree = cKDTree(points)
    neighborhoods = tree.query_ball_point(points, eps, workers=workers)
    core = np.fromiter((len(nb) >= min_pts for nb in neighborhoods), dtype=bool, count=n)

    cluster = 0
    for seed in range(n):
        if not core[seed] or labels[seed] != -1:
            continue
        labels[seed] = cluster
        stack = [seed]
        while stack:
            node = stack.pop()
            for nb in neighborhoods[node]:
                if core[nb] and labels[nb] == -1:
                    labels[nb] = cluster
                    stack.append(nb)
        cluster += 1

    for i in range(n):
        if core[i]:
            continue
        core_neighbors = [nb for nb in neighborhoods[i] if core[nb]]
        if core_neighbors:
            labels[i] = labels[min(core_neighbors)]
    return labels


def split_and_filter(
    imap: InstanceMap, cloud: WorkingCloud, cfg: PostprocessConfig, workers: int = 1
) -> InstanceMap:
    """Per instance: DBSCAN its points, keep the id on the largest cluster,
    spin clusters of at least ``min_instance_points`` off as new instances,
    and unassign the rest (small clusters and noise)."""
    ids = imap.ids.copy()
    records = {k: replace(v) for k, v in imap.records.items()}
    next_id = max(records, default=0) + 1
    for iid in sorted(imap.records):
        member_idx = np.flatnonzero(imap.ids == iid)
        labels = dbscan(cloud.points[member_idx], cfg.dbscan_eps, cfg.dbscan_min_pts, workers)
        cluster_ids, sizes = np.unique(labels[labels >= 0], return_counts=True)
        if len(cluster_ids) == 0:
            # nothing dense enough anywhere: the instance dissolves
            ids[member_idx] = 0
            del records[iid]
            continue
        keeper = cluster_ids[int(np.argmax(sizes))]  # ties: first = lower label
        ids[member_idx[labels == -1]] = 0
        for cid, size in zip(cluster_ids.tolist(), sizes.tolist()):
            if cid == keeper:
                continue
            members = member_idx[labels == cid]
            if size >= cfg.min_instance_points:
                ids[members] = next_id
                records[next_id] = replace(
                    records[iid], instance_id=next_id, point_count=size
                )
                next_id += 1
            else:
                ids[members] = 0
        records[iid].point_count = int(np.count_nonzero(ids == iid))
    return InstanceMap(ids=ids, records=records)


def knn_fill(
    imap: InstanceMap, cloud: WorkingCloud, radius: float, workers: int = 1
) -> InstanceMap:
    """Give each unassigned point the id of its nearest assigned point
    within ``radius``, computed in a single pass against the frozen
    pre-pass assignment; assigned points never change."""
    if radius <= 0:
        raise DataError(f"knn_fill radius must be positive, got {radius}")
    assigned = np.flatnonzero(imap.ids > 0)
    unassigned = np.flatnonzero(imap.ids == 0)
    if len(assigned) == 0 or len(unassigned) == 0:
        return imap.copy()
    tree = cKDTree(cloud.points[assigned])
    dist, nearest = tree.query(
        cloud.points[unassigned], k=1, distance_upper_bound=radius, workers=workers
    )
    hit = np.isfinite(dist) & (dist <= radius)
    ids = imap.ids.copy()
    ids[unassigned[hit]] = imap.ids[assigned[nearest[hit]]]
    records = {k: replace(v) for k, v in imap.records.items()}
    for iid in records:
        records[iid].point_count = int(np.count_nonzero(ids == iid))
    return InstanceMap(ids=ids, records=records)
