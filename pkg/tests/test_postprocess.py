"""Tests for DBSCAN, instance splitting, and nearest-neighbor fill.

The DBSCAN oracle recomputes core points and density-reachable components
from a full O(n^2) distance matrix.
"""

import numpy as np
import pytest

from maskfuse.errors import DataError
from maskfuse.geometry import WorkingCloud
from maskfuse.instances import InstanceMap, InstanceRecord
from maskfuse.masks import BestView
from maskfuse.postprocess import PostprocessConfig, dbscan, knn_fill, split_and_filter


def naive_dbscan(points, eps, min_pts):
    """Brute-force reference: distance matrix, BFS over core adjacency."""
    n = len(points)
    d2 = np.sum((points[:, None, :] - points[None, :, :]) ** 2, axis=-1)
    within = d2 <= eps * eps
    core = within.sum(axis=1) >= min_pts
    labels = np.full(n, -1, dtype=np.int64)
    cluster = 0
    for seed in range(n):
        if not core[seed] or labels[seed] != -1:
            continue
        frontier = [seed]
        labels[seed] = cluster
        while frontier:
            node = frontier.pop()
            for other in np.flatnonzero(within[node] & core):
                if labels[other] == -1:
                    labels[other] = cluster
                    frontier.append(int(other))
        cluster += 1
    for i in range(n):
        if not core[i]:
            candidates = np.flatnonzero(within[i] & core)
            if len(candidates):
                labels[i] = labels[candidates.min()]
    return labels


def record(iid, count, frame=0):
    return InstanceRecord(
        instance_id=iid,
        point_count=count,
        score=0.5,
        best_view=BestView(frame=frame, mask_id=1, pixel_count=9, bbox=(0, 0, 3, 3)),
    )


def blob(rng, center, n, spread=0.01):
    return rng.normal(loc=center, scale=spread, size=(n, 3))


class TestDbscan:
    def test_two_far_blobs(self):
        rng = np.random.default_rng(0)
        pts = np.vstack([blob(rng, (0, 0, 0), 100), blob(rng, (1, 0, 0), 100)])
        labels = dbscan(pts, eps=0.05, min_pts=5)
        assert set(labels[:100]) == {0}
        assert set(labels[100:]) == {1}

    def test_isolated_point_is_noise(self):
        pts = np.array([[0.0, 0.0, 0.0]])
        assert dbscan(pts, eps=0.05, min_pts=2).tolist() == [-1]

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(7)
        for trial in range(15):
            n = int(rng.integers(50, 600))
            centers = rng.uniform(0, 1, size=(int(rng.integers(1, 6)), 3))
            pts = np.vstack(
                [blob(rng, c, n // len(centers) + 1, spread=0.02) for c in centers]
            )[:n]
            eps = float(rng.uniform(0.02, 0.08))
            min_pts = int(rng.integers(2, 12))
            got = dbscan(pts, eps, min_pts)
            expected = naive_dbscan(pts, eps, min_pts)
            np.testing.assert_array_equal(got, expected)

    def test_order_invariant_up_to_relabeling(self):
        rng = np.random.default_rng(3)
        pts = np.vstack([blob(rng, (0, 0, 0), 80), blob(rng, (0.5, 0, 0), 80)])
        base = dbscan(pts, 0.05, 5)
        perm = rng.permutation(len(pts))
        permuted = dbscan(pts[perm], 0.05, 5)
        # cluster partition must match after undoing the permutation
        undone = np.empty_like(permuted)
        undone[perm] = permuted
        mapping = {}
        for a, b in zip(base, undone):
            assert mapping.setdefault(a, b) == b

    def test_bad_params(self):
        with pytest.raises(DataError):
            dbscan(np.zeros((3, 3)), eps=0, min_pts=1)


def make_map(ids, records):
    return InstanceMap(ids=np.asarray(ids, dtype=np.int32), records=records)


class TestSplitAndFilter:
    def cfg(self, **kw):
        defaults = dict(dbscan_eps=0.05, dbscan_min_pts=5, min_instance_points=50)
        defaults.update(kw)
        return PostprocessConfig(**defaults)

    def test_two_chairs_split(self):
        rng = np.random.default_rng(1)
        pts = np.vstack([blob(rng, (0, 0, 0), 120), blob(rng, (1, 0, 0), 80)])
        cloud = WorkingCloud(points=pts, voxel_size=0.02)
        imap = make_map(np.ones(200), {1: record(1, 200)})
        out = split_and_filter(imap, cloud, self.cfg())
        assert set(out.records) == {1, 2}
        assert (out.ids[:120] == 1).all()  # larger cluster keeps the id
        assert (out.ids[120:] == 2).all()
        assert out.records[2].best_view == out.records[1].best_view  # inherited

    def test_dense_blob_unchanged(self):
        rng = np.random.default_rng(2)
        pts = blob(rng, (0, 0, 0), 150)
        cloud = WorkingCloud(points=pts, voxel_size=0.02)
        imap = make_map(np.ones(150), {1: record(1, 150)})
        out = split_and_filter(imap, cloud, self.cfg())
        np.testing.assert_array_equal(out.ids, imap.ids)

    def test_small_primary_cluster_kept(self):
        # 30 points < min_instance_points, but the primary cluster always keeps its id
        rng = np.random.default_rng(3)
        pts = blob(rng, (0, 0, 0), 30)
        cloud = WorkingCloud(points=pts, voxel_size=0.02)
        imap = make_map(np.ones(30), {1: record(1, 30)})
        out = split_and_filter(imap, cloud, self.cfg())
        assert (out.ids == 1).all()

    def test_small_secondary_cluster_dropped(self):
        rng = np.random.default_rng(4)
        pts = np.vstack([blob(rng, (0, 0, 0), 120), blob(rng, (1, 0, 0), 20)])
        cloud = WorkingCloud(points=pts, voxel_size=0.02)
        imap = make_map(np.ones(140), {1: record(1, 140)})
        out = split_and_filter(imap, cloud, self.cfg())
        assert set(out.records) == {1}
        assert (out.ids[120:] == 0).all()

    def test_noise_points_unassigned(self):
        rng = np.random.default_rng(5)
        pts = np.vstack([blob(rng, (0, 0, 0), 100), [[5.0, 5.0, 5.0]]])
        cloud = WorkingCloud(points=pts, voxel_size=0.02)
        imap = make_map(np.ones(101), {1: record(1, 101)})
        out = split_and_filter(imap, cloud, self.cfg())
        assert out.ids[-1] == 0
        assert out.records[1].point_count == 100

    def test_never_merges_instances(self):
        rng = np.random.default_rng(6)
        pts = blob(rng, (0, 0, 0), 200)
        cloud = WorkingCloud(points=pts, voxel_size=0.02)
        ids = np.concatenate([np.ones(100), np.full(100, 2)])
        imap = make_map(ids, {1: record(1, 100), 2: record(2, 100)})
        out = split_and_filter(imap, cloud, self.cfg())
        assert set(out.records) >= {1, 2}
        assert (out.ids[:100] != 2).all()
        assert (out.ids[100:] != 1).all()


class TestKnnFill:
    def test_nearby_point_filled(self):
        pts = np.array([[0.0, 0, 0], [0.01, 0, 0], [0.5, 0, 0]])
        cloud = WorkingCloud(points=pts, voxel_size=0.02)
        imap = make_map([3, 0, 0], {3: record(3, 1)})
        out = knn_fill(imap, cloud, radius=0.04)
        assert out.ids.tolist() == [3, 3, 0]
        assert out.records[3].point_count == 2

    def test_far_point_stays_unassigned(self):
        pts = np.array([[0.0, 0, 0], [0.1, 0, 0]])
        cloud = WorkingCloud(points=pts, voxel_size=0.02)
        imap = make_map([1, 0], {1: record(1, 1)})
        out = knn_fill(imap, cloud, radius=0.04)
        assert out.ids.tolist() == [1, 0]

    def test_assigned_points_never_change(self):
        rng = np.random.default_rng(8)
        pts = rng.uniform(0, 0.2, size=(50, 3))
        cloud = WorkingCloud(points=pts, voxel_size=0.02)
        ids = np.zeros(50, dtype=np.int32)
        ids[:10] = 1
        ids[10:20] = 2
        imap = make_map(ids, {1: record(1, 10), 2: record(2, 10)})
        out = knn_fill(imap, cloud, radius=0.05)
        np.testing.assert_array_equal(out.ids[:20], ids[:20])

    def test_single_pass_no_chaining(self):
        # a chain of points 3 cm apart: only the first unassigned link fills
        pts = np.array([[0.0, 0, 0], [0.03, 0, 0], [0.06, 0, 0], [0.09, 0, 0]])
        cloud = WorkingCloud(points=pts, voxel_size=0.02)
        imap = make_map([5, 0, 0, 0], {5: record(5, 1)})
        out = knn_fill(imap, cloud, radius=0.04)
        assert out.ids.tolist() == [5, 5, 0, 0]

    def test_idempotent_against_frozen_labels(self):
        rng = np.random.default_rng(9)
        pts = rng.uniform(0, 0.3, size=(200, 3))
        cloud = WorkingCloud(points=pts, voxel_size=0.02)
        ids = np.zeros(200, dtype=np.int32)
        ids[:40] = 1
        imap = make_map(ids, {1: record(1, 40)})
        once = knn_fill(imap, cloud, radius=0.03)
        # feeding the pre-pass assignment again reproduces the same result
        again = knn_fill(imap, cloud, radius=0.03)
        np.testing.assert_array_equal(once.ids, again.ids)

    def test_matches_linear_scan_oracle(self):
        rng = np.random.default_rng(10)
        pts = rng.uniform(0, 1, size=(5000, 3))
        cloud = WorkingCloud(points=pts, voxel_size=0.02)
        ids = np.zeros(5000, dtype=np.int32)
        chosen = rng.choice(5000, size=800, replace=False)
        ids[chosen[:400]] = 1
        ids[chosen[400:]] = 2
        counts = {1: 400, 2: 400}
        imap = make_map(ids, {k: record(k, v) for k, v in counts.items()})
        radius = 0.04
        out = knn_fill(imap, cloud, radius=radius)
        assigned = np.flatnonzero(ids > 0)
        for i in np.flatnonzero(ids == 0):
            d2 = np.sum((pts[assigned] - pts[i]) ** 2, axis=1)
            j = int(np.argmin(d2))
            expected = ids[assigned[j]] if d2[j] <= radius * radius else 0
            assert out.ids[i] == expected
