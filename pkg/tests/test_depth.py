"""Tests for synthetic depth rendering and the supplementation rule."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from maskfuse.depth import SyntheticDepthConfig, render_synthetic_depth, supplement_depth
from maskfuse.errors import DataError
from maskfuse.geometry import CameraIntrinsics, DepthImage, Pose, WorkingCloud, project


INTR = CameraIntrinsics(fx=60.0, fy=60.0, cx=32.0, cy=24.0, width=64, height=48)
IDENTITY = Pose(np.eye(4))


def brute_force_splat(points, intrinsics, pose, radius, scale=1000.0):
    """O(points x pixels) reference splatter: nearest depth per covered pixel."""
    img = np.zeros((intrinsics.height, intrinsics.width), dtype=np.uint16)
    best = np.full(img.shape, np.inf)
    u, v, d, ok = project(points, intrinsics, pose, scale=scale)
    for ui, vi, di, oki in zip(u, v, d, ok):
        if not oki:
            continue
        for vv in range(vi - radius, vi + radius + 1):
            for uu in range(ui - radius, ui + radius + 1):
                if 0 <= uu < intrinsics.width and 0 <= vv < intrinsics.height:
                    if di < best[vv, uu]:
                        best[vv, uu] = di
                        img[vv, uu] = di
    return img


class TestRenderSyntheticDepth:
    def test_single_point_single_pixel(self):
        cloud = WorkingCloud(points=np.array([[0.0, 0.0, 2.0]]), voxel_size=0.02)
        img = render_synthetic_depth(cloud, INTR, IDENTITY, SyntheticDepthConfig(splat_radius=0))
        assert img.values[24, 32] == 2000
        assert np.count_nonzero(img.values) == 1

    def test_z_buffer_nearest_wins(self):
        cloud = WorkingCloud(points=np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 2.0]]), voxel_size=0.02)
        img = render_synthetic_depth(cloud, INTR, IDENTITY, SyntheticDepthConfig(splat_radius=0))
        assert img.values[24, 32] == 1000

    def test_splat_radius_covers_square(self):
        cloud = WorkingCloud(points=np.array([[0.0, 0.0, 2.0]]), voxel_size=0.02)
        img = render_synthetic_depth(cloud, INTR, IDENTITY, SyntheticDepthConfig(splat_radius=1))
        assert np.count_nonzero(img.values) == 9
        assert (img.values[23:26, 31:34] == 2000).all()

    def test_matches_brute_force_oracle_on_box_scene(self):
        rng = np.random.default_rng(21)
        # box surface point soup in front of the camera
        n = 800
        face = rng.integers(0, 3, size=n)
        pts = rng.uniform(-0.3, 0.3, size=(n, 3))
        pts[face == 0, 0] = np.where(rng.random(np.sum(face == 0)) < 0.5, -0.3, 0.3)
        pts[face == 1, 1] = np.where(rng.random(np.sum(face == 1)) < 0.5, -0.3, 0.3)
        pts[face == 2, 2] = np.where(rng.random(np.sum(face == 2)) < 0.5, -0.3, 0.3)
        pts[:, 2] += 1.5
        cloud = WorkingCloud(points=pts, voxel_size=0.02)
        for radius in (0, 1, 2):
            got = render_synthetic_depth(
                cloud, INTR, IDENTITY, SyntheticDepthConfig(splat_radius=radius)
            )
            expected = brute_force_splat(pts, INTR, IDENTITY, radius)
            np.testing.assert_array_equal(got.values, expected)

    def test_tolerance_averages_near_contributors(self):
        # two points on the same ray 2 mm apart: averaged when tolerance covers both
        cloud = WorkingCloud(
            points=np.array([[0.0, 0.0, 1.000], [0.0, 0.0, 1.002]]), voxel_size=0.02
        )
        cfg = SyntheticDepthConfig(splat_radius=0, z_buffer_tolerance=0.005)
        img = render_synthetic_depth(cloud, INTR, IDENTITY, cfg)
        assert img.values[24, 32] == 1001

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        pts = rng.uniform(-0.4, 0.4, size=(500, 3)) + [0, 0, 2.0]
        cloud = WorkingCloud(points=pts, voxel_size=0.02)
        a = render_synthetic_depth(cloud, INTR, IDENTITY)
        b = render_synthetic_depth(cloud, INTR, IDENTITY)
        np.testing.assert_array_equal(a.values, b.values)


class TestSupplementDepth:
    @pytest.mark.parametrize(
        "raw,synth,expected",
        [
            (0, 1200, 1200),  # missing raw takes synthetic
            (800, 1000, 800),  # both valid keeps raw
            (800, 0, 0),  # literal rule: synthetic hole wins even over valid raw
            (0, 0, 0),
        ],
    )
    def test_truth_table(self, raw, synth, expected):
        out = supplement_depth(
            DepthImage(np.full((2, 2), raw, dtype=np.uint16)),
            DepthImage(np.full((2, 2), synth, dtype=np.uint16)),
        )
        assert (out.values == expected).all()

    def test_prefer_raw_flag(self):
        out = supplement_depth(
            DepthImage(np.array([[800, 0]], dtype=np.uint16)),
            DepthImage(np.array([[0, 0]], dtype=np.uint16)),
            prefer_raw_when_synth_missing=True,
        )
        assert out.values.tolist() == [[800, 0]]

    def test_dimension_mismatch(self):
        with pytest.raises(DataError):
            supplement_depth(
                DepthImage(np.zeros((2, 2), dtype=np.uint16)),
                DepthImage(np.zeros((2, 3), dtype=np.uint16)),
            )

    @given(
        hnp.arrays(np.uint16, (6, 7), elements=st.integers(1, 5000)),
    )
    def test_identity_when_raw_has_no_zeros(self, raw):
        out = supplement_depth(DepthImage(raw), DepthImage(raw))
        np.testing.assert_array_equal(out.values, raw)

    @given(
        hnp.arrays(np.uint16, (5, 5), elements=st.integers(0, 3)),
        hnp.arrays(np.uint16, (5, 5), elements=st.integers(0, 3)),
    )
    def test_support_properties(self, raw, synth):
        out = supplement_depth(DepthImage(raw), DepthImage(synth)).values
        nz = out > 0
        assert (nz <= ((raw > 0) | (synth > 0))).all()
        # wherever raw is missing the output is exactly the synthetic value
        np.testing.assert_array_equal(out[raw == 0], synth[raw == 0])
