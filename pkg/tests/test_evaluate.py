import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from triplift import oracle
from triplift.evaluate import (
    MetricReport,
    PairResult,
    ViewPairSpec,
    consistency_report,
    mask_iou,
    psnr,
    recolor,
    reprojection_error,
    warp_view,
)
from triplift.geometry import CameraIntrinsics, RigidPose, orbit_pose

PILOT = json.loads((Path(__file__).parent / "fixtures" / "pilot.json").read_text())["consistency"]


class TestScalars:
    def test_psnr_identical_is_inf(self):
        a = np.random.default_rng(0).random((4, 4, 3))
        assert psnr(a, a) == math.inf

    def test_psnr_20db(self):
        a = np.zeros((10, 10, 3))
        assert psnr(a, a + 0.1) == pytest.approx(20.0)

    def test_psnr_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((2, 2)), np.zeros((2, 3)))

    def test_iou(self):
        m = np.random.default_rng(1).random((8, 8)) > 0.5
        assert mask_iou(m, m) == 1.0
        assert mask_iou(m, ~m) == 0.0
        a = np.zeros((2, 2), bool)
        a[0] = True
        b = np.zeros((2, 2), bool)
        b[:, 0] = True
        assert mask_iou(a, b) == pytest.approx(1 / 3)

    def test_re_examples(self):
        ones = np.ones((4, 4, 3))
        valid = np.ones((4, 4), bool)
        assert reprojection_error(ones, ones, valid) == 0.0
        assert reprojection_error(ones, np.zeros_like(ones), valid) == 1.0
        assert reprojection_error(ones, ones, ~valid) is None


class TestWarp:
    cam = CameraIntrinsics(32.0, 32.0, 16.0, 16.0, 32, 32)

    def test_identity_warp_is_exact(self):
        rng = np.random.default_rng(0)
        rgb = rng.random((32, 32, 3))
        depth = rng.uniform(1.0, 5.0, (32, 32))
        depth[:4] = 0
        pose = orbit_pose(40.0, 10.0, 4.0)
        warped, valid = warp_view(rgb, depth, pose, pose, self.cam)
        assert np.array_equal(valid, depth > 0)
        assert np.array_equal(warped[valid], rgb[valid])
        assert reprojection_error(rgb, warped, valid) == 0.0

    @pytest.mark.parametrize("dx,z", [(0.5, 4.0), (0.25, 2.0), (-0.75, 3.0)])
    def test_parallax_integer_shift(self, dx, z):
        rgb = np.random.default_rng(2).random((32, 32, 3))
        depth = np.full((32, 32), z)
        b = RigidPose(np.eye(3), [dx, 0.0, 0.0])
        warped, valid = warp_view(rgb, depth, RigidPose.identity(), b, self.cam)
        s = int(round(self.cam.fx * dx / z))
        expect_valid = np.zeros((32, 32), bool)
        if s >= 0:
            expect_valid[:, : 32 - s] = True
            np.testing.assert_array_equal(warped[:, : 32 - s], rgb[:, s:])
        else:
            expect_valid[:, -s:] = True
            np.testing.assert_array_equal(warped[:, -s:], rgb[:, : 32 + s])
        assert np.array_equal(valid, expect_valid)

    def test_zbuffer_keeps_nearest(self):
        # two source pixels landing on the same target: the nearer one wins
        cam = self.cam
        rgb = np.zeros((32, 32, 3))
        depth = np.zeros((32, 32))
        rgb[16, 16] = [1, 0, 0]
        depth[16, 16] = 2.0
        rgb[16, 20] = [0, 0, 1]
        depth[16, 20] = 4.0
        # u_b = u_a - f*dx/z: 16.5 - 16dx and 20.5 - 8dx meet at dx = -0.5
        warped, valid = warp_view(rgb, depth, RigidPose.identity(), RigidPose(np.eye(3), [-0.5, 0, 0]), cam)
        assert valid.sum() == 1
        assert np.array_equal(warped[valid][0], [1, 0, 0])


class TestOracleConsistency:
    cam = oracle.default_camera(64)

    def report(self, index, count, reverse=False):
        scene = oracle.gen_scene(oracle.object_seed(0, index))

        def view(pose, key):
            v = oracle.render_oracle(scene, self.cam, pose)
            return v.rgb, v.depth

        return consistency_report("oracle", view, ViewPairSpec(count=count), self.cam, reverse)

    def test_oracle_below_fixture(self):
        rep = self.report(0, 20)
        assert rep.count == 20
        assert rep.mean < PILOT["oracle_re_max"]
        assert all(e >= 0 for e in rep.errors)

    def test_pair_swap_symmetry(self):
        fwd, rev = self.report(1, 100), self.report(1, 100, reverse=True)
        assert abs(fwd.mean - rev.mean) < PILOT["oracle_symmetry_max"]


class TestReport:
    def test_pairs_deterministic_and_offset(self):
        spec = ViewPairSpec(offset_deg=7.5, count=30, seed=4)
        pairs = spec.pairs()
        assert pairs == ViewPairSpec(offset_deg=7.5, count=30, seed=4).pairs()
        assert all(b - a == pytest.approx(7.5) and 0 <= e <= 20 for a, b, e in pairs)
        assert pairs != ViewPairSpec(offset_deg=7.5, count=30, seed=5).pairs()

    @pytest.mark.parametrize("kw", [dict(offset_deg=0), dict(count=0)])
    def test_invalid_spec(self, kw):
        with pytest.raises(ValueError):
            ViewPairSpec(**kw)

    def test_mean_skips_missing(self, tmp_path):
        rep = MetricReport("x", [PairResult(0, 0, 5, 0.2, 0.1), PairResult(1, 10, 15, None, 0.0),
                                 PairResult(2, 20, 25, 0.4, 0.3)])
        assert rep.mean == pytest.approx(0.3) and rep.count == 2
        assert rep.summary()["missing"] == 1
        rep.write_csv(tmp_path / "r.csv")
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0] == "pair_id,azimuth_a,azimuth_b,re,valid_fraction"
        assert lines[2].split(",")[3] == ""

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_recolor_keeps_background_and_range(self, seed):
        rgb = np.random.default_rng(seed).random((6, 6, 3))
        rgb[:2] = 0
        out = recolor(rgb, np.random.default_rng(seed))
        assert np.array_equal(out[:2], rgb[:2])
        assert out.min() >= 0 and out.max() <= 1
