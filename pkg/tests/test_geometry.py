import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import march_box
from triplift.geometry import (
    BoxPose,
    Calibration,
    CameraIntrinsics,
    GeometryError,
    Ray,
    RigidPose,
    ViewSchedule,
    box_ray_bounds,
    camera_rays,
    denormalize_from_box,
    format_calibration,
    ipm_ground,
    ipm_ground_batch,
    normalize_to_box,
    orbit_pose,
    parse_calibration,
    pixel_ray,
    project,
    ray_aabb,
    sample_view_schedule,
    slab_intersect,
    wrap_angle,
    yaw_matrix,
)

angles = st.floats(-math.pi, math.pi, allow_nan=False)


def random_pose(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    R = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])
    u, _, vt = np.linalg.svd(R)
    return RigidPose(u @ vt, rng.normal(size=3) * 3)


class TestIntrinsics:
    def test_rejects_bad_focal(self):
        with pytest.raises(GeometryError):
            CameraIntrinsics(0, 1, 5, 5, 10, 10)

    def test_rejects_principal_point_outside(self):
        with pytest.raises(GeometryError):
            CameraIntrinsics(10, 10, 10, 5, 10, 10)

    def test_scaled_keeps_field_of_view(self, cam64):
        big = cam64.scaled(2)
        assert (big.width, big.height) == (128, 128)
        assert big.fx / big.width == pytest.approx(cam64.fx / cam64.width)

    def test_cropped_shifts_principal_point(self, cam64):
        c = cam64.cropped(10, 20, 5, 5)
        assert (c.cx, c.cy, c.width, c.height) == (22.0, 12.0, 5, 5)


class TestRigidPose:
    def test_rejects_non_orthonormal(self):
        with pytest.raises(GeometryError):
            RigidPose(np.diag([1.0, 1.0, 1.0 + 1e-6]), np.zeros(3))

    def test_rejects_reflection(self):
        with pytest.raises(GeometryError):
            RigidPose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))

    def test_inverse_and_compose(self):
        rng = np.random.default_rng(0)
        p = random_pose(rng)
        ident = p.compose(p.inverse())
        np.testing.assert_allclose(ident.rotation, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(ident.translation, 0, atol=1e-12)

    def test_matrix_round_trip(self):
        p = random_pose(np.random.default_rng(1))
        q = RigidPose.from_matrix(p.matrix())
        np.testing.assert_array_equal(q.rotation, p.rotation)


class TestPixelRay:
    def test_principal_point_is_optical_axis(self, cam64):
        r = pixel_ray(cam64, RigidPose.identity(), (cam64.cx, cam64.cy))
        np.testing.assert_allclose(r.direction, [0, 0, 1], atol=1e-15)

    def test_one_focal_length_offset_is_45_degrees(self):
        cam = CameraIntrinsics(100, 100, 50, 50, 200, 100)
        r = pixel_ray(cam, RigidPose.identity(), (150, 50))
        np.testing.assert_allclose(r.direction, np.array([1, 0, 1]) / math.sqrt(2), atol=1e-15)

    def test_out_of_bounds(self, cam64):
        with pytest.raises(GeometryError):
            pixel_ray(cam64, RigidPose.identity(), (-1, 3))

    def test_project_unproject_round_trip(self, cam64):
        rng = np.random.default_rng(2)
        for _ in range(50):
            pose = random_pose(rng)
            px = rng.uniform(0, 64, 2)
            r = pixel_ray(cam64, pose, px)
            d_cam = pose.rotation.T @ r.direction
            point = r.at(10.0 / d_cam[2])  # camera depth 10
            back, z = project(cam64, pose, point)
            assert z == pytest.approx(10.0)
            np.testing.assert_allclose(back, px, atol=1e-6)

    def test_ray_directions_are_unit(self, cam64):
        _, d, cos_axis = camera_rays(cam64, random_pose(np.random.default_rng(3)))
        np.testing.assert_allclose(np.linalg.norm(d, axis=-1), 1.0, atol=1e-12)
        assert np.all(cos_axis > 0) and np.all(cos_axis <= 1)

    def test_ray_invariants(self):
        with pytest.raises(GeometryError):
            Ray(np.zeros(3), np.zeros(3))
        with pytest.raises(GeometryError):
            Ray(np.zeros(3), np.ones(3), near=2.0, far=1.0)


class TestRayAabb:
    def test_head_on(self):
        assert ray_aabb(Ray([0, 0, -3], [0, 0, 1])) == pytest.approx((2.0, 4.0))

    def test_miss(self):
        assert ray_aabb(Ray([0, 5, 0], [1, 0, 0])) is None

    def test_origin_inside_clamps_near(self):
        tn, tf = ray_aabb(Ray([0, 0, 0], [0, 0, 1]))
        assert (tn, tf) == (0.0, 1.0)

    def test_parallel_components(self):
        # along x inside the y/z slabs -> hit; outside -> miss
        assert ray_aabb(Ray([-3, 0.5, 0.5], [1, 0, 0])) == pytest.approx((2.0, 4.0))
        assert ray_aabb(Ray([-3, 1.5, 0.5], [1, 0, 0])) is None

    def test_rejects_degenerate_box(self):
        with pytest.raises(GeometryError):
            ray_aabb(Ray([0, 0, -3], [0, 0, 1]), box_min=1.0, box_max=1.0)

    def test_endpoints_on_surface(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            r = Ray(rng.uniform(-4, 4, 3), rng.normal(size=3))
            res = ray_aabb(r)
            if res is None:
                continue
            tn, tf = res
            assert tn < tf
            for t in (tf,) + ((tn,) if tn > 0 else ()):
                p = r.at(t)
                assert abs(np.abs(p).max() - 1.0) < 1e-6

    def test_agrees_with_ray_march(self):
        rng = np.random.default_rng(5)
        for _ in range(300):
            lo = rng.uniform(-1.5, -0.2, 3)
            hi = lo + rng.uniform(0.3, 2.0, 3)
            r = Ray(rng.uniform(-4, 4, 3), rng.normal(size=3))
            res = ray_aabb(r, lo, hi)
            ref, dt = march_box(r.origin, r.direction, lo, hi)
            if ref is None:
                # grazing hits shorter than the march step can be missed by the oracle
                assert res is None or res[1] - res[0] < dt
                continue
            assert res is not None
            assert abs(res[0] - ref[0]) <= dt and abs(res[1] - ref[1]) <= dt

    def test_oriented_box_matches_local_frame(self):
        rng = np.random.default_rng(6)
        box = BoxPose(1.0, 1.5, 10.0, 4.0, 1.6, 1.5, 0.7)
        o = np.zeros((100, 3))
        d = rng.normal(size=(100, 3)) * 0.1 + [0.1, 0.1, 1]
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        tn, tf, hit = box_ray_bounds(o, d, box)
        for i in np.flatnonzero(hit):
            for t in (tn[i], tf[i]):
                local = normalize_to_box(o[i] + t * d[i], box, check=False)
                assert abs(np.abs(local).max() - 1.0) < 1e-9

    @given(st.floats(-3, 3), st.floats(-3, 3), st.floats(-3, 3))
    def test_slab_symmetric_under_direction_flip(self, x, y, z):
        o = np.array([x, y, z])
        d = np.array([0.3, -0.5, 0.8])
        _, _, hit_f = slab_intersect(o, d)
        _, _, hit_b = slab_intersect(o, -d)
        inside = np.all(np.abs(o) < 1)
        if inside:
            assert hit_f and hit_b


class TestBoxNormalization:
    box = BoxPose(2.0, 1.6, 15.0, 3.9, 1.6, 1.5, 0.0)

    def test_center_maps_to_origin(self):
        np.testing.assert_allclose(normalize_to_box(self.box.center, self.box), 0, atol=1e-12)

    def test_corner_maps_to_corner(self):
        c = self.box.center + [self.box.l / 2, self.box.h / 2, self.box.w / 2]
        np.testing.assert_allclose(normalize_to_box(c, self.box), [1, 1, 1], atol=1e-12)

    def test_all_corners(self):
        local = normalize_to_box(self.box.corners(), self.box)
        np.testing.assert_allclose(np.abs(local), 1.0, atol=1e-12)

    def test_outside_raises(self):
        with pytest.raises(GeometryError):
            normalize_to_box(self.box.center + [10, 0, 0], self.box)

    def test_bottom_face_holds_label_point(self):
        bottom = normalize_to_box([self.box.x, self.box.y, self.box.z], self.box)
        np.testing.assert_allclose(bottom, [0, 1, 0], atol=1e-12)

    @given(angles, st.tuples(*[st.floats(-1, 1)] * 3))
    def test_round_trip(self, theta, local):
        box = BoxPose(-3.0, 1.7, 20.0, 4.2, 1.7, 1.4, theta)
        p = denormalize_from_box(np.array(local), box)
        np.testing.assert_allclose(denormalize_from_box(normalize_to_box(p, box, check=False), box), p, atol=1e-9)
        np.testing.assert_allclose(normalize_to_box(p, box, check=False), local, atol=1e-9)

    def test_pi_over_three_interior(self):
        box = BoxPose(0.5, 1.0, 8.0, 3.0, 2.0, 1.0, math.pi / 3)
        p = denormalize_from_box([0.3, -0.2, 0.9], box)
        np.testing.assert_allclose(denormalize_from_box(normalize_to_box(p, box), box), p, atol=1e-9)

    def test_rejects_nonpositive_extent(self):
        with pytest.raises(GeometryError):
            BoxPose(0, 0, 0, 0, 1, 1, 0)


class TestIpm:
    def test_nadir_camera(self):
        cam = CameraIntrinsics(100, 100, 50, 50, 100, 100)
        # camera 2 m above y = 0 (y up world), looking straight down
        pose = RigidPose.look_at([1.0, 2.0, 3.0], target=[1.0, 0.0, 3.0], up=[0, 0, 1])
        np.testing.assert_allclose(ipm_ground(cam, pose, 0.0, (50, 50)), [1.0, 3.0], atol=1e-12)

    def test_horizon_is_empty(self):
        cam = CameraIntrinsics(100, 100, 50, 50, 100, 100)
        assert ipm_ground(cam, RigidPose.identity(), 1.65, (30, 50)) is None
        assert ipm_ground(cam, RigidPose.identity(), 1.65, (30, 10)) is None

    def test_round_trip_and_plane_residual(self):
        cam = CameraIntrinsics(721.5, 721.5, 609.6, 172.9, 1242, 375)
        pose = RigidPose.identity()
        rng = np.random.default_rng(7)
        px = np.stack([rng.uniform(0, 1242, 500), rng.uniform(175, 375, 500)], -1)
        pts, valid = ipm_ground_batch(cam, pose, 1.65, px)
        assert valid.all()
        assert np.abs(pts[:, 1] - 1.65).max() < 1e-9
        back, _ = project(cam, pose, pts)
        np.testing.assert_allclose(back, px, atol=1e-6)

    def test_camera_on_plane_raises(self):
        cam = CameraIntrinsics(100, 100, 50, 50, 100, 100)
        with pytest.raises(GeometryError):
            ipm_ground(cam, RigidPose.identity(), 0.0, (50, 80))


class TestViewSchedule:
    def test_canonical_view(self):
        p = orbit_pose(0.0, 0.0, 4.0)
        np.testing.assert_allclose(p.center, [0, 0, -4], atol=1e-12)
        np.testing.assert_allclose(p.optical_axis, [0, 0, 1], atol=1e-12)
        # y-up world: camera "down" axis points to -y
        np.testing.assert_allclose(p.rotation[:, 1], [0, -1, 0], atol=1e-12)

    def test_single_view_schedule(self):
        poses = sample_view_schedule(ViewSchedule((0.0, 0.0), (0.0, 0.0), 4.0, 1))
        np.testing.assert_allclose(poses[0].center, [0, 0, -4], atol=1e-12)

    def test_two_hundred_views_in_range(self):
        from triplift.geometry import schedule_angles

        s = ViewSchedule(count=200)
        az, el = schedule_angles(s, 3)
        assert np.all((el >= 0) & (el <= 20)) and np.all((az >= 0) & (az < 360))
        for p in sample_view_schedule(s, 3):
            c = p.center
            # optical axis passes through the origin
            assert np.linalg.norm(np.cross(p.optical_axis, -c / np.linalg.norm(c))) < 1e-9
            assert np.abs(p.rotation.T @ p.rotation - np.eye(3)).max() < 1e-9
            elev = math.degrees(math.asin(c[1] / np.linalg.norm(c)))
            assert -1e-9 <= elev <= 20 + 1e-9

    def test_deterministic(self):
        a = sample_view_schedule(ViewSchedule(), 11)
        b = sample_view_schedule(ViewSchedule(), 11)
        assert all(np.array_equal(p.matrix(), q.matrix()) for p, q in zip(a, b))

    def test_bad_radius(self):
        with pytest.raises(GeometryError):
            sample_view_schedule(ViewSchedule(radius=0.0))

    def test_bad_elevation_range(self):
        with pytest.raises(GeometryError):
            ViewSchedule(elevation_range=(0, 90))


class TestAngles:
    @given(st.floats(-50, 50))
    def test_wrap_range(self, a):
        w = wrap_angle(a)
        assert -math.pi < w <= math.pi
        assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-9)

    def test_wrap_pi(self):
        assert wrap_angle(math.pi) == pytest.approx(math.pi)
        assert wrap_angle(-math.pi) == pytest.approx(math.pi)

    @given(angles)
    def test_yaw_is_rotation(self, t):
        R = yaw_matrix(t)
        np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)


class TestCalibration:
    def test_round_trip(self):
        cam = CameraIntrinsics(721.5377, 721.5377, 609.5593, 172.854, 1242, 375)
        pose = random_pose(np.random.default_rng(8))
        c = parse_calibration(format_calibration(Calibration(cam, pose, 1.73)))
        assert c.cam == cam and c.cam_height_m == 1.73
        np.testing.assert_array_equal(c.pose.matrix(), pose.matrix())

    def test_missing_key(self):
        with pytest.raises(GeometryError):
            parse_calibration("fx=1\nfy=1\n")

    def test_defaults_and_comments(self):
        c = parse_calibration("# demo\nfx=10\nfy=10\ncx=5\ncy=5\nwidth=10\nheight=10\n")
        assert c.cam_height_m == 1.65
        np.testing.assert_array_equal(c.pose.rotation, np.eye(3))

    def test_bad_extrinsic(self):
        with pytest.raises(GeometryError):
            parse_calibration("fx=10\nfy=10\ncx=5\ncy=5\nwidth=10\nheight=10\nextrinsic=1 2 3\n")
