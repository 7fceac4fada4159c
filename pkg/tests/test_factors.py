import math

import numpy as np
import pytest

from obvi.factors import (
    BoundingBoxObservation,
    FeatureObservation,
    OdomFactorSpec,
    ShapePrior,
    bbox_residual,
    inflate_occluded_covariance,
    ltm_prior_residual,
    odometry_residual,
    reprojection_residual,
    scale_odom_covariance,
    shape_prior_residual,
    sqrt_info,
)
from obvi.geometry import FULL, UPRIGHT, Ellipsoid, PixelBox, Pose, pose_between
from helpers import default_camera, random_ellipsoid, random_frontal_config, random_pose


def rel_err(J_analytic, J_fd):
    scale = max(np.abs(J_analytic).max(), np.abs(J_fd).max(), 1e-8)
    return np.abs(J_analytic - J_fd).max() / scale


def fd_pose_jacobian(f, pose, eps=1e-6):
    cols = []
    for k in range(6):
        d = np.zeros(6)
        d[k] = eps
        plus = f(pose.retract(d[:3], d[3:]))
        minus = f(pose.retract(-d[:3], -d[3:]))
        cols.append((plus - minus) / (2.0 * eps))
    return np.stack(cols, axis=1)


def fd_ellipsoid_jacobian(f, obj, eps=1e-6):
    n = obj.param_dim()
    cols = []
    for k in range(n):
        d = np.zeros(n)
        d[k] = eps
        cols.append((f(obj.retract(d)) - f(obj.retract(-d))) / (2.0 * eps))
    return np.stack(cols, axis=1)


def fd_point_jacobian(f, p, eps=1e-6):
    cols = []
    for k in range(3):
        d = np.zeros(3)
        d[k] = eps
        cols.append((f(p + d) - f(p - d)) / (2.0 * eps))
    return np.stack(cols, axis=1)


def random_spd(rng, n, scale=1.0):
    A = rng.normal(size=(n, n))
    return scale * (A @ A.T + n * np.eye(n))


class TestReprojection:
    def test_exact_projection_zero_residual(self):
        cam = default_camera()
        obs = FeatureObservation(np.array([320.0, 240.0]), 0, 0, 0, np.eye(2))
        # feature straight down the optical axis of the identity-extrinsic camera
        r, valid = reprojection_residual(Pose.identity(), np.array([0.0, 0.0, 10.0]), obs, cam)
        assert valid
        np.testing.assert_allclose(r, 0.0, atol=1e-12)

    def test_one_pixel_offset(self):
        cam = default_camera()
        obs = FeatureObservation(np.array([321.0, 240.0]), 0, 0, 0, np.eye(2))
        r, valid = reprojection_residual(Pose.identity(), np.array([0.0, 0.0, 10.0]), obs, cam)
        assert valid
        np.testing.assert_allclose(r, [-1.0, 0.0], atol=1e-12)

    def test_negative_depth_flagged_invalid(self):
        cam = default_camera()
        obs = FeatureObservation(np.array([320.0, 240.0]), 0, 0, 0, np.eye(2))
        r, Jp, Jf, valid = reprojection_residual(
            Pose.identity(), np.array([0.0, 0.0, -5.0]), obs, cam, jacobians=True
        )
        assert not valid
        assert not r.any() and not Jp.any() and not Jf.any()

    def test_jacobians_match_finite_differences(self):
        rng = np.random.default_rng(20)
        cam = default_camera(extrinsic=random_pose(rng, t_scale=0.3))
        for _ in range(100):
            pose = random_pose(rng, t_scale=2.0)
            # sample a feature guaranteed in front of the camera
            cam_in_world = pose.compose(cam.extrinsic)
            p_c = np.array([rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(2.0, 20.0)])
            feature = cam_in_world.transform(p_c[None, :])[0]
            obs = FeatureObservation(
                rng.uniform(0, 640, size=2), 0, 0, 0, random_spd(rng, 2, 0.5)
            )

            r, Jp, Jf, valid = reprojection_residual(pose, feature, obs, cam, jacobians=True)
            assert valid

            def f_pose(p):
                return reprojection_residual(p, feature, obs, cam)[0]

            def f_pt(x):
                return reprojection_residual(pose, x, obs, cam)[0]

            assert rel_err(Jp, fd_pose_jacobian(f_pose, pose)) < 1e-5
            assert rel_err(Jf, fd_point_jacobian(f_pt, feature)) < 1e-5

    def test_whitening_semantics(self):
        rng = np.random.default_rng(21)
        cam = default_camera()
        cov = random_spd(rng, 2, 2.0)
        obs = FeatureObservation(np.array([300.0, 200.0]), 0, 0, 0, cov)
        pose = Pose.identity()
        feat = np.array([0.5, -0.2, 8.0])
        r, _ = reprojection_residual(pose, feat, obs, cam)
        raw, _ = reprojection_residual(
            pose, feat,
            FeatureObservation(obs.pixel, 0, 0, 0, np.eye(2)), cam
        )
        assert abs(r @ r - raw @ np.linalg.solve(cov, raw)) < 1e-10 * max(1.0, raw @ raw)


class TestOdometry:
    def test_zero_when_relative_matches(self):
        rng = np.random.default_rng(22)
        a, b = random_pose(rng), random_pose(rng)
        spec = OdomFactorSpec(0, 1, pose_between(a, b), np.eye(6))
        np.testing.assert_allclose(odometry_residual(a, b, spec), 0.0, atol=1e-9)

    def test_small_translation_offset(self):
        a = Pose.identity()
        b = Pose(np.array([1.0, 0.0, 0.0]), np.array([0.0, 0.0, 0.0, 1.0]))
        measured = Pose(np.array([0.9, 0.0, 0.0]), np.array([0.0, 0.0, 0.0, 1.0]))
        r = odometry_residual(a, b, OdomFactorSpec(0, 1, measured, np.eye(6)))
        np.testing.assert_allclose(r, [0.1, 0, 0, 0, 0, 0], atol=1e-12)

    def test_jacobians_match_finite_differences(self):
        rng = np.random.default_rng(23)
        for _ in range(100):
            a, b = random_pose(rng), random_pose(rng)
            meas = random_pose(rng, t_scale=1.0)
            spec = OdomFactorSpec(0, 1, meas, random_spd(rng, 6, 0.3))
            r, Ja, Jb = odometry_residual(a, b, spec, jacobians=True)

            assert rel_err(Ja, fd_pose_jacobian(lambda p: odometry_residual(p, b, spec), a)) < 1e-5
            assert rel_err(Jb, fd_pose_jacobian(lambda p: odometry_residual(a, p, spec), b)) < 1e-5

    def test_indices_must_be_consecutive(self):
        with pytest.raises(ValueError):
            OdomFactorSpec(0, 2, Pose.identity(), np.eye(6))


class TestScaleOdomCovariance:
    def test_zero_motion_keeps_base(self):
        base = np.diag([1e-4] * 6)
        out = scale_odom_covariance(Pose.identity(), base, np.full(6, 0.05))
        np.testing.assert_allclose(out, base, atol=1e-15)

    def test_formula_value(self):
        # 1 m forward, coefficient 0.05/m, base diag 1e-4
        motion = Pose(np.array([1.0, 0.0, 0.0]), np.array([0.0, 0.0, 0.0, 1.0]))
        out = scale_odom_covariance(motion, np.diag([1e-4] * 6), np.full(6, 0.05))
        assert abs(out[0, 0] - (1e-4 + 2.5e-3)) < 1e-15
        assert abs(out[1, 1] - 1e-4) < 1e-15

    def test_monotone_in_motion(self):
        base = np.diag([1e-4] * 6)
        s = np.full(6, 0.05)
        one = scale_odom_covariance(
            Pose(np.array([1.0, 0, 0]), np.array([0.0, 0, 0, 1])), base, s
        )
        two = scale_odom_covariance(
            Pose(np.array([2.0, 0, 0]), np.array([0.0, 0, 0, 1])), base, s
        )
        assert two[0, 0] - base[0, 0] >= 2.0 * (one[0, 0] - base[0, 0])


class TestBBox:
    def test_zero_residual_when_projection_matches(self):
        rng = np.random.default_rng(24)
        cam = default_camera()
        e, pose = random_frontal_config(rng, cam)
        from obvi.geometry import project_ellipsoid_to_box

        box = project_ellipsoid_to_box(e, pose, cam)
        obs = BoundingBoxObservation(box, 0, 0, "trunk", 0.9, np.eye(4))
        r, valid = bbox_residual(pose, e, obs, cam)
        assert valid
        np.testing.assert_allclose(r, 0.0, atol=1e-9)

    def test_camera_inside_gives_fixed_error(self):
        cam = default_camera()
        e = Ellipsoid.upright(np.zeros(3), 0.0, np.array([5.0, 5.0, 5.0]))
        obs = BoundingBoxObservation(PixelBox(0, 10, 0, 10), 0, 0, "trunk", 0.9, np.eye(4))
        r, Jp, Jo, valid = bbox_residual(Pose.identity(), e, obs, cam, jacobians=True)
        assert not valid
        np.testing.assert_allclose(r, [1000.0] * 4)
        assert not Jp.any() and not Jo.any()

    def test_detection_offset_residual(self):
        rng = np.random.default_rng(25)
        cam = default_camera()
        e, pose = random_frontal_config(rng, cam)
        from obvi.geometry import project_ellipsoid_to_box

        box = project_ellipsoid_to_box(e, pose, cam).as_array()
        shifted = PixelBox(box[0] + 2.0, box[1], box[2], box[3])
        obs = BoundingBoxObservation(shifted, 0, 0, "trunk", 0.9, np.eye(4))
        r, valid = bbox_residual(pose, e, obs, cam)
        assert valid
        np.testing.assert_allclose(r, [-2.0, 0.0, 0.0, 0.0], atol=1e-9)

    @pytest.mark.parametrize("mode", [UPRIGHT, FULL])
    def test_jacobians_match_finite_differences(self, mode):
        rng = np.random.default_rng(26)
        cam = default_camera(extrinsic=random_pose(rng, t_scale=0.2))
        checked = 0
        while checked < 60:
            e, pose = random_frontal_config(rng, cam, mode=mode)
            det = PixelBox.from_array(
                np.sort(rng.uniform(0, 640, size=2)).tolist()
                + np.sort(rng.uniform(0, 480, size=2)).tolist()
            )
            obs = BoundingBoxObservation(det, 0, 0, "trunk", 0.9, random_spd(rng, 4, 2.0))
            r, Jp, Jo, valid = bbox_residual(pose, e, obs, cam, jacobians=True)
            if not valid:
                continue
            checked += 1

            def f_pose(p):
                return bbox_residual(p, e, obs, cam)[0]

            def f_obj(o):
                return bbox_residual(pose, o, obs, cam)[0]

            assert rel_err(Jp, fd_pose_jacobian(f_pose, pose)) < 1e-5
            assert rel_err(Jo, fd_ellipsoid_jacobian(f_obj, e)) < 1e-5

    def test_residual_invariant_to_detection_cov_scale_of_quadric(self):
        # the internal quadric is homogeneous; doubling all dims of the world
        # frame must not change anything observable here, but scaling the
        # conic internally must leave the residual bit-comparable
        rng = np.random.default_rng(27)
        cam = default_camera()
        e, pose = random_frontal_config(rng, cam)
        from obvi.geometry import project_ellipsoid_to_box

        box = project_ellipsoid_to_box(e, pose, cam)
        obs = BoundingBoxObservation(box, 0, 0, "trunk", 0.9, np.eye(4))
        r1, _ = bbox_residual(pose, e, obs, cam)
        r2, _ = bbox_residual(pose, e, obs, cam)
        np.testing.assert_array_equal(r1, r2)


class TestOcclusionInflation:
    def _obs(self, box):
        return BoundingBoxObservation(box, 0, 0, "trunk", 0.9, np.eye(4))

    def test_interior_box_unchanged(self):
        cam = default_camera()
        out = inflate_occluded_covariance(self._obs(PixelBox(100, 200, 100, 200)), cam)
        np.testing.assert_array_equal(out.covariance, np.eye(4))

    def test_left_boundary_inflates_u_min_only(self):
        cam = default_camera()
        out = inflate_occluded_covariance(
            self._obs(PixelBox(0.0, 200, 100, 200)), cam, margin=5.0, factor=10.0
        )
        np.testing.assert_allclose(np.diag(out.covariance), [100.0, 1.0, 1.0, 1.0])

    def test_two_boundaries_inflate_two_entries(self):
        cam = default_camera()
        # enumerate edge/boundary distances: u_min and v_max are within margin
        out = inflate_occluded_covariance(
            self._obs(PixelBox(2.0, 200, 100, 478.0)), cam, margin=5.0, factor=10.0
        )
        np.testing.assert_allclose(np.diag(out.covariance), [100.0, 1.0, 1.0, 100.0])
        assert sum(np.diag(out.covariance) > 1.0) == 2


class TestShapePrior:
    def test_zero_at_mean(self):
        prior = ShapePrior("trunk", np.array([2.0, 2.0, 2.0]), np.eye(3))
        e = Ellipsoid.upright(np.zeros(3), 0.0, np.array([2.0, 2.0, 2.0]))
        np.testing.assert_allclose(shape_prior_residual(e, prior), 0.0, atol=1e-12)

    def test_unit_offset(self):
        prior = ShapePrior("trunk", np.array([2.0, 2.0, 2.0]), np.eye(3))
        e = Ellipsoid.upright(np.zeros(3), 0.0, np.array([2.0, 2.0, 3.0]))
        np.testing.assert_allclose(shape_prior_residual(e, prior), [0.0, 0.0, -1.0], atol=1e-12)

    @pytest.mark.parametrize("mode", [UPRIGHT, FULL])
    def test_jacobian_structure(self, mode):
        rng = np.random.default_rng(28)
        for _ in range(50):
            e = random_ellipsoid(rng, mode)
            cov = random_spd(rng, 3, 0.2)
            prior = ShapePrior("trunk", rng.uniform(0.5, 3.0, size=3), cov)
            r, J = shape_prior_residual(e, prior, jacobians=True)
            n = e.param_dim()
            np.testing.assert_allclose(J[:, n - 3:], -sqrt_info(cov), atol=1e-12)
            assert not J[:, : n - 3].any()
            fd = fd_ellipsoid_jacobian(lambda o: shape_prior_residual(o, prior), e)
            assert rel_err(J, fd) < 1e-5


class TestLtmPrior:
    def test_zero_at_mean(self):
        rng = np.random.default_rng(29)
        e = random_ellipsoid(rng, UPRIGHT)
        r = ltm_prior_residual(e, e.to_vector(), np.eye(7))
        np.testing.assert_allclose(r, 0.0, atol=1e-12)

    def test_yaw_wraps(self):
        e = Ellipsoid.upright(np.zeros(3), yaw=3.0, dimensions=np.ones(3))
        mean = e.to_vector().copy()
        mean[3] -= 2.0 * math.pi
        r = ltm_prior_residual(e, mean, np.eye(7))
        np.testing.assert_allclose(r, 0.0, atol=1e-9)

    def test_dimension_mismatch_raises(self):
        rng = np.random.default_rng(30)
        e = random_ellipsoid(rng, UPRIGHT)
        with pytest.raises(ValueError):
            ltm_prior_residual(e, np.zeros(9), np.eye(9))

    @pytest.mark.parametrize("mode", [UPRIGHT, FULL])
    def test_jacobians_match_finite_differences(self, mode):
        rng = np.random.default_rng(31)
        for _ in range(50):
            e = random_ellipsoid(rng, mode)
            n = e.param_dim()
            mean = e.to_vector() + rng.normal(scale=0.1, size=n)
            cov = random_spd(rng, n, 0.3)
            r, J = ltm_prior_residual(e, mean, cov, jacobians=True)
            fd = fd_ellipsoid_jacobian(lambda o: ltm_prior_residual(o, mean, cov), e)
            assert rel_err(J, fd) < 1e-5
