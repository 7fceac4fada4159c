import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from obvi.geometry import (
    FULL,
    UPRIGHT,
    DegenerateConic,
    DegenerateKind,
    DualQuadric,
    Ellipsoid,
    PixelBox,
    Pose,
    camera_from_world,
    conic_to_bbox,
    ellipsoid_to_dual_quadric,
    matrix_to_quat,
    pose_between,
    project_ellipsoid_to_box,
    project_to_conic,
    quat_to_matrix,
    quat_to_rotvec,
    rotvec_to_quat,
    so3_right_jacobian_inv,
    transform_quadric,
    wrap_angle,
    yaw_to_matrix,
)
from helpers import (
    default_camera,
    random_ellipsoid,
    random_frontal_config,
    random_pose,
    surface_sampling_bbox,
)


class TestQuaternions:
    def test_matches_scipy_rotation(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            q = rng.normal(size=4)
            q /= np.linalg.norm(q)
            ours = quat_to_matrix(q)
            theirs = Rotation.from_quat(q).as_matrix()
            np.testing.assert_allclose(ours, theirs, atol=1e-12)

    def test_matrix_quat_round_trip(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            R = Rotation.random(random_state=np.random.RandomState(rng.integers(1 << 30))).as_matrix()
            np.testing.assert_allclose(quat_to_matrix(matrix_to_quat(R)), R, atol=1e-12)

    def test_rotvec_round_trip(self):
        rng = np.random.default_rng(2)
        for scale in (1e-12, 1e-6, 0.1, 1.0, 3.0):
            v = rng.normal(size=3)
            v = v / np.linalg.norm(v) * scale
            np.testing.assert_allclose(quat_to_rotvec(rotvec_to_quat(v)), v, atol=1e-14, rtol=1e-9)

    def test_right_jacobian_inverse_finite_difference(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            q = rng.normal(size=4)
            q /= np.linalg.norm(q)
            phi = quat_to_rotvec(q)
            J = so3_right_jacobian_inv(phi)
            eps = 1e-7
            J_fd = np.zeros((3, 3))
            R = quat_to_matrix(q)
            for k in range(3):
                d = np.zeros(3)
                d[k] = eps
                plus = quat_to_rotvec(matrix_to_quat(R @ quat_to_matrix(rotvec_to_quat(d))))
                minus = quat_to_rotvec(matrix_to_quat(R @ quat_to_matrix(rotvec_to_quat(-d))))
                J_fd[:, k] = (plus - minus) / (2.0 * eps)
            np.testing.assert_allclose(J, J_fd, atol=1e-6)


class TestPose:
    def test_identity_compose(self):
        p = Pose(np.array([1.0, 2.0, 3.0]), rotvec_to_quat(np.array([0.1, 0.2, 0.3])))
        out = p.compose(p.inverse())
        assert np.linalg.norm(out.translation) < 1e-9
        assert abs(out.rotation[3]) > 1.0 - 1e-9

    def test_pose_between_identity_base(self):
        b = Pose(np.array([1.0, 0.0, 0.0]), np.array([0.0, 0.0, 0.0, 1.0]))
        rel = pose_between(Pose.identity(), b)
        np.testing.assert_allclose(rel.translation, [1.0, 0.0, 0.0], atol=1e-12)
        np.testing.assert_allclose(rel.rotation, [0.0, 0.0, 0.0, 1.0], atol=1e-12)

    def test_pose_between_self(self):
        rng = np.random.default_rng(4)
        a = random_pose(rng)
        rel = pose_between(a, a)
        assert np.linalg.norm(rel.translation) < 1e-9
        assert np.linalg.norm(quat_to_rotvec(rel.rotation)) < 1e-9

    def test_pose_between_round_trip(self):
        rng = np.random.default_rng(5)
        for _ in range(1000):
            a, b = random_pose(rng), random_pose(rng)
            again = a.compose(pose_between(a, b))
            assert np.linalg.norm(again.translation - b.translation) < 1e-9
            assert np.linalg.norm(quat_to_rotvec(pose_between(again, b).rotation)) < 1e-9

    def test_quaternion_stays_normalized(self):
        rng = np.random.default_rng(6)
        p = random_pose(rng)
        for _ in range(100):
            p = p.retract(rng.normal(size=3), rng.normal(size=3) * 0.5)
        assert abs(np.linalg.norm(p.rotation) - 1.0) < 1e-12

    def test_bad_quaternion_rejected(self):
        with pytest.raises(ValueError):
            Pose(np.zeros(3), np.array([1.0, 1.0, 1.0, 1.0]))


class TestEllipsoid:
    def test_vector_round_trip_upright(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            e = random_ellipsoid(rng, UPRIGHT)
            e2 = Ellipsoid.from_vector(e.to_vector(), UPRIGHT)
            np.testing.assert_allclose(e2.to_vector(), e.to_vector(), atol=1e-12)

    def test_vector_round_trip_full(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            e = random_ellipsoid(rng, FULL)
            e2 = Ellipsoid.from_vector(e.to_vector(), FULL)
            np.testing.assert_allclose(e2.position, e.position, atol=1e-12)
            np.testing.assert_allclose(e2.rotation_matrix(), e.rotation_matrix(), atol=1e-12)
            np.testing.assert_allclose(e2.dimensions, e.dimensions, atol=1e-12)

    def test_dimensions_must_be_positive(self):
        with pytest.raises(ValueError):
            Ellipsoid.upright(np.zeros(3), 0.0, np.array([1.0, -1.0, 1.0]))

    def test_param_counts(self):
        rng = np.random.default_rng(9)
        assert random_ellipsoid(rng, UPRIGHT).param_dim() == 7
        assert random_ellipsoid(rng, FULL).param_dim() == 9


class TestDualQuadric:
    def test_unit_sphere(self):
        e = Ellipsoid.upright(np.zeros(3), 0.0, np.array([2.0, 2.0, 2.0]))
        Q = ellipsoid_to_dual_quadric(e).normalized().matrix
        np.testing.assert_allclose(Q, np.diag([1.0, 1.0, 1.0, -1.0]), atol=1e-12)
        for x in (1.0, -1.0):
            pi = np.array([1.0, 0.0, 0.0, -x])
            assert abs(pi @ Q @ pi) < 1e-9

    def test_translated_sphere_tangent_plane(self):
        e = Ellipsoid.upright(np.array([0.0, 0.0, 5.0]), 0.0, np.array([2.0, 2.0, 2.0]))
        Q = ellipsoid_to_dual_quadric(e).matrix
        pi = np.array([0.0, 0.0, 1.0, -6.0])  # plane z = 6
        assert abs(pi @ Q @ pi) < 1e-9 * np.max(np.abs(Q))

    def test_random_tangent_planes(self):
        # oracle: at a sampled surface point the tangent plane is given by the
        # surface normal; every such plane must satisfy pi^T Q* pi = 0
        rng = np.random.default_rng(10)
        for _ in range(20):
            e = random_ellipsoid(rng, FULL)
            Q = ellipsoid_to_dual_quadric(e).matrix
            scale = np.max(np.abs(Q))
            R = e.rotation_matrix()
            semi = e.dimensions / 2.0
            for _ in range(100):
                u = rng.normal(size=3)
                u /= np.linalg.norm(u)
                p = R @ (semi * u) + e.position
                # gradient of ((x-c)^T R S^-2 R^T (x-c)) gives the normal
                normal = R @ (u / semi)
                normal /= np.linalg.norm(normal)
                pi = np.concatenate([normal, [-normal @ p]])
                assert abs(pi @ Q @ pi) < 1e-8 * max(scale, 1.0)

    def test_transform_identity(self):
        rng = np.random.default_rng(11)
        q = ellipsoid_to_dual_quadric(random_ellipsoid(rng))
        out = transform_quadric(q, Pose.identity())
        np.testing.assert_allclose(out.matrix, q.matrix, atol=1e-12)

    def test_transform_translation_moves_center(self):
        e = Ellipsoid.upright(np.zeros(3), 0.0, np.array([2.0, 2.0, 2.0]))
        q = ellipsoid_to_dual_quadric(e)
        t = np.array([1.0, -2.0, 3.0])
        out = transform_quadric(q, Pose(t, np.array([0.0, 0.0, 0.0, 1.0])))
        np.testing.assert_allclose(out.center(), t, atol=1e-12)

    def test_transform_inverse_round_trip(self):
        rng = np.random.default_rng(12)
        for _ in range(50):
            q = ellipsoid_to_dual_quadric(random_ellipsoid(rng, FULL))
            x = random_pose(rng)
            back = transform_quadric(transform_quadric(q, x), x.inverse())
            np.testing.assert_allclose(back.matrix, q.matrix, atol=1e-9 * max(1.0, np.max(np.abs(q.matrix))))


class TestConicProjection:
    def test_sphere_conic_direct_multiplication(self):
        # direct matrix multiplication oracle with K = identity
        e = Ellipsoid.upright(np.array([0.0, 0.0, 10.0]), 0.0, np.array([2.0, 2.0, 2.0]))
        cq = ellipsoid_to_dual_quadric(e)
        G = project_to_conic(np.eye(3), cq)
        P = np.hstack([np.eye(3), np.zeros((3, 1))])
        np.testing.assert_allclose(G, P @ cq.matrix @ P.T, atol=1e-12)
        assert abs(abs(G[2, 2]) - 99.0) < 1e-9

    def test_intrinsic_scaling_is_quadratic(self):
        rng = np.random.default_rng(13)
        cq = ellipsoid_to_dual_quadric(
            Ellipsoid.upright(np.array([0.5, -0.3, 8.0]), 0.3, np.array([1.0, 2.0, 1.5]))
        )
        K = np.array([[400.0, 0.0, 320.0], [0.0, 420.0, 240.0], [0.0, 0.0, 1.0]])
        G1 = project_to_conic(K, cq)
        G2 = project_to_conic(3.0 * K, cq)
        np.testing.assert_allclose(G2, 9.0 * G1, rtol=1e-12)

    def test_tangent_line_property(self):
        # Every returned box edge, read as a line, must be tangent to the conic.
        rng = np.random.default_rng(14)
        cam = default_camera()
        count = 0
        while count < 50:
            e = random_ellipsoid(rng, pos_scale=3.0)
            pose = Pose.identity()
            e = Ellipsoid.upright(e.position + np.array([0.0, 0.0, 12.0]), e.yaw, e.dimensions)
            X = camera_from_world(pose, cam)
            cq = transform_quadric(ellipsoid_to_dual_quadric(e), X)
            if cq.center()[2] < 2.0:
                continue
            G = project_to_conic(cam.intrinsics, cq)
            box = conic_to_bbox(G)
            if not isinstance(box, PixelBox):
                continue
            count += 1
            norm = np.max(np.abs(G))
            for line in (
                np.array([1.0, 0.0, -box.u_min]),
                np.array([1.0, 0.0, -box.u_max]),
                np.array([0.0, 1.0, -box.v_min]),
                np.array([0.0, 1.0, -box.v_max]),
            ):
                assert abs(line @ G @ line) < 1e-6 * norm

    def test_sphere_bbox_reference_values(self):
        # camera-frame sphere, f=500, pp=(320,240): u in 320 +- 500/sqrt(99)
        cam = default_camera()
        cq = ellipsoid_to_dual_quadric(
            Ellipsoid.upright(np.array([0.0, 0.0, 10.0]), 0.0, np.array([2.0, 2.0, 2.0]))
        )
        G = project_to_conic(cam.intrinsics, cq)
        box = conic_to_bbox(G)
        assert isinstance(box, PixelBox)
        half = 500.0 / math.sqrt(99.0)
        np.testing.assert_allclose(
            box.as_array(), [320.0 - half, 320.0 + half, 240.0 - half, 240.0 + half], atol=0.01
        )
        np.testing.assert_allclose(box.as_array(), [269.75, 370.25, 189.75, 290.25], atol=0.01)

    def test_camera_inside_object_is_imaginary(self):
        cq = ellipsoid_to_dual_quadric(
            Ellipsoid.upright(np.zeros(3), 0.0, np.array([4.0, 4.0, 4.0]))
        )
        out = conic_to_bbox(project_to_conic(default_camera().intrinsics, cq))
        assert isinstance(out, DegenerateConic)
        assert out.kind == DegenerateKind.IMAGINARY_ELLIPSE

    def test_axis_intersection_is_hyperbola(self):
        # ellipsoid pierced by the camera x-axis, camera outside the surface
        cq = ellipsoid_to_dual_quadric(
            Ellipsoid.upright(np.array([6.0, 0.0, 0.0]), 0.0, np.array([8.0, 1.0, 1.0]))
        )
        out = conic_to_bbox(project_to_conic(default_camera().intrinsics, cq))
        assert isinstance(out, DegenerateConic)
        assert out.kind == DegenerateKind.HYPERBOLA

    def test_scale_invariance(self):
        cq = ellipsoid_to_dual_quadric(
            Ellipsoid.upright(np.array([1.0, -0.5, 9.0]), 0.7, np.array([1.0, 2.0, 0.8]))
        )
        G = project_to_conic(default_camera().intrinsics, cq)
        ref = conic_to_bbox(G)
        for alpha in (2.0, -1.0, 1e-4, -3e3):
            out = conic_to_bbox(alpha * G)
            np.testing.assert_allclose(out.as_array(), ref.as_array(), rtol=1e-9)

    def test_upright_quadric_world_yaw_equivariance(self):
        rng = np.random.default_rng(15)
        for _ in range(20):
            e = random_ellipsoid(rng, UPRIGHT)
            theta = rng.uniform(-np.pi, np.pi)
            Rz = yaw_to_matrix(theta)
            rotated = Ellipsoid.upright(Rz @ e.position, wrap_angle(e.yaw + theta), e.dimensions)
            X = Pose.from_rt(Rz, np.zeros(3))
            lhs = ellipsoid_to_dual_quadric(rotated).matrix
            rhs = transform_quadric(ellipsoid_to_dual_quadric(e), X).matrix
            np.testing.assert_allclose(lhs, rhs, atol=1e-9 * max(1.0, np.max(np.abs(rhs))))

    def test_projection_consistency_against_surface_sampling(self):
        # reduced-count version of the acceptance projection oracle
        rng = np.random.default_rng(16)
        cam = default_camera()
        for _ in range(40):
            e, pose = random_frontal_config(rng, cam)
            out = project_ellipsoid_to_box(e, pose, cam)
            assert isinstance(out, PixelBox)
            oracle = surface_sampling_bbox(e, pose, cam, 700, 700)
            np.testing.assert_allclose(out.as_array(), oracle, atol=0.5)


class TestBatchedProjection:
    def test_matches_scalar_path(self):
        from obvi.geometry import (
            BOX_HYPERBOLA,
            BOX_IMAGINARY,
            BOX_OK,
            project_quadrics_to_boxes,
        )

        rng = np.random.default_rng(17)
        cam = default_camera()
        ellipsoids = [random_ellipsoid(rng, UPRIGHT, pos_scale=8.0) for _ in range(200)]
        pose = random_pose(rng, t_scale=3.0)
        Q = np.stack([ellipsoid_to_dual_quadric(e).matrix for e in ellipsoids])
        X = pose.compose(cam.extrinsic).inverse()
        boxes, status = project_quadrics_to_boxes(Q, X, cam.intrinsics)
        for i, e in enumerate(ellipsoids):
            out = project_ellipsoid_to_box(e, pose, cam)
            if isinstance(out, PixelBox):
                assert status[i] == BOX_OK
                np.testing.assert_allclose(boxes[i], out.as_array(), rtol=1e-12)
            elif out.kind == DegenerateKind.IMAGINARY_ELLIPSE:
                assert status[i] == BOX_IMAGINARY
            else:
                assert status[i] == BOX_HYPERBOLA


class TestPixelBox:
    def test_ordering_enforced(self):
        with pytest.raises(ValueError):
            PixelBox(10.0, 5.0, 0.0, 1.0)

    def test_round_trip(self):
        b = PixelBox(1.0, 2.0, 3.0, 4.0)
        assert PixelBox.from_array(b.as_array()) == b
