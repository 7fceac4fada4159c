import math

import numpy as np
import pytest

from obvi.evalmetrics import (
    ObjectMetrics,
    align_trajectory,
    compute_ate,
    object_metrics,
    volume_iou,
    waypoint_consistency,
    write_cdf_csv,
    write_metrics_csv,
)
from obvi.geometry import Ellipsoid, Pose, rotvec_to_quat
from helpers import random_pose


def quaternion_alignment_oracle(est, ref):
    """Independent alignment: Horn's closed-form quaternion method."""
    P = np.stack([p.translation for p in est])
    Q = np.stack([p.translation for p in ref])
    cp, cq = P.mean(axis=0), Q.mean(axis=0)
    A = P - cp
    B = Q - cq
    M = A.T @ B
    Sxx, Sxy, Sxz = M[0]
    Syx, Syy, Syz = M[1]
    Szx, Szy, Szz = M[2]
    N = np.array(
        [
            [Sxx + Syy + Szz, Syz - Szy, Szx - Sxz, Sxy - Syx],
            [Syz - Szy, Sxx - Syy - Szz, Sxy + Syx, Szx + Sxz],
            [Szx - Sxz, Sxy + Syx, -Sxx + Syy - Szz, Syz + Szy],
            [Sxy - Syx, Szx + Sxz, Syz + Szy, -Sxx - Syy + Szz],
        ]
    )
    evals, evecs = np.linalg.eigh(N)
    q = evecs[:, -1]  # (w, x, y, z)
    w, x, y, z = q
    from obvi.geometry import quat_to_matrix

    R = quat_to_matrix(np.array([x, y, z, w]))
    t = cq - R @ cp
    return R, t


def random_trajectory(rng, n=20):
    poses = [Pose.identity()]
    for _ in range(n - 1):
        poses.append(
            poses[-1].retract(rng.normal(scale=0.5, size=3),
                              rng.normal(scale=0.1, size=3))
        )
    return poses


class TestAlignment:
    def test_identity_for_equal_trajectories(self):
        rng = np.random.default_rng(100)
        traj = random_trajectory(rng)
        T = align_trajectory(traj, traj)
        assert np.linalg.norm(T.translation) < 1e-9
        assert abs(T.rotation[3]) > 1.0 - 1e-12

    def test_recovers_rigid_displacement(self):
        rng = np.random.default_rng(101)
        traj = random_trajectory(rng)
        disp = random_pose(rng, t_scale=4.0)
        moved = [disp.compose(p) for p in traj]
        T = align_trajectory(moved, traj)
        # T must undo disp exactly
        for p, q in zip(moved, traj):
            aligned = T.compose(p)
            assert np.linalg.norm(aligned.translation - q.translation) < 1e-9

    def test_matches_quaternion_oracle_under_noise(self):
        rng = np.random.default_rng(102)
        ref = random_trajectory(rng, 30)
        disp = random_pose(rng, t_scale=2.0)
        est = [
            disp.compose(p).retract(rng.normal(scale=0.1, size=3), np.zeros(3))
            for p in ref
        ]
        T = align_trajectory(est, ref)
        R_o, t_o = quaternion_alignment_oracle(est, ref)
        np.testing.assert_allclose(T.rotation_matrix(), R_o, atol=1e-9)
        np.testing.assert_allclose(T.translation, t_o, atol=1e-9)
        # residual RMSE matches the oracle's
        ours = compute_ate(est, ref, T).translation_ate_rmse
        P = np.stack([p.translation for p in est])
        Q = np.stack([p.translation for p in ref])
        oracle_rmse = np.sqrt(np.mean(np.sum((P @ R_o.T + t_o - Q) ** 2, axis=1)))
        assert abs(ours - oracle_rmse) < 1e-9

    def test_too_few_poses_raises(self):
        rng = np.random.default_rng(103)
        traj = random_trajectory(rng, 2)
        with pytest.raises(ValueError):
            align_trajectory(traj, traj)


class TestAte:
    def test_identical_trajectories_zero(self):
        rng = np.random.default_rng(104)
        traj = random_trajectory(rng)
        m = compute_ate(traj, traj)
        assert m.translation_ate_rmse == 0.0
        assert m.orientation_ate_deg < 1e-6

    def test_constant_offset_without_alignment(self):
        rng = np.random.default_rng(105)
        traj = random_trajectory(rng)
        moved = [Pose(p.translation + np.array([1.0, 0, 0]), p.rotation) for p in traj]
        m = compute_ate(moved, traj)  # no alignment
        assert abs(m.translation_ate_rmse - 1.0) < 1e-12
        assert abs(m.translation_ate_mean - 1.0) < 1e-12

    def test_synthetic_drift_profile(self):
        # drift grows linearly: error at step k is k*d; closed-form RMSE
        n, d = 50, 0.02
        ref = [Pose(np.array([0.5 * k, 0.0, 0.0]), np.array([0.0, 0, 0, 1.0]))
               for k in range(n)]
        est = [Pose(np.array([0.5 * k + d * k, 0.0, 0.0]), np.array([0.0, 0, 0, 1.0]))
               for k in range(n)]
        m = compute_ate(est, ref)
        expected = d * math.sqrt(sum(k * k for k in range(n)) / n)
        assert abs(m.translation_ate_rmse - expected) < 1e-9


class TestWaypointConsistency:
    def test_identical_visits_zero(self):
        p = Pose(np.array([1.0, 2.0, 0.0]), rotvec_to_quat(np.array([0, 0, 0.4])))
        devs, pos_cdf, ori_cdf = waypoint_consistency({0: [("s0", p), ("s1", p)]})
        assert all(d.position_dev < 1e-12 for d in devs)
        assert all(d.orientation_dev_deg < 1e-6 for d in devs)
        assert pos_cdf[-1, 1] == 1.0

    def test_two_visits_split_the_difference(self):
        a = Pose(np.array([0.0, 0.0, 0.0]), np.array([0.0, 0, 0, 1.0]))
        b = Pose(np.array([2.0, 0.0, 0.0]), np.array([0.0, 0, 0, 1.0]))
        devs, _, _ = waypoint_consistency({3: [("s0", a), ("s1", b)]})
        assert len(devs) == 2
        assert all(abs(d.position_dev - 1.0) < 1e-12 for d in devs)

    def test_cdf_monotone_and_ends_at_one(self):
        rng = np.random.default_rng(106)
        visits = {
            w: [(f"s{i}", random_pose(rng, t_scale=1.0)) for i in range(5)]
            for w in range(4)
        }
        devs, pos_cdf, ori_cdf = waypoint_consistency(visits)
        for cdf in (pos_cdf, ori_cdf):
            assert np.all(np.diff(cdf[:, 0]) >= 0.0)
            assert np.all(np.diff(cdf[:, 1]) > 0.0)
            assert abs(cdf[-1, 1] - 1.0) < 1e-12

    def test_single_visit_waypoints_skipped(self):
        p = Pose.identity()
        devs, _, _ = waypoint_consistency({0: [("s0", p)]})
        assert devs == []


class TestVolumeIoU:
    def test_identical_ellipsoids(self):
        e = Ellipsoid.upright(np.array([1.0, 2.0, 0.5]), 0.3,
                              np.array([1.0, 0.6, 2.0]))
        assert abs(volume_iou(e, e) - 1.0) < 0.01

    def test_disjoint_is_zero(self):
        a = Ellipsoid.upright(np.zeros(3), 0.0, np.array([1.0, 1.0, 1.0]))
        b = Ellipsoid.upright(np.array([5.0, 0, 0]), 0.0, np.array([1.0, 1.0, 1.0]))
        assert volume_iou(a, b) == 0.0

    def test_sphere_cap_analytic_oracle(self):
        # unit-diameter spheres offset by half a radius: lens volume formula
        # V = pi (2r - d)^2 (d^2 + 4 d r) / (12 d) with r = 0.5, d = 0.25
        r, d = 0.5, 0.25
        a = Ellipsoid.upright(np.zeros(3), 0.0, np.array([1.0, 1.0, 1.0]))
        b = Ellipsoid.upright(np.array([d, 0, 0]), 0.0, np.array([1.0, 1.0, 1.0]))
        inter = math.pi * (2 * r - d) ** 2 * (d * d + 4 * d * r) / (12 * d)
        sphere = 4.0 / 3.0 * math.pi * r**3
        expected = inter / (2 * sphere - inter)
        assert abs(volume_iou(a, b) - expected) < 0.01

    def test_estimator_standard_error(self):
        a = Ellipsoid.upright(np.zeros(3), 0.2, np.array([1.0, 0.8, 1.4]))
        b = Ellipsoid.upright(np.array([0.3, 0.1, 0.0]), -0.1,
                              np.array([0.9, 1.0, 1.2]))
        vals = [volume_iou(a, b, seed=s) for s in range(12)]
        assert np.std(vals) < 0.005


class TestObjectMetrics:
    def _world(self):
        gt = [
            ("trunk", Ellipsoid.upright(np.array([5.0, 0, 1.0]), 0.0,
                                        np.array([0.5, 0.5, 2.0]))),
            ("trunk", Ellipsoid.upright(np.array([10.0, 3, 1.0]), 0.1,
                                        np.array([0.4, 0.4, 2.2]))),
            ("bench", Ellipsoid.upright(np.array([8.0, -4, 0.4]), 0.7,
                                        np.array([1.8, 0.6, 0.8]))),
        ]
        return gt

    def test_perfect_estimates(self):
        gt = self._world()
        m = object_metrics(gt, gt, {"trunk": 1.5, "bench": 2.5})
        assert m.center_error_quartiles[1] < 1e-12
        assert m.iou_quartiles[0] > 0.99
        assert m.recall == 1.0
        assert abs(m.estimated_per_gt - 1.0) < 1e-12

    def test_duplicates_raise_ratio_not_recall(self):
        gt = self._world()
        est = gt + [gt[0]]
        m = object_metrics(est, gt, {"trunk": 1.5, "bench": 2.5})
        assert m.recall == 1.0
        assert abs(m.estimated_per_gt - 4.0 / 3.0) < 1e-12

    def test_missing_object_lowers_recall(self):
        gt = self._world()
        m = object_metrics(gt[:2], gt, {"trunk": 1.5, "bench": 2.5})
        assert abs(m.recall - 2.0 / 3.0) < 1e-12

    def test_class_without_gt_excluded(self):
        gt = self._world()
        est = gt + [("lamppost", gt[0][1])]
        m = object_metrics(est, gt, {"trunk": 1.5, "bench": 2.5})
        assert m.n_estimates == 3

    def test_rigid_invariance(self):
        rng = np.random.default_rng(107)
        gt = self._world()
        yaw = 0.8
        from obvi.geometry import yaw_to_matrix

        Rz = yaw_to_matrix(yaw)
        t = np.array([3.0, -2.0, 0.0])

        def move(e: Ellipsoid) -> Ellipsoid:
            return Ellipsoid.upright(Rz @ e.position + t, e.yaw + yaw, e.dimensions)

        est = [(c, move(e)) for c, e in gt]
        gt2 = [(c, move(e)) for c, e in gt]
        m1 = object_metrics(gt, gt, {"trunk": 1.5, "bench": 2.5})
        m2 = object_metrics(est, gt2, {"trunk": 1.5, "bench": 2.5})
        assert abs(m1.recall - m2.recall) < 1e-12
        assert abs(m1.center_error_quartiles[1] - m2.center_error_quartiles[1]) < 1e-9


class TestWriters:
    def test_csv_round_trip(self, tmp_path):
        rows = [
            {"session": 0, "metric": "ate_rmse", "value": 0.5},
            {"session": 1, "metric": "ate_rmse", "value": 0.7},
        ]
        path = tmp_path / "metrics.csv"
        write_metrics_csv(path, rows)
        text = path.read_text().strip().splitlines()
        assert text[0] == "session,metric,value"
        assert len(text) == 3

    def test_cdf_csv(self, tmp_path):
        cdf = np.array([[0.1, 0.5], [0.4, 1.0]])
        path = tmp_path / "cdf.csv"
        write_cdf_csv(path, cdf)
        text = path.read_text().strip().splitlines()
        assert text[0] == "deviation,fraction"
        assert len(text) == 3
