"""Residuals and analytical Jacobians for the five factor types.

All residuals are whitened: the returned vector r satisfies
|r|^2 = (h(x) - z)^T Sigma^-1 (h(x) - z), so its squared norm is exactly the
Mahalanobis term of the corresponding negative log-likelihood.  Jacobians are
taken with respect to the minimal tangent parameterizations used by the
optimizer: poses perturb as (t + dt, q * exp(dtheta)), ellipsoids on their
7- (upright) or 9- (full) dimensional parameter vectors, features additively.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg

from .geometry import (
    UPRIGHT,
    CameraModel,
    DegenerateConic,
    Ellipsoid,
    PixelBox,
    Pose,
    conic_to_bbox,
    ellipsoid_to_dual_quadric,
    matrix_to_quat,
    quat_to_rotvec,
    skew,
    so3_right_jacobian_inv,
    wrap_angle,
)

DEFAULT_DEGENERATE_BBOX_ERROR = 1000.0


def sqrt_info(cov: np.ndarray) -> np.ndarray:
    """Whitening matrix S with S^T S = cov^-1 (inverse Cholesky factor)."""
    cov = np.asarray(cov, dtype=np.float64)
    L = np.linalg.cholesky(cov)
    return scipy.linalg.solve_triangular(L, np.eye(cov.shape[0]), lower=True)


def _spd_check(cov: np.ndarray, name: str) -> np.ndarray:
    cov = np.asarray(cov, dtype=np.float64)
    if np.max(np.abs(cov - cov.T)) > 1e-9 * max(1.0, float(np.max(np.abs(cov)))):
        raise ValueError(f"{name} covariance must be symmetric")
    np.linalg.cholesky(cov)
    return cov


# ---------------------------------------------------------------------------
# Observation / measurement records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureObservation:
    pixel: np.ndarray  # (2,)
    feature_id: int
    pose_index: int
    camera_id: int
    covariance: np.ndarray  # (2, 2)

    def __post_init__(self):
        object.__setattr__(self, "pixel", np.asarray(self.pixel, dtype=np.float64).reshape(2))
        object.__setattr__(self, "covariance", _spd_check(self.covariance, "feature"))


@dataclass(frozen=True)
class BoundingBoxObservation:
    box: PixelBox
    pose_index: int
    camera_id: int
    semantic_class: str
    confidence: float
    covariance: np.ndarray  # (4, 4), component order (u_min, u_max, v_min, v_max)
    object_id: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "covariance", _spd_check(self.covariance, "bbox"))
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")


@dataclass(frozen=True)
class OdomFactorSpec:
    from_index: int
    to_index: int
    measured_relative: Pose
    covariance: np.ndarray  # (6, 6)

    def __post_init__(self):
        if self.to_index != self.from_index + 1:
            raise ValueError("odometry factors connect consecutive poses")
        object.__setattr__(self, "covariance", _spd_check(self.covariance, "odometry"))


@dataclass(frozen=True)
class ShapePrior:
    class_id: str
    mean_dimensions: np.ndarray  # (3,)
    covariance: np.ndarray  # (3, 3)

    def __post_init__(self):
        m = np.asarray(self.mean_dimensions, dtype=np.float64).reshape(3)
        if np.any(m <= 0.0):
            raise ValueError("mean dimensions must be positive")
        object.__setattr__(self, "mean_dimensions", m)
        object.__setattr__(self, "covariance", _spd_check(self.covariance, "shape prior"))


# ---------------------------------------------------------------------------
# Reprojection factor (pixel observation of a 3-D feature)
# ---------------------------------------------------------------------------


def _camera_chain(pose: Pose, cam: CameraModel):
    """Precompute the camera-from-world transform and perturbation helpers."""
    R_wr = pose.rotation_matrix()
    R_e = cam.extrinsic.rotation_matrix()
    R_wc = R_wr @ R_e
    t_wc = R_wr @ cam.extrinsic.translation + pose.translation
    return R_wr, R_e, R_wc, t_wc


def reprojection_residual(pose: Pose, feature: np.ndarray, obs: FeatureObservation,
                          cam: CameraModel, jacobians: bool = False):
    """Whitened pixel residual; optionally (residual, J_pose(2x6), J_point(2x3), valid).

    A non-positive feature depth marks the factor invalid: the residual and
    Jacobians are zeroed and the factor must be skipped by the caller.
    """
    feature = np.asarray(feature, dtype=np.float64)
    R_wr, R_e, R_wc, t_wc = _camera_chain(pose, cam)
    p_c = R_wc.T @ (feature - t_wc)
    S = sqrt_info(obs.covariance)
    if p_c[2] <= 1e-9:
        if not jacobians:
            return np.zeros(2), False
        return np.zeros(2), np.zeros((2, 6)), np.zeros((2, 3)), False

    K = cam.intrinsics
    h = K @ p_c
    uv = h[:2] / h[2]
    r = S @ (uv - obs.pixel)
    if not jacobians:
        return r, True

    z = h[2]
    duv_dpc = np.array(
        [
            [K[0, 0] / z, K[0, 1] / z, (K[0, 2] - uv[0]) / z],
            [0.0, K[1, 1] / z, (K[1, 2] - uv[1]) / z],
        ]
    )
    dpc_dt = -R_wc.T
    p_r = R_wr.T @ (feature - pose.translation)
    dpc_dtheta = R_e.T @ skew(p_r)
    J_pose = S @ duv_dpc @ np.hstack([dpc_dt, dpc_dtheta])
    J_point = S @ duv_dpc @ R_wc.T
    return r, J_pose, J_point, True


# ---------------------------------------------------------------------------
# Visual odometry factor
# ---------------------------------------------------------------------------


def odometry_error(x_prev: Pose, x_cur: Pose, measured: Pose, jacobians: bool = False):
    """Unwhitened tangent error of (cur (-) prev) (-) measured, with Jacobians."""
    R_p = x_prev.rotation_matrix()
    R_m = measured.rotation_matrix()
    t_rel = R_p.T @ (x_cur.translation - x_prev.translation)
    R_rel = R_p.T @ x_cur.rotation_matrix()
    t_err = R_m.T @ (t_rel - measured.translation)
    R_err = R_m.T @ R_rel
    phi = quat_to_rotvec(matrix_to_quat(R_err))
    r = np.concatenate([t_err, phi])
    if not jacobians:
        return r, None, None

    Jr_inv = so3_right_jacobian_inv(phi)
    J_prev = np.zeros((6, 6))
    J_cur = np.zeros((6, 6))
    J_cur[:3, :3] = R_m.T @ R_p.T
    J_prev[:3, :3] = -J_cur[:3, :3]
    J_prev[:3, 3:] = R_m.T @ skew(t_rel)
    J_cur[3:, 3:] = Jr_inv
    J_prev[3:, 3:] = -Jr_inv.T @ R_m.T  # left-perturbation pulled through R_m
    return r, J_prev, J_cur


def odometry_residual(x_prev: Pose, x_cur: Pose, spec: OdomFactorSpec,
                      jacobians: bool = False):
    """Whitened 6-vector tangent error of (cur (-) prev) (-) measured."""
    S = sqrt_info(spec.covariance)
    r, J_prev, J_cur = odometry_error(x_prev, x_cur, spec.measured_relative, jacobians)
    if not jacobians:
        return S @ r
    return S @ r, S @ J_prev, S @ J_cur


def scale_odom_covariance(measured_relative: Pose, base_cov: np.ndarray,
                          scaling: np.ndarray) -> np.ndarray:
    """Motion-magnitude covariance: base + diag(scaling * |tangent|)^2."""
    scaling = np.asarray(scaling, dtype=np.float64).reshape(6)
    if np.any(scaling < 0.0):
        raise ValueError("scaling coefficients must be non-negative")
    tangent = np.concatenate(
        [measured_relative.translation, quat_to_rotvec(measured_relative.rotation)]
    )
    return np.asarray(base_cov, dtype=np.float64) + np.diag((scaling * np.abs(tangent)) ** 2)


# ---------------------------------------------------------------------------
# Bounding box factor
# ---------------------------------------------------------------------------


def _quadric_and_derivs(obj: Ellipsoid):
    """Q* and dQ*/dparam for the minimal object parameterization."""
    R_o = obj.rotation_matrix()
    semi = obj.dimensions / 2.0
    Z = np.eye(4)
    Z[:3, :3] = R_o
    Z[:3, 3] = obj.position
    D = np.diag(np.concatenate([semi**2, [-1.0]]))
    Q = Z @ D @ Z.T

    n = obj.param_dim()
    dQ = np.zeros((n, 4, 4))
    # position params
    for k in range(3):
        dZ = np.zeros((4, 4))
        dZ[k, 3] = 1.0
        M = dZ @ D @ Z.T
        dQ[k] = M + M.T
    # orientation params
    if obj.mode == UPRIGHT:
        c, s = math.cos(obj.yaw), math.sin(obj.yaw)
        dR = np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])
        dZ = np.zeros((4, 4))
        dZ[:3, :3] = dR
        M = dZ @ D @ Z.T
        dQ[3] = M + M.T
        dim_off = 4
    else:
        for k in range(3):
            e = np.zeros(3)
            e[k] = 1.0
            dZ = np.zeros((4, 4))
            dZ[:3, :3] = R_o @ skew(e)
            M = dZ @ D @ Z.T
            dQ[3 + k] = M + M.T
        dim_off = 6
    # dimension params: d(a^2)/d(dim) = dim/2
    for k in range(3):
        dD = np.zeros((4, 4))
        dD[k, k] = obj.dimensions[k] / 2.0
        dQ[dim_off + k] = Z @ dD @ Z.T
    return Q, dQ


def _box_and_derivs(G: np.ndarray):
    """Box vector (u_min,u_max,v_min,v_max) and its gradient in the 6 conic entries.

    Gradient column order: (g11, g12, g13, g22, g23, g33); g12 never enters.
    Returns (None, degenerate) when the conic is not a proper real ellipse.
    """
    out = conic_to_bbox(G)
    if isinstance(out, DegenerateConic):
        return None, out
    g11, g13 = G[0, 0], G[0, 2]
    g22, g23, g33 = G[1, 1], G[1, 2], G[2, 2]
    su = math.sqrt(max(g13 * g13 - g11 * g33, 1e-300))
    sv = math.sqrt(max(g23 * g23 - g22 * g33, 1e-300))
    # branch signs chosen so rows align with (u_min, u_max, v_min, v_max)
    sign_u = -1.0 if g33 > 0.0 else 1.0
    sign_v = -1.0 if g33 > 0.0 else 1.0

    dbox = np.zeros((4, 6))
    box = np.zeros(4)
    rows = [
        (0, g11, g13, su, sign_u, 0, 2),
        (1, g11, g13, su, -sign_u, 0, 2),
        (2, g22, g23, sv, sign_v, 3, 4),
        (3, g22, g23, sv, -sign_v, 3, 4),
    ]
    for row, gaa, ga3, s, sgn, col_aa, col_a3 in rows:
        val = (ga3 + sgn * s) / g33
        box[row] = val
        dbox[row, col_aa] = sgn * (-g33 / (2.0 * s)) / g33
        dbox[row, col_a3] = (1.0 + sgn * ga3 / s) / g33
        dbox[row, 5] = sgn * (-gaa / (2.0 * s)) / g33 - val / g33
    return (box, dbox), out


def bbox_prediction(pose: Pose, obj: Ellipsoid, cam: CameraModel,
                    jacobians: bool = False):
    """Predicted box (u_min,u_max,v_min,v_max) with optional Jacobians.

    Returns (box, J_pose, J_obj, ok); ok is False for degenerate projections
    (imaginary ellipse, hyperbola, or the object centered behind the camera),
    in which case box/Jacobians are zeros.
    """
    R_wr, R_e, R_wc, t_wc = _camera_chain(pose, cam)
    R_cw = R_wc.T
    t_cw = -(R_cw @ t_wc)
    K = cam.intrinsics
    M = K @ np.hstack([R_cw, t_cw[:, None]])  # 3x4 projection of homogeneous world pts

    n = obj.param_dim()
    if jacobians:
        Q, dQ = _quadric_and_derivs(obj)
    else:
        Q = ellipsoid_to_dual_quadric(obj).matrix

    center = Q[:3, 3] / Q[3, 3]
    depth = float((R_cw @ center + t_cw)[2])

    G = M @ Q @ M.T
    G = 0.5 * (G + G.T)

    box_pack = None
    if depth > 0.0:
        box_pack, _ = _box_and_derivs(G)
    if box_pack is None:
        if not jacobians:
            return np.zeros(4), None, None, False
        return np.zeros(4), np.zeros((4, 6)), np.zeros((4, n)), False

    box, dbox_dg = box_pack
    if not jacobians:
        return box, None, None, True

    # dG/d(object params) through Q
    def sym_entries(A):
        return np.array([A[0, 0], A[0, 1], A[0, 2], A[1, 1], A[1, 2], A[2, 2]])

    J_obj = np.zeros((4, n))
    for k in range(n):
        dG = M @ dQ[k] @ M.T
        J_obj[:, k] = dbox_dg @ sym_entries(0.5 * (dG + dG.T))

    # dG/d(pose tangent) through M = K [R_cw | t_cw]; with the (t + dt,
    # q exp(dtheta)) perturbation, t_cw = -R_cw(theta)(t_wr + dt) - R_e^T t_e,
    # so both blocks of M have closed-form directional derivatives.
    J_pose = np.zeros((4, 6))
    QMt = Q @ M.T  # 4x3
    for k in range(6):
        dRcw = np.zeros((3, 3))
        e = np.zeros(3)
        if k < 3:
            e[k] = 1.0
            dtcw = -(R_cw @ e)
        else:
            e[k - 3] = 1.0
            dRcw = -R_e.T @ skew(e) @ R_wr.T
            dtcw = -(dRcw @ pose.translation)
        dM = K @ np.hstack([dRcw, dtcw[:, None]])
        dG = dM @ QMt
        J_pose[:, k] = dbox_dg @ sym_entries(dG + dG.T)
    return box, J_pose, J_obj, True


def bbox_residual(pose: Pose, obj: Ellipsoid, obs: BoundingBoxObservation,
                  cam: CameraModel, jacobians: bool = False,
                  degenerate_error: float = DEFAULT_DEGENERATE_BBOX_ERROR):
    """Whitened box residual (predicted - detected), order (u_min, u_max, v_min, v_max).

    Degenerate projections (imaginary ellipse, hyperbola, or the object behind
    the camera) yield each component equal to ``degenerate_error`` with zero
    Jacobians so they cannot steer the optimizer.
    """
    box, J_pose, J_obj, ok = bbox_prediction(pose, obj, cam, jacobians)
    if not ok:
        r = np.full(4, float(degenerate_error))
        if not jacobians:
            return r, False
        return r, J_pose, J_obj, False
    S = sqrt_info(obs.covariance)
    r = S @ (box - obs.box.as_array())
    if not jacobians:
        return r, True
    return r, S @ J_pose, S @ J_obj, True


# ---------------------------------------------------------------------------
# Occlusion-aware covariance inflation
# ---------------------------------------------------------------------------


def inflate_occluded_covariance(obs: BoundingBoxObservation, cam: CameraModel,
                                margin: float = 5.0, factor: float = 10.0
                                ) -> BoundingBoxObservation:
    """Inflate variance of box edges that hug the image boundary.

    Each edge within ``margin`` pixels of its image boundary gets its diagonal
    covariance entry multiplied by factor^2; other entries are untouched.
    """
    if factor < 1.0:
        raise ValueError("inflation factor must be >= 1")
    near = np.array(
        [
            obs.box.u_min <= margin,
            obs.box.u_max >= cam.image_width - margin,
            obs.box.v_min <= margin,
            obs.box.v_max >= cam.image_height - margin,
        ]
    )
    if not near.any():
        return obs
    cov = obs.covariance.copy()
    idx = np.where(near)[0]
    cov[idx, idx] *= factor**2
    return BoundingBoxObservation(
        box=obs.box,
        pose_index=obs.pose_index,
        camera_id=obs.camera_id,
        semantic_class=obs.semantic_class,
        confidence=obs.confidence,
        covariance=cov,
        object_id=obs.object_id,
    )


# ---------------------------------------------------------------------------
# Semantic shape prior
# ---------------------------------------------------------------------------


def shape_prior_residual(obj: Ellipsoid, prior: ShapePrior, jacobians: bool = False):
    """Whitened deviation of the object's dimensions from its class mean."""
    S = sqrt_info(prior.covariance)
    r = S @ (prior.mean_dimensions - obj.dimensions)
    if not jacobians:
        return r
    n = obj.param_dim()
    J = np.zeros((3, n))
    J[:, n - 3:] = -S
    return r, J


# ---------------------------------------------------------------------------
# Long-term map prior
# ---------------------------------------------------------------------------


def ltm_error(obj: Ellipsoid, mean: np.ndarray, jacobians: bool = False):
    """Unwhitened v(object) - mean with the upright yaw component wrapped."""
    mean = np.asarray(mean, dtype=np.float64)
    n = obj.param_dim()
    if mean.shape != (n,):
        raise ValueError(
            f"long-term map mean has dimension {mean.shape}, object expects ({n},)"
        )
    diff = obj.to_vector() - mean
    if obj.mode == UPRIGHT:
        diff[3] = wrap_angle(diff[3])
    if not jacobians:
        return diff, None
    J = np.eye(n)
    if obj.mode != UPRIGHT:
        # v's rotation block is the global rotation vector; chain through the
        # local increment q <- q * exp(dtheta)
        J[3:6, 3:6] = so3_right_jacobian_inv(quat_to_rotvec(obj.orientation))
    return diff, J


def ltm_prior_residual(obj: Ellipsoid, mean: np.ndarray, cov: np.ndarray,
                       jacobians: bool = False):
    """Whitened deviation of v(object) from the carried long-term-map mean."""
    S = sqrt_info(cov)
    diff, J = ltm_error(obj, mean, jacobians)
    if not jacobians:
        return S @ diff
    return S @ diff, S @ J
