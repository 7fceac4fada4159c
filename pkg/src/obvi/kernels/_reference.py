"""Pure-numpy implementation of the hot batched kernels.

Used as the fallback when the compiled extension is unavailable; both
implementations expose the same signatures and must agree numerically.
"""

import numpy as np

IMPLEMENTATION = "python"


def quat_to_rot_batch(q: np.ndarray) -> np.ndarray:
    """Batched unit quaternion (N,4) xyzw -> rotation matrices (N,3,3)."""
    q = np.asarray(q, dtype=np.float64)
    x, y, z, w = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    R[:, 0, 1] = 2.0 * (x * y - w * z)
    R[:, 0, 2] = 2.0 * (x * z + w * y)
    R[:, 1, 0] = 2.0 * (x * y + w * z)
    R[:, 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    R[:, 1, 2] = 2.0 * (y * z - w * x)
    R[:, 2, 0] = 2.0 * (x * z - w * y)
    R[:, 2, 1] = 2.0 * (y * z + w * x)
    R[:, 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return R


def reprojection_batch(R_cw, t_cw, Re_T, Rwr_T, t_wr, kparams, points, pixels,
                       whiten, want_jacobians):
    """Evaluate a batch of reprojection factors.

    Inputs (N = batch size):
      R_cw (N,3,3), t_cw (N,3)   world -> camera transform per observation
      Re_T (N,3,3)               transposed camera-extrinsic rotation
      Rwr_T (N,3,3), t_wr (N,3)  transposed robot rotation, robot translation
      kparams (N,5)              fx, skew, cx, fy, cy
      points (N,3), pixels (N,2) feature estimates and detections
      whiten (N,2,2)             lower-triangular whitening factors

    Returns (res (N,2), J_pose (N,2,6) | None, J_point (N,2,3) | None,
    valid (N,)).  Invalid entries (non-positive depth) hold the fixed
    1000-unit residual with zero Jacobians.
    """
    R_cw = np.asarray(R_cw)
    points = np.asarray(points)
    p_c = np.einsum("nij,nj->ni", R_cw, points) + t_cw
    z = p_c[:, 2]
    valid = z > 1e-9
    zs = np.where(valid, z, 1.0)

    fx, sk, cx = kparams[:, 0], kparams[:, 1], kparams[:, 2]
    fy, cy = kparams[:, 3], kparams[:, 4]
    u = (fx * p_c[:, 0] + sk * p_c[:, 1] + cx * zs) / zs
    v = (fy * p_c[:, 1] + cy * zs) / zs
    raw = np.stack([u, v], axis=1) - pixels
    res = np.einsum("nij,nj->ni", whiten, raw)
    res[~valid] = 1000.0

    if not want_jacobians:
        return res, None, None, valid

    duv = np.zeros((len(z), 2, 3))
    duv[:, 0, 0] = fx / zs
    duv[:, 0, 1] = sk / zs
    duv[:, 0, 2] = (cx - u) / zs
    duv[:, 1, 1] = fy / zs
    duv[:, 1, 2] = (cy - v) / zs
    duv = np.einsum("nij,njk->nik", whiten, duv)

    # d p_c / d pose tangent: [-R_cw | Re_T skew(p_r)]
    p_r = np.einsum("nij,nj->ni", Rwr_T, points - t_wr)
    sk_pr = np.zeros((len(z), 3, 3))
    sk_pr[:, 0, 1] = -p_r[:, 2]
    sk_pr[:, 0, 2] = p_r[:, 1]
    sk_pr[:, 1, 0] = p_r[:, 2]
    sk_pr[:, 1, 2] = -p_r[:, 0]
    sk_pr[:, 2, 0] = -p_r[:, 1]
    sk_pr[:, 2, 1] = p_r[:, 0]

    J_pose = np.empty((len(z), 2, 6))
    J_pose[:, :, :3] = -np.einsum("nij,njk->nik", duv, R_cw)
    J_pose[:, :, 3:] = np.einsum("nij,njk,nkl->nil", duv, Re_T, sk_pr)
    J_point = np.einsum("nij,njk->nik", duv, R_cw)

    J_pose[~valid] = 0.0
    J_point[~valid] = 0.0
    return res, J_pose, J_point, valid
