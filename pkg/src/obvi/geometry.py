"""SE(3) poses, pinhole cameras, ellipsoid landmarks, and dual-quadric projection.

All types are immutable values (frozen dataclasses over read-only numpy
arrays) and all operations are pure functions, so they are safe to share
across threads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

UPRIGHT = "upright"
FULL = "full"

_QUAT_NORM_TOL = 1e-9


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


# ---------------------------------------------------------------------------
# Quaternion / rotation utilities.  Quaternions are (x, y, z, w), matching
# scipy.spatial.transform.Rotation, and are kept on the w >= 0 hemisphere.
# ---------------------------------------------------------------------------


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = math.sqrt(float(q @ q))
    if n < 1e-12:
        raise ValueError("cannot normalize near-zero quaternion")
    q = q / n
    if q[3] < 0.0:
        q = -q
    return q


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ax, ay, az, aw = a
    bx, by, bz, bw = b
    return np.array(
        [
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
            aw * bw - ax * bx - ay * by - az * bz,
        ]
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([-q[0], -q[1], -q[2], q[3]])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    x, y, z, w = q
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    return np.array(
        [
            [1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy)],
            [2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx)],
            [2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy)],
        ]
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Rotation matrix to quaternion (Shepperd's method), w >= 0 canonical."""
    R = np.asarray(R, dtype=np.float64)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0.0:
        s = math.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s, 0.25 * s]
        )
    elif R[0, 0] >= R[1, 1] and R[0, 0] >= R[2, 2]:
        s = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        q = np.array(
            [0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s, (R[2, 1] - R[1, 2]) / s]
        )
    elif R[1, 1] >= R[2, 2]:
        s = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        q = np.array(
            [(R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s, (R[0, 2] - R[2, 0]) / s]
        )
    else:
        s = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        q = np.array(
            [(R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s, (R[1, 0] - R[0, 1]) / s]
        )
    return quat_normalize(q)


def rotvec_to_quat(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    theta = math.sqrt(float(v @ v))
    if theta < 1e-10:
        # sin(t/2)/t ~ 1/2 - t^2/48
        s = 0.5 - theta * theta / 48.0
        return quat_normalize(np.array([v[0] * s, v[1] * s, v[2] * s, 1.0 - theta * theta / 8.0]))
    s = math.sin(0.5 * theta) / theta
    return quat_normalize(np.array([v[0] * s, v[1] * s, v[2] * s, math.cos(0.5 * theta)]))


def quat_to_rotvec(q: np.ndarray) -> np.ndarray:
    q = quat_normalize(q)
    sin_half = math.sqrt(float(q[0] ** 2 + q[1] ** 2 + q[2] ** 2))
    if sin_half < 1e-10:
        return 2.0 * q[:3]
    angle = 2.0 * math.atan2(sin_half, q[3])
    return q[:3] * (angle / sin_half)


def rotvec_to_matrix(v: np.ndarray) -> np.ndarray:
    return quat_to_matrix(rotvec_to_quat(v))


def matrix_to_rotvec(R: np.ndarray) -> np.ndarray:
    return quat_to_rotvec(matrix_to_quat(R))


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_right_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    """Inverse right Jacobian of SO(3): d Log(R exp(d^)) / dd = Jr_inv(Log R)."""
    phi = np.asarray(phi, dtype=np.float64)
    theta2 = float(phi @ phi)
    S = skew(phi)
    if theta2 < 1e-12:
        c = 1.0 / 12.0 + theta2 / 720.0
    else:
        theta = math.sqrt(theta2)
        c = 1.0 / theta2 - (1.0 + math.cos(theta)) / (2.0 * theta * math.sin(theta))
    return np.eye(3) + 0.5 * S + c * (S @ S)


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    w = math.fmod(a + math.pi, 2.0 * math.pi)
    if w <= 0.0:
        w += 2.0 * math.pi
    return w - math.pi


def yaw_to_matrix(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


# ---------------------------------------------------------------------------
# Poses
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Pose:
    """Rigid transform: maps points from the local frame into the parent frame."""

    translation: np.ndarray
    rotation: np.ndarray  # unit quaternion (x, y, z, w)

    def __post_init__(self):
        t = _readonly(np.asarray(self.translation, dtype=np.float64).reshape(3))
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        n = float(np.linalg.norm(q))
        if abs(n - 1.0) > 1e-6:
            raise ValueError(f"quaternion norm {n} too far from 1")
        if abs(n - 1.0) > _QUAT_NORM_TOL or q[3] < 0.0:
            q = quat_normalize(q)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "rotation", _readonly(q))

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.zeros(3), np.array([0.0, 0.0, 0.0, 1.0]))

    @staticmethod
    def from_rt(R: np.ndarray, t: np.ndarray) -> "Pose":
        return Pose(np.asarray(t, dtype=np.float64), matrix_to_quat(R))

    @staticmethod
    def from_matrix(T: np.ndarray) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        return Pose.from_rt(T[:3, :3], T[:3, 3])

    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation_matrix()
        T[:3, 3] = self.translation
        return T

    def compose(self, other: "Pose") -> "Pose":
        R = self.rotation_matrix()
        return Pose(R @ other.translation + self.translation,
                    quat_multiply(self.rotation, other.rotation))

    def inverse(self) -> "Pose":
        qinv = quat_conjugate(self.rotation)
        Rinv = quat_to_matrix(qinv)
        return Pose(-(Rinv @ self.translation), qinv)

    def transform(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.rotation_matrix().T + self.translation

    def retract(self, dt: np.ndarray, dtheta: np.ndarray) -> "Pose":
        """Apply the optimizer increment: t + dt, q * exp(dtheta) (local rotation)."""
        return Pose(self.translation + np.asarray(dt, dtype=np.float64),
                    quat_multiply(self.rotation, rotvec_to_quat(dtheta)))


def compose(a: Pose, b: Pose) -> Pose:
    return a.compose(b)


def pose_between(a: Pose, b: Pose) -> Pose:
    """Relative pose b (-) a, i.e. the transform x with compose(a, x) = b."""
    return a.inverse().compose(b)


def pose_log(p: Pose) -> np.ndarray:
    """Decoupled tangent coordinates [translation, rotation-vector]."""
    return np.concatenate([p.translation, quat_to_rotvec(p.rotation)])


# ---------------------------------------------------------------------------
# Cameras
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CameraModel:
    intrinsics: np.ndarray  # 3x3 upper-triangular K, pixels
    extrinsic: Pose  # camera frame expressed in the robot body frame
    image_width: int
    image_height: int

    def __post_init__(self):
        K = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        if abs(K[2, 2] - 1.0) > 1e-12:
            raise ValueError("K[2][2] must be 1")
        if K[0, 0] <= 0.0 or K[1, 1] <= 0.0:
            raise ValueError("focal lengths must be positive")
        if max(abs(K[1, 0]), abs(K[2, 0]), abs(K[2, 1])) > 1e-12:
            raise ValueError("K must be upper triangular")
        object.__setattr__(self, "intrinsics", _readonly(K))

    @property
    def fx(self) -> float:
        return float(self.intrinsics[0, 0])

    @property
    def fy(self) -> float:
        return float(self.intrinsics[1, 1])

    @property
    def cx(self) -> float:
        return float(self.intrinsics[0, 2])

    @property
    def cy(self) -> float:
        return float(self.intrinsics[1, 2])


def camera_from_world(robot_pose: Pose, cam: CameraModel) -> Pose:
    """World-in-camera transform X used to move quadrics/points into the camera."""
    return robot_pose.compose(cam.extrinsic).inverse()


# ---------------------------------------------------------------------------
# Ellipsoids and dual quadrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Ellipsoid:
    """Object landmark: position, orientation (yaw-only or full), full axis extents."""

    position: np.ndarray
    orientation: np.ndarray  # shape (1,) yaw for upright mode, (4,) quaternion for full
    dimensions: np.ndarray  # full extents along the principal axes, meters
    mode: str = UPRIGHT

    def __post_init__(self):
        pos = _readonly(np.asarray(self.position, dtype=np.float64).reshape(3))
        dims = _readonly(np.asarray(self.dimensions, dtype=np.float64).reshape(3))
        if np.any(dims <= 0.0):
            raise ValueError("dimensions must be strictly positive")
        ori = np.atleast_1d(np.asarray(self.orientation, dtype=np.float64))
        if self.mode == UPRIGHT:
            if ori.shape != (1,):
                raise ValueError("upright mode takes a single yaw parameter")
        elif self.mode == FULL:
            if ori.shape != (4,):
                raise ValueError("full mode takes a unit quaternion")
            ori = quat_normalize(ori)
        else:
            raise ValueError(f"unknown mode {self.mode!r}")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "orientation", _readonly(ori))
        object.__setattr__(self, "dimensions", dims)

    @staticmethod
    def upright(position, yaw: float, dimensions) -> "Ellipsoid":
        return Ellipsoid(np.asarray(position, dtype=np.float64),
                         np.array([yaw]), np.asarray(dimensions, dtype=np.float64), UPRIGHT)

    @staticmethod
    def full(position, quat, dimensions) -> "Ellipsoid":
        return Ellipsoid(np.asarray(position, dtype=np.float64),
                         np.asarray(quat, dtype=np.float64),
                         np.asarray(dimensions, dtype=np.float64), FULL)

    @property
    def yaw(self) -> float:
        if self.mode != UPRIGHT:
            raise AttributeError("yaw is only defined in upright mode")
        return float(self.orientation[0])

    def rotation_matrix(self) -> np.ndarray:
        if self.mode == UPRIGHT:
            return yaw_to_matrix(self.yaw)
        return quat_to_matrix(self.orientation)

    def param_dim(self) -> int:
        """Minimal parameter count: 7 upright, 9 full."""
        return 7 if self.mode == UPRIGHT else 9

    def to_vector(self) -> np.ndarray:
        """Minimal parameter vector v(.): [position, yaw | rotvec, dimensions]."""
        if self.mode == UPRIGHT:
            rot = self.orientation
        else:
            rot = quat_to_rotvec(self.orientation)
        return np.concatenate([self.position, rot, self.dimensions])

    @staticmethod
    def from_vector(v: np.ndarray, mode: str = UPRIGHT) -> "Ellipsoid":
        v = np.asarray(v, dtype=np.float64)
        if mode == UPRIGHT:
            if v.shape != (7,):
                raise ValueError("upright parameter vector has 7 entries")
            return Ellipsoid.upright(v[:3], float(v[3]), v[4:])
        if v.shape != (9,):
            raise ValueError("full parameter vector has 9 entries")
        return Ellipsoid.full(v[:3], rotvec_to_quat(v[3:6]), v[6:])

    def retract(self, delta: np.ndarray, dim_floor: float = 1e-6) -> "Ellipsoid":
        """Apply an optimizer increment on the minimal parameterization."""
        delta = np.asarray(delta, dtype=np.float64)
        pos = self.position + delta[:3]
        if self.mode == UPRIGHT:
            yaw = wrap_angle(self.yaw + float(delta[3]))
            dims = np.maximum(self.dimensions + delta[4:], dim_floor)
            return Ellipsoid.upright(pos, yaw, dims)
        q = quat_multiply(self.orientation, rotvec_to_quat(delta[3:6]))
        dims = np.maximum(self.dimensions + delta[6:], dim_floor)
        return Ellipsoid.full(pos, q, dims)

    def pose(self) -> Pose:
        if self.mode == UPRIGHT:
            return Pose(self.position, rotvec_to_quat(np.array([0.0, 0.0, self.yaw])))
        return Pose(self.position, self.orientation)

    def to_dual_quadric(self) -> "DualQuadric":
        return ellipsoid_to_dual_quadric(self)

    def contains(self, pts: np.ndarray) -> np.ndarray:
        """True for points inside or on the ellipsoid surface."""
        local = (np.atleast_2d(pts) - self.position) @ self.rotation_matrix()
        scaled = local / (self.dimensions / 2.0)
        return np.einsum("ij,ij->i", scaled, scaled) <= 1.0

    def volume(self) -> float:
        a, b, c = self.dimensions / 2.0
        return 4.0 / 3.0 * math.pi * a * b * c


@dataclass(frozen=True)
class DualQuadric:
    """Symmetric 4x4 homogeneous matrix Q*; tangent planes satisfy pi^T Q* pi = 0."""

    matrix: np.ndarray

    def __post_init__(self):
        M = np.asarray(self.matrix, dtype=np.float64).reshape(4, 4)
        if np.max(np.abs(M - M.T)) > 1e-12 * max(1.0, float(np.max(np.abs(M)))):
            raise ValueError("dual quadric matrix must be symmetric")
        M = 0.5 * (M + M.T)
        object.__setattr__(self, "matrix", _readonly(M))

    def normalized(self) -> "DualQuadric":
        """Scale so Q44 = -1 (when nonzero), removing homogeneous-scale drift."""
        q44 = self.matrix[3, 3]
        if abs(q44) < 1e-15:
            return self
        return DualQuadric(self.matrix * (-1.0 / q44))

    def center(self) -> np.ndarray:
        return self.matrix[:3, 3] / self.matrix[3, 3]


@dataclass(frozen=True)
class PixelBox:
    """Axis-aligned pixel box (u_min, u_max, v_min, v_max)."""

    u_min: float
    u_max: float
    v_min: float
    v_max: float

    def __post_init__(self):
        if self.u_min > self.u_max or self.v_min > self.v_max:
            raise ValueError("box min/max out of order")

    def as_array(self) -> np.ndarray:
        return np.array([self.u_min, self.u_max, self.v_min, self.v_max])

    @staticmethod
    def from_array(v) -> "PixelBox":
        v = np.asarray(v, dtype=np.float64)
        return PixelBox(float(v[0]), float(v[1]), float(v[2]), float(v[3]))

    def center(self) -> np.ndarray:
        return np.array([0.5 * (self.u_min + self.u_max), 0.5 * (self.v_min + self.v_max)])

    def width(self) -> float:
        return self.u_max - self.u_min

    def height(self) -> float:
        return self.v_max - self.v_min


class DegenerateKind(str, Enum):
    IMAGINARY_ELLIPSE = "imaginary_ellipse"
    HYPERBOLA = "hyperbola"


@dataclass(frozen=True)
class DegenerateConic:
    """Marker returned when the projected conic is not a proper real ellipse."""

    kind: DegenerateKind


def ellipsoid_to_dual_quadric(e: Ellipsoid) -> DualQuadric:
    """Q* = Z diag(a^2, b^2, c^2, -1) Z^T with Z the ellipsoid pose, a,b,c semi-axes."""
    Z = np.eye(4)
    Z[:3, :3] = e.rotation_matrix()
    Z[:3, 3] = e.position
    D = np.diag(np.concatenate([(e.dimensions / 2.0) ** 2, [-1.0]]))
    return DualQuadric(Z @ D @ Z.T)


def transform_quadric(q: DualQuadric, x_world_in_camera: Pose) -> DualQuadric:
    X = x_world_in_camera.matrix()
    return DualQuadric(X @ q.matrix @ X.T)


def project_to_conic(K: np.ndarray, cq: DualQuadric) -> np.ndarray:
    """Dual conic G* = K [I|0] Q*_cam [I|0]^T K^T of a camera-frame quadric."""
    K = np.asarray(K, dtype=np.float64)
    B = cq.matrix[:3, :3]
    G = K @ B @ K.T
    return 0.5 * (G + G.T)


def conic_to_bbox(g: np.ndarray, disc_tol: float = 1e-10):
    """Tangent-line bounding box of a dual conic.

    Returns a PixelBox for a proper real ellipse, otherwise a DegenerateConic:
    both tangent discriminants negative means the camera is inside the object
    (imaginary ellipse); exactly one negative (or an improper/unbounded conic)
    means a hyperbolic projection.
    """
    g = np.asarray(g, dtype=np.float64)
    g11, g12, g13 = g[0, 0], g[0, 1], g[0, 2]
    g22, g23, g33 = g[1, 1], g[1, 2], g[2, 2]

    scale2 = g33 * g33
    if scale2 < 1e-24 * max(1.0, float(np.max(np.abs(g)) ** 2)):
        # tangency at infinity: no finite tangent-line box exists
        return DegenerateConic(DegenerateKind.HYPERBOLA)

    deadband = disc_tol * scale2
    disc_u = g13 * g13 - g11 * g33
    disc_v = g23 * g23 - g22 * g33
    u_neg = disc_u < -deadband
    v_neg = disc_v < -deadband
    if u_neg and v_neg:
        return DegenerateConic(DegenerateKind.IMAGINARY_ELLIPSE)
    if u_neg or v_neg:
        return DegenerateConic(DegenerateKind.HYPERBOLA)

    # Both discriminants admit real tangent lines; require the conic to be a
    # real ellipse (an unbounded conic can still have two tangents per axis).
    # The primal conic is proportional to adj(G); the ellipse test is
    # det(adj(G)[:2,:2]) > 0, which is invariant to the homogeneous scale.
    a11 = -disc_v
    a22 = -disc_u
    a12 = -(g12 * g33 - g13 * g23)
    if a11 * a22 - a12 * a12 <= 0.0:
        return DegenerateConic(DegenerateKind.HYPERBOLA)

    su = math.sqrt(max(disc_u, 0.0))
    sv = math.sqrt(max(disc_v, 0.0))
    u1, u2 = (g13 + su) / g33, (g13 - su) / g33
    v1, v2 = (g23 + sv) / g33, (g23 - sv) / g33
    return PixelBox(min(u1, u2), max(u1, u2), min(v1, v2), max(v1, v2))


BOX_OK = 0
BOX_IMAGINARY = 1
BOX_HYPERBOLA = 2


def project_quadrics_to_boxes(quadrics: np.ndarray, x_world_in_camera: Pose,
                              K: np.ndarray, disc_tol: float = 1e-10):
    """Batched projection of world dual quadrics (J,4,4) to pixel boxes.

    Returns (boxes (J,4) as (u_min,u_max,v_min,v_max), status (J,)) where
    status is BOX_OK / BOX_IMAGINARY / BOX_HYPERBOLA.  Mirrors conic_to_bbox
    entry-for-entry, adding the behind-camera guard on the quadric center.
    """
    Q = np.asarray(quadrics, dtype=np.float64)
    X = x_world_in_camera.matrix()
    M = np.asarray(K, dtype=np.float64) @ X[:3, :]  # 3x4
    G = np.einsum("ij,njk,lk->nil", M, Q, M)
    G = 0.5 * (G + np.transpose(G, (0, 2, 1)))

    g11, g12, g13 = G[:, 0, 0], G[:, 0, 1], G[:, 0, 2]
    g22, g23, g33 = G[:, 1, 1], G[:, 1, 2], G[:, 2, 2]

    status = np.full(len(Q), BOX_OK, dtype=np.int64)
    center = Q[:, :3, 3] / Q[:, 3, 3, None]
    depth = center @ X[2, :3] + X[2, 3]
    status[depth <= 0.0] = BOX_HYPERBOLA

    gmax = np.maximum(np.max(np.abs(G), axis=(1, 2)) ** 2, 1.0)
    scale2 = g33 * g33
    status[(status == BOX_OK) & (scale2 < 1e-24 * gmax)] = BOX_HYPERBOLA

    deadband = disc_tol * scale2
    disc_u = g13 * g13 - g11 * g33
    disc_v = g23 * g23 - g22 * g33
    u_neg = disc_u < -deadband
    v_neg = disc_v < -deadband
    both = u_neg & v_neg & (status == BOX_OK)
    one = (u_neg ^ v_neg) & (status == BOX_OK)
    status[both] = BOX_IMAGINARY
    status[one] = BOX_HYPERBOLA

    a11 = -disc_v
    a22 = -disc_u
    a12 = -(g12 * g33 - g13 * g23)
    not_ellipse = (a11 * a22 - a12 * a12 <= 0.0) & (status == BOX_OK)
    status[not_ellipse] = BOX_HYPERBOLA

    ok = status == BOX_OK
    boxes = np.zeros((len(Q), 4))
    if ok.any():
        su = np.sqrt(np.maximum(disc_u[ok], 0.0))
        sv = np.sqrt(np.maximum(disc_v[ok], 0.0))
        u1 = (g13[ok] + su) / g33[ok]
        u2 = (g13[ok] - su) / g33[ok]
        v1 = (g23[ok] + sv) / g33[ok]
        v2 = (g23[ok] - sv) / g33[ok]
        boxes[ok, 0] = np.minimum(u1, u2)
        boxes[ok, 1] = np.maximum(u1, u2)
        boxes[ok, 2] = np.minimum(v1, v2)
        boxes[ok, 3] = np.maximum(v1, v2)
    return boxes, status


def project_ellipsoid_to_box(e: Ellipsoid, robot_pose: Pose, cam: CameraModel):
    """Full projection chain world ellipsoid -> camera conic -> pixel box.

    Objects centered at non-positive camera depth cannot produce a valid
    box; they are reported as hyperbolic (a branch behind the camera).
    """
    X = camera_from_world(robot_pose, cam)
    cq = transform_quadric(ellipsoid_to_dual_quadric(e), X)
    if cq.center()[2] <= 0.0:
        return DegenerateConic(DegenerateKind.HYPERBOLA)
    return conic_to_bbox(project_to_conic(cam.intrinsics, cq))
