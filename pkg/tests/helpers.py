"""Shared baked-in oracles and random generators for the test suite."""

import numpy as np

from obvi.geometry import (
    FULL,
    UPRIGHT,
    CameraModel,
    Ellipsoid,
    Pose,
    camera_from_world,
    quat_normalize,
)


def random_pose(rng, t_scale=5.0):
    q = quat_normalize(rng.normal(size=4))
    return Pose(rng.normal(scale=t_scale, size=3), q)


def random_ellipsoid(rng, mode=UPRIGHT, pos_scale=5.0):
    dims = rng.uniform(0.4, 3.0, size=3)
    pos = rng.normal(scale=pos_scale, size=3)
    if mode == UPRIGHT:
        return Ellipsoid.upright(pos, rng.uniform(-np.pi, np.pi), dims)
    return Ellipsoid.full(pos, quat_normalize(rng.normal(size=4)), dims)


def default_camera(fx=500.0, fy=500.0, cx=320.0, cy=240.0, extrinsic=None,
                   width=640, height=480):
    K = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
    return CameraModel(K, extrinsic or Pose.identity(), width, height)


def sample_surface_points(e, n_theta=1000, n_phi=1000):
    """Dense grid of points on the ellipsoid surface (oracle helper)."""
    theta = np.linspace(0.0, np.pi, n_theta)
    phi = np.linspace(0.0, 2.0 * np.pi, n_phi, endpoint=False)
    st, ct = np.sin(theta), np.cos(theta)
    sp, cp = np.sin(phi), np.cos(phi)
    unit = np.empty((n_theta * n_phi, 3))
    unit[:, 0] = np.outer(st, cp).ravel()
    unit[:, 1] = np.outer(st, sp).ravel()
    unit[:, 2] = np.outer(ct, np.ones_like(phi)).ravel()
    pts = unit * (e.dimensions / 2.0)
    return pts @ e.rotation_matrix().T + e.position


def surface_sampling_bbox(e, robot_pose, cam, n_theta=1000, n_phi=1000):
    """Bounding box oracle: min/max pixel over dense surface samples."""
    pts = sample_surface_points(e, n_theta, n_phi)
    X = camera_from_world(robot_pose, cam)
    pc = pts @ X.rotation_matrix().T + X.translation
    if np.any(pc[:, 2] <= 0.0):
        return None
    uv = pc @ cam.intrinsics.T
    uv = uv[:, :2] / uv[:, 2:3]
    return np.array([uv[:, 0].min(), uv[:, 0].max(), uv[:, 1].min(), uv[:, 1].max()])


def random_frontal_config(rng, cam, mode=UPRIGHT, max_extent=4000.0):
    """Random (ellipsoid, robot pose) with the object fully in front of the camera.

    Rejection-samples until the whole surface has positive depth and the
    projected box stays within a sane pixel range, mirroring the
    "non-degenerate, fully in front" sampling of the projection checks.
    """
    while True:
        pose = random_pose(rng, t_scale=3.0)
        depth = rng.uniform(4.0, 30.0)
        u = rng.uniform(0.15 * cam.image_width, 0.85 * cam.image_width)
        v = rng.uniform(0.15 * cam.image_height, 0.85 * cam.image_height)
        ray = np.linalg.inv(cam.intrinsics) @ np.array([u, v, 1.0])
        center_cam = ray / ray[2] * depth
        cam_in_world = pose.compose(cam.extrinsic)
        center_world = cam_in_world.transform(center_cam[None, :])[0]
        dims = rng.uniform(0.4, 3.0, size=3)
        if mode == UPRIGHT:
            e = Ellipsoid.upright(center_world, rng.uniform(-np.pi, np.pi), dims)
        else:
            e = Ellipsoid.full(center_world, quat_normalize(rng.normal(size=4)), dims)
        pts = sample_surface_points(e, 40, 40)
        X = camera_from_world(pose, cam)
        pc = pts @ X.rotation_matrix().T + X.translation
        if pc[:, 2].min() <= 0.5:
            continue
        uv = pc @ cam.intrinsics.T
        uv = uv[:, :2] / uv[:, 2:3]
        if np.max(np.abs(uv)) > max_extent:
            continue
        return e, pose


def axis_intersections(e, robot_pose, cam):
    """Which of the camera x/y axes pierce the ellipsoid (exact quadratic test)."""
    X = camera_from_world(robot_pose, cam)
    Rwc = X.rotation_matrix().T  # camera -> world rotation
    cam_center = -(Rwc @ X.translation)
    A = e.rotation_matrix() @ np.diag(1.0 / (e.dimensions / 2.0) ** 2) @ e.rotation_matrix().T
    hits = []
    for axis in (np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])):
        d = Rwc @ axis
        o = cam_center - e.position
        a = d @ A @ d
        b = 2.0 * (o @ A @ d)
        c = o @ A @ o - 1.0
        hits.append(b * b - 4.0 * a * c >= 0.0)
    return hits[0], hits[1]
