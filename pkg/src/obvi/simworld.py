"""Deterministic synthetic multi-session world and observation generator.

Stands in for real sensors: a fixed outdoor-style world of upright objects
(tree trunks, lampposts, benches, trash cans) and a 3-D feature field, toured
by per-session trajectories through shared waypoints.  Sessions differ in
path, noise draws, and feature-visibility mask (the appearance-change proxy);
objects stay fixed.  Everything is a pure function of (config, seed).
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .geometry import (
    BOX_OK,
    CameraModel,
    Ellipsoid,
    Pose,
    ellipsoid_to_dual_quadric,
    pose_between,
    project_quadrics_to_boxes,
    quat_to_rotvec,
    rotvec_to_quat,
)

DESCRIPTOR_DIM = 8


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ClassSpec:
    """Shape-prior statistics and the association radius for one class."""

    mean_dimensions: Tuple[float, float, float]
    dim_variances: Tuple[float, float, float]
    match_radius: float

    def covariance(self) -> np.ndarray:
        return np.diag(self.dim_variances)


DEFAULT_CLASSES: Dict[str, ClassSpec] = {
    "trunk": ClassSpec((0.4, 0.4, 3.0), (0.01, 0.01, 0.2), 1.5),
    "lamppost": ClassSpec((0.25, 0.25, 4.5), (0.003, 0.003, 0.3), 1.5),
    "bench": ClassSpec((1.8, 0.6, 0.9), (0.04, 0.01, 0.01), 2.5),
    "trash_can": ClassSpec((0.55, 0.55, 1.05), (0.01, 0.01, 0.02), 2.5),
}


@dataclass(frozen=True)
class NoiseModel:
    pixel_sigma: float = 0.5
    bbox_sigma: float = 2.0
    detection_miss_rate: float = 0.08
    false_positive_rate: float = 0.03
    descriptor_corruption_rate: float = 0.0
    descriptor_noise: float = 0.03
    odom_drift_rate: float = 0.01  # multiplicative translation bias, per distance
    odom_yaw_drift_deg_per_m: float = 0.05
    odom_trans_sigma: float = 0.004
    odom_rot_sigma_deg: float = 0.04

    @staticmethod
    def noiseless() -> "NoiseModel":
        return NoiseModel(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class WorldConfig:
    n_objects: int = 72
    n_features: int = 900
    arena_half_extent: float = 26.0
    waypoint_radius: float = 16.0
    n_waypoints: int = 6
    n_visibility_masks: int = 16
    feature_visibility: float = 0.3  # cross-session overlap fraction
    min_object_separation: float = 2.0
    # same-class objects stay this many match radii apart so that physically
    # distinct instances are resolvable by center-distance association
    same_class_separation_factor: float = 1.8
    min_waypoint_clearance: float = 3.0
    feature_height_range: Tuple[float, float] = (0.3, 7.0)
    # scales how far object dimensions deviate from the class means; 0 makes
    # every object exactly nominal (the fully model-consistent null world)
    dimension_jitter: float = 1.0


@dataclass(frozen=True)
class CampaignConfig:
    n_sessions: int = 16
    step_length: float = 0.6
    frame_dt: float = 0.25
    min_waypoints_per_session: int = 3
    max_waypoints_per_session: int = 6
    noise: NoiseModel = field(default_factory=NoiseModel)


def default_cameras() -> Dict[int, CameraModel]:
    """Forward-looking stereo rig: robot x forward / z up, camera z optical."""
    K = np.array([[500.0, 0.0, 320.0], [0.0, 500.0, 240.0], [0.0, 0.0, 1.0]])
    R_rc = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
    rig = {}
    for cid, lateral in ((0, 0.1), (1, -0.1)):
        ext = Pose.from_rt(R_rc, np.array([0.15, lateral, 0.35]))
        rig[cid] = CameraModel(K, ext, 640, 480)
    return rig


# ---------------------------------------------------------------------------
# World / session data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WorldObject:
    object_id: int
    semantic_class: str
    ellipsoid: Ellipsoid


@dataclass
class WorldSpec:
    seed: int
    config: WorldConfig
    classes: Dict[str, ClassSpec]
    objects: List[WorldObject]
    features: np.ndarray  # (N, 3)
    visibility: np.ndarray  # (n_masks, N) bool
    waypoints: np.ndarray  # (W, 2)
    home: np.ndarray  # (2,)


@dataclass(frozen=True)
class SessionSpec:
    index: int
    waypoint_ids: Tuple[int, ...]  # visit order, excluding the home endpoints
    visibility_mask: int
    seed: int
    step_length: float = 0.6
    frame_dt: float = 0.25
    noise: NoiseModel = field(default_factory=NoiseModel)


@dataclass(frozen=True)
class FeatureRecord:
    feature_id: int
    camera_id: int
    pixel: Tuple[float, float]


@dataclass(frozen=True)
class DetectionRecord:
    camera_id: int
    box: Tuple[float, float, float, float]  # (u_min, u_max, v_min, v_max)
    semantic_class: str
    confidence: float
    descriptor: Tuple[float, ...]


@dataclass(frozen=True)
class FrameTruth:
    pose: Pose
    waypoint_id: Optional[int]
    detection_source: Tuple[int, ...]  # ground-truth object id, -1 for false positives
    detection_clipped: Tuple[bool, ...]


@dataclass(frozen=True)
class Frame:
    index: int
    time: float
    vo: Optional[Pose]  # relative motion estimate from the previous frame
    features: Tuple[FeatureRecord, ...]
    detections: Tuple[DetectionRecord, ...]


class ObservationLog:
    """Per-session stream; ground truth is reachable only via truth accessors."""

    def __init__(self, session_index: int, cameras: Dict[int, CameraModel],
                 mode: str, start_pose: Pose, frames: List[Frame],
                 truth: List[FrameTruth], waypoint_visits: List[Tuple[int, int]],
                 noise: NoiseModel):
        self.session_index = session_index
        self.cameras = cameras
        self.mode = mode
        self.start_pose = start_pose
        self._frames = frames
        self._truth = truth
        self.waypoint_visits = waypoint_visits  # (waypoint_id, frame_index)
        self.noise = noise

    def __len__(self) -> int:
        return len(self._frames)

    def frames(self) -> Iterator[Frame]:
        """Estimator-facing view; contains no ground truth."""
        return iter(self._frames)

    def truth_pose(self, frame_index: int) -> Pose:
        return self._truth[frame_index].pose

    def truth(self) -> List[FrameTruth]:
        return list(self._truth)


# ---------------------------------------------------------------------------
# Deterministic sub-streams
# ---------------------------------------------------------------------------


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(key)))


_STREAM_WORLD = 101
_STREAM_CAMPAIGN = 202
_STREAM_SESSION = 303
_STREAM_DESCRIPTOR = 404


def object_descriptor(object_id: int) -> np.ndarray:
    """Appearance stand-in: a deterministic unit vector keyed by object id."""
    r = _rng(_STREAM_DESCRIPTOR, object_id & 0xFFFFFFFF)
    d = r.standard_normal(DESCRIPTOR_DIM)
    return d / np.linalg.norm(d)


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


def generate_world(cfg: WorldConfig, seed: int,
                   classes: Optional[Dict[str, ClassSpec]] = None) -> WorldSpec:
    """Deterministic world: objects, feature field, waypoints, visibility masks."""
    classes = dict(classes or DEFAULT_CLASSES)
    if not classes:
        raise ValueError("class catalog must not be empty")
    rng = _rng(seed, _STREAM_WORLD)

    angles = 2.0 * math.pi * np.arange(cfg.n_waypoints) / cfg.n_waypoints
    waypoints = np.stack(
        [cfg.waypoint_radius * np.cos(angles), cfg.waypoint_radius * np.sin(angles)], axis=1
    )
    home = np.zeros(2)

    class_names = sorted(classes)
    objects: List[WorldObject] = []
    placed: List[np.ndarray] = []
    placed_class: List[str] = []
    rejections = 0
    while len(objects) < cfg.n_objects:
        if rejections > 2000:
            raise ValueError(
                f"cannot place {cfg.n_objects} objects with separation "
                f"{cfg.min_object_separation} in arena {cfg.arena_half_extent}"
            )
        xy = rng.uniform(-cfg.arena_half_extent + 2.0, cfg.arena_half_extent - 2.0, size=2)
        cname = class_names[int(rng.integers(len(class_names)))]
        if np.linalg.norm(xy - home) < cfg.min_waypoint_clearance:
            rejections += 1
            continue
        if np.min(np.linalg.norm(waypoints - xy, axis=1)) < cfg.min_waypoint_clearance:
            rejections += 1
            continue
        if placed:
            dists = np.linalg.norm(np.array(placed) - xy, axis=1)
            if np.min(dists) < cfg.min_object_separation:
                rejections += 1
                continue
            same_floor = cfg.same_class_separation_factor * classes[cname].match_radius
            same = [d for d, c in zip(dists, placed_class) if c == cname]
            if same and min(same) < same_floor:
                rejections += 1
                continue
        rejections = 0
        spec = classes[cname]
        dims = np.maximum(
            np.asarray(spec.mean_dimensions)
            + cfg.dimension_jitter * rng.normal(size=3) * np.sqrt(spec.dim_variances),
            0.15,
        )
        yaw = float(rng.uniform(-math.pi, math.pi))
        e = Ellipsoid.upright(np.array([xy[0], xy[1], dims[2] / 2.0]), yaw, dims)
        objects.append(WorldObject(len(objects), cname, e))
        placed.append(xy)
        placed_class.append(cname)

    zlo, zhi = cfg.feature_height_range
    features = np.column_stack(
        [
            rng.uniform(-cfg.arena_half_extent, cfg.arena_half_extent, size=cfg.n_features),
            rng.uniform(-cfg.arena_half_extent, cfg.arena_half_extent, size=cfg.n_features),
            rng.uniform(zlo, zhi, size=cfg.n_features),
        ]
    )
    visibility = rng.uniform(size=(cfg.n_visibility_masks, cfg.n_features)) < cfg.feature_visibility

    return WorldSpec(seed, cfg, classes, objects, features, visibility, waypoints, home)


def generate_campaign(world: WorldSpec, campaign: CampaignConfig, seed: int
                      ) -> List[SessionSpec]:
    """Session plans: varied waypoint subsets/orders, one visibility mask each."""
    if campaign.n_sessions < 1:
        raise ValueError("campaign needs at least one session")
    rng = _rng(seed, _STREAM_CAMPAIGN)
    n_wp = len(world.waypoints)
    sessions = []
    for i in range(campaign.n_sessions):
        lo = min(campaign.min_waypoints_per_session, n_wp)
        hi = min(campaign.max_waypoints_per_session, n_wp)
        k = int(rng.integers(lo, hi + 1))
        ids = sorted(rng.choice(n_wp, size=k, replace=False).tolist())
        if rng.uniform() < 0.5:
            ids = ids[::-1]
        start = int(rng.integers(k))
        ids = ids[start:] + ids[:start]
        sessions.append(
            SessionSpec(
                index=i,
                waypoint_ids=tuple(int(w) for w in ids),
                visibility_mask=i % world.visibility.shape[0],
                seed=int(rng.integers(1 << 62)),
                step_length=campaign.step_length,
                frame_dt=campaign.frame_dt,
                noise=campaign.noise,
            )
        )
    return sessions


def _trajectory(world: WorldSpec, spec: SessionSpec
                ) -> Tuple[List[Pose], List[Tuple[int, int]]]:
    """Ground-truth poses through home -> waypoints -> home, hitting each exactly."""
    pts = [world.home] + [world.waypoints[w] for w in spec.waypoint_ids] + [world.home]
    positions = [np.asarray(pts[0], dtype=np.float64)]
    visit_frames: List[Tuple[int, int]] = []
    for leg, (a, b) in enumerate(zip(pts[:-1], pts[1:])):
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        length = float(np.linalg.norm(b - a))
        steps = max(1, int(math.ceil(length / spec.step_length)))
        for s in range(1, steps + 1):
            positions.append(a + (b - a) * (s / steps))
        if leg < len(spec.waypoint_ids):
            visit_frames.append((spec.waypoint_ids[leg], len(positions) - 1))

    # headings follow the direction of travel, averaged at leg vertices
    dirs = []
    for i in range(len(positions) - 1):
        d = positions[i + 1] - positions[i]
        n = np.linalg.norm(d)
        dirs.append(d / n if n > 1e-12 else np.array([1.0, 0.0]))
    dirs.append(dirs[-1])
    poses = []
    for i, p in enumerate(positions):
        if 0 < i < len(positions) - 1:
            mixed = dirs[i - 1] + dirs[i]
            n = np.linalg.norm(mixed)
            d = mixed / n if n > 1e-9 else dirs[i]
        else:
            d = dirs[i]
        yaw = math.atan2(d[1], d[0])
        poses.append(
            Pose(np.array([p[0], p[1], 0.0]), rotvec_to_quat(np.array([0.0, 0.0, yaw])))
        )
    return poses, visit_frames


def generate_session(world: WorldSpec, spec: SessionSpec,
                     cameras: Optional[Dict[int, CameraModel]] = None) -> ObservationLog:
    """Simulate one deployment session into an observation log."""
    cameras = cameras or default_cameras()
    rng = _rng(spec.seed, _STREAM_SESSION)
    noise = spec.noise
    poses, visits = _trajectory(world, spec)
    visit_of_frame = {f: w for w, f in visits}
    mask = world.visibility[spec.visibility_mask]
    yaw_bias = math.radians(noise.odom_yaw_drift_deg_per_m)
    quadrics = (
        np.stack([ellipsoid_to_dual_quadric(o.ellipsoid).matrix for o in world.objects])
        if world.objects else np.zeros((0, 4, 4))
    )

    frames: List[Frame] = []
    truths: List[FrameTruth] = []
    for t, pose in enumerate(poses):
        # visual-odometry seed: true relative motion with drift bias and noise
        vo = None
        if t > 0:
            rel = pose_between(poses[t - 1], pose)
            dist = float(np.linalg.norm(rel.translation))
            tr = rel.translation * (1.0 + noise.odom_drift_rate)
            if noise.odom_trans_sigma > 0.0:
                tr = tr + rng.normal(scale=noise.odom_trans_sigma, size=3)
            rv = quat_to_rotvec(rel.rotation)
            rv = rv + np.array([0.0, 0.0, yaw_bias * dist])
            if noise.odom_rot_sigma_deg > 0.0:
                rv = rv + rng.normal(scale=math.radians(noise.odom_rot_sigma_deg), size=3)
            vo = Pose(tr, rotvec_to_quat(rv))

        feats: List[FeatureRecord] = []
        for cid in sorted(cameras):
            cam = cameras[cid]
            X = pose.compose(cam.extrinsic).inverse()
            pc = world.features @ X.rotation_matrix().T + X.translation
            with np.errstate(divide="ignore", invalid="ignore"):
                uv = (pc @ cam.intrinsics.T)
                uv = uv[:, :2] / uv[:, 2:3]
            ok = (
                mask
                & (pc[:, 2] > 1.0)
                & (pc[:, 2] < 45.0)
                & (uv[:, 0] >= 0.0)
                & (uv[:, 0] <= cam.image_width - 1.0)
                & (uv[:, 1] >= 0.0)
                & (uv[:, 1] <= cam.image_height - 1.0)
            )
            idx = np.where(ok)[0]
            px = uv[idx]
            if noise.pixel_sigma > 0.0 and idx.size:
                px = px + rng.normal(scale=noise.pixel_sigma, size=px.shape)
            for k, p in zip(idx, px):
                feats.append(FeatureRecord(int(k), cid, (float(p[0]), float(p[1]))))

        dets: List[DetectionRecord] = []
        src: List[int] = []
        clipped_flags: List[bool] = []
        for cid in sorted(cameras):
            cam = cameras[cid]
            X = pose.compose(cam.extrinsic).inverse()
            all_boxes, box_status = project_quadrics_to_boxes(
                quadrics, X, cam.intrinsics
            )
            for j, obj in enumerate(world.objects):
                if box_status[j] != BOX_OK:
                    continue
                box = all_boxes[j]
                # visible part must be a meaningful detection
                if box[1] < 0 or box[0] > cam.image_width or box[3] < 0 or box[2] > cam.image_height:
                    continue
                if noise.detection_miss_rate > 0.0 and rng.uniform() < noise.detection_miss_rate:
                    continue
                if noise.bbox_sigma > 0.0:
                    box = box + rng.normal(scale=noise.bbox_sigma, size=4)
                    if box[0] > box[1] or box[2] > box[3]:
                        continue
                clipped_box = np.array(
                    [
                        min(max(box[0], 0.0), cam.image_width),
                        min(max(box[1], 0.0), cam.image_width),
                        min(max(box[2], 0.0), cam.image_height),
                        min(max(box[3], 0.0), cam.image_height),
                    ]
                )
                clipped = bool(np.max(np.abs(clipped_box - box)) > 1e-12)
                if clipped_box[1] - clipped_box[0] < 3.0 or clipped_box[3] - clipped_box[2] < 3.0:
                    continue
                desc_id = obj.object_id
                if (noise.descriptor_corruption_rate > 0.0
                        and rng.uniform() < noise.descriptor_corruption_rate
                        and len(world.objects) > 1):
                    other = int(rng.integers(len(world.objects) - 1))
                    if other >= obj.object_id:
                        other += 1
                    desc_id = other
                d = object_descriptor(desc_id)
                if noise.descriptor_noise > 0.0:
                    d = d + rng.normal(scale=noise.descriptor_noise, size=DESCRIPTOR_DIM)
                dets.append(
                    DetectionRecord(
                        cid,
                        tuple(float(x) for x in clipped_box),
                        obj.semantic_class,
                        float(rng.uniform(0.55, 0.98)),
                        tuple(float(x) for x in d),
                    )
                )
                src.append(obj.object_id)
                clipped_flags.append(clipped)

            if noise.false_positive_rate > 0.0 and rng.uniform() < noise.false_positive_rate:
                cname = sorted(world.classes)[int(rng.integers(len(world.classes)))]
                w = rng.uniform(15.0, 120.0)
                h = rng.uniform(25.0, 200.0)
                u0 = rng.uniform(0.0, cam.image_width - w)
                v0 = rng.uniform(0.0, cam.image_height - h)
                fake_id = -(1 + int(rng.integers(1 << 30)))
                d = object_descriptor(fake_id)
                dets.append(
                    DetectionRecord(
                        cid,
                        (float(u0), float(u0 + w), float(v0), float(v0 + h)),
                        cname,
                        float(rng.uniform(0.25, 0.75)),
                        tuple(float(x) for x in d),
                    )
                )
                src.append(-1)
                clipped_flags.append(False)

        frames.append(
            Frame(t, t * spec.frame_dt, vo, tuple(feats), tuple(dets))
        )
        truths.append(
            FrameTruth(pose, visit_of_frame.get(t), tuple(src), tuple(clipped_flags))
        )

    return ObservationLog(
        spec.index, cameras, "upright", poses[0], frames, truths, visits, noise
    )


# ---------------------------------------------------------------------------
# JSON / JSONL serialization
# ---------------------------------------------------------------------------


def _pose_to_json(p: Pose) -> dict:
    return {"t": [float(x) for x in p.translation], "q": [float(x) for x in p.rotation]}


def _pose_from_json(d: dict) -> Pose:
    return Pose(np.array(d["t"], dtype=np.float64), np.array(d["q"], dtype=np.float64))


def _camera_to_json(cam: CameraModel) -> dict:
    return {
        "K": [[float(x) for x in row] for row in cam.intrinsics],
        "extrinsic": _pose_to_json(cam.extrinsic),
        "width": cam.image_width,
        "height": cam.image_height,
    }


def _camera_from_json(d: dict) -> CameraModel:
    return CameraModel(np.array(d["K"], dtype=np.float64), _pose_from_json(d["extrinsic"]),
                       int(d["width"]), int(d["height"]))


def world_to_json(world: WorldSpec) -> dict:
    return {
        "seed": world.seed,
        "config": dataclasses.asdict(world.config),
        "classes": {
            name: {
                "mean_dimensions": list(spec.mean_dimensions),
                "dim_variances": list(spec.dim_variances),
                "match_radius": spec.match_radius,
            }
            for name, spec in sorted(world.classes.items())
        },
        "objects": [
            {
                "id": o.object_id,
                "class": o.semantic_class,
                "position": [float(x) for x in o.ellipsoid.position],
                "yaw": float(o.ellipsoid.yaw),
                "dimensions": [float(x) for x in o.ellipsoid.dimensions],
            }
            for o in world.objects
        ],
        "waypoints": [[float(x) for x in w] for w in world.waypoints],
        "home": [float(x) for x in world.home],
        "n_features": int(world.features.shape[0]),
    }


def world_from_json(doc: dict) -> WorldSpec:
    """Regenerates the full world from its seed, verifying the stored truth."""
    cfg_doc = dict(doc["config"])
    for key in ("feature_height_range",):
        if key in cfg_doc:
            cfg_doc[key] = tuple(cfg_doc[key])
    cfg = WorldConfig(**cfg_doc)
    classes = {
        name: ClassSpec(tuple(c["mean_dimensions"]), tuple(c["dim_variances"]),
                        float(c["match_radius"]))
        for name, c in doc["classes"].items()
    }
    world = generate_world(cfg, int(doc["seed"]), classes)
    if len(world.objects) != len(doc["objects"]):
        raise ValueError("stored world does not match its seed (object count)")
    for o, stored in zip(world.objects, doc["objects"]):
        if (o.semantic_class != stored["class"]
                or np.max(np.abs(o.ellipsoid.position - np.array(stored["position"]))) > 1e-9):
            raise ValueError("stored world does not match its seed (object mismatch)")
    return world


def session_spec_to_json(spec: SessionSpec) -> dict:
    d = dataclasses.asdict(spec)
    d["waypoint_ids"] = list(spec.waypoint_ids)
    return d


def session_spec_from_json(doc: dict) -> SessionSpec:
    d = dict(doc)
    d["waypoint_ids"] = tuple(d["waypoint_ids"])
    d["noise"] = NoiseModel(**d["noise"])
    return SessionSpec(**d)


def write_log(log: ObservationLog, path) -> None:
    """One JSON document per line: header first, then one frame per line."""
    with open(path, "w") as fh:
        header = {
            "type": "header",
            "session_index": log.session_index,
            "mode": log.mode,
            "start_pose": _pose_to_json(log.start_pose),
            "cameras": {str(cid): _camera_to_json(c) for cid, c in log.cameras.items()},
            "waypoint_visits": [[int(w), int(f)] for w, f in log.waypoint_visits],
            "noise": dataclasses.asdict(log.noise),
        }
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        truths = log.truth()
        for frame, truth in zip(log.frames(), truths):
            row = {
                "type": "frame",
                "index": frame.index,
                "time": frame.time,
                "vo": _pose_to_json(frame.vo) if frame.vo is not None else None,
                "features": [[f.feature_id, f.camera_id, f.pixel[0], f.pixel[1]]
                             for f in frame.features],
                "detections": [
                    {
                        "cam": d.camera_id,
                        "box": list(d.box),
                        "class": d.semantic_class,
                        "conf": d.confidence,
                        "desc": list(d.descriptor),
                    }
                    for d in frame.detections
                ],
                "truth": {
                    "pose": _pose_to_json(truth.pose),
                    "waypoint": truth.waypoint_id,
                    "source": list(truth.detection_source),
                    "clipped": [bool(c) for c in truth.detection_clipped],
                },
            }
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def read_log(path) -> ObservationLog:
    frames: List[Frame] = []
    truths: List[FrameTruth] = []
    header = None
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            if row["type"] == "header":
                header = row
                continue
            vo = _pose_from_json(row["vo"]) if row["vo"] is not None else None
            feats = tuple(
                FeatureRecord(int(f[0]), int(f[1]), (float(f[2]), float(f[3])))
                for f in row["features"]
            )
            dets = tuple(
                DetectionRecord(int(d["cam"]), tuple(d["box"]), d["class"],
                                float(d["conf"]), tuple(d["desc"]))
                for d in row["detections"]
            )
            tr = row["truth"]
            frames.append(Frame(int(row["index"]), float(row["time"]), vo, feats, dets))
            truths.append(
                FrameTruth(
                    _pose_from_json(tr["pose"]),
                    tr["waypoint"],
                    tuple(int(s) for s in tr["source"]),
                    tuple(bool(c) for c in tr["clipped"]),
                )
            )
    if header is None:
        raise ValueError(f"observation log {path} has no header line")
    cameras = {int(cid): _camera_from_json(c) for cid, c in header["cameras"].items()}
    noise = NoiseModel(**header["noise"])
    return ObservationLog(
        int(header["session_index"]), cameras, header["mode"],
        _pose_from_json(header["start_pose"]), frames, truths,
        [(int(w), int(f)) for w, f in header["waypoint_visits"]], noise,
    )
