"""Object and feature front-end: gating, association, initialization, merging.

Turns raw per-frame observations into graph variables and factors.  Features
pass the epipolar/parallax gates before entering the graph; detections flow
through pending objects (appearance matching first, geometric matching at
promotion) so that poorly-informed object estimates never touch the
trajectory optimization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np
import scipy.optimize

from .factors import BoundingBoxObservation, ShapePrior, inflate_occluded_covariance
from .geometry import FULL, UPRIGHT, CameraModel, Ellipsoid, PixelBox, Pose, skew
from .graph import OBJECT, POSE, FactorGraph
from .solver import FactorSelection, SolverConfig, solve

PENDING = "pending"
ACTIVE = "active"
REJECTED = "rejected"

ACCEPT = "accept"
DEFER = "defer"
REJECT = "reject"

DEFAULT_CENTER_DISTANCE = {
    "trunk": 1.5,
    "lamppost": 1.5,
    "bench": 2.5,
    "trash_can": 2.5,
}


@dataclass(frozen=True)
class AssociationConfig:
    min_confidence: float = 0.3
    min_observations_to_promote: int = 8
    descriptor_match_threshold: float = 0.5
    center_distance_by_class: Dict[str, float] = field(
        default_factory=lambda: dict(DEFAULT_CENTER_DISTANCE)
    )
    default_center_distance: float = 2.0
    merge_distance_by_class: Dict[str, float] = field(
        default_factory=lambda: dict(DEFAULT_CENTER_DISTANCE)
    )
    epipolar_threshold_px: float = 2.0
    min_parallax_px: float = 2.0
    min_parallax_deg: float = 1.0
    pending_window_frames: int = 10
    reject_fraction: float = 0.5  # "substantial" share of bad pairs
    bad_obs_fraction: float = 0.5  # an observation is bad if most of its pairs are
    max_track_gate_observations: int = 12
    pending_prune_age: int = 30
    pending_init_observations: int = 1
    max_triangulation_range: float = 120.0
    # a box edge on the image border carries no tangency information (the
    # object continues outside the view); such detections are discarded,
    # while near-border ones are kept with inflated covariance
    boundary_drop_margin: float = 1.0

    def center_distance(self, cname: str) -> float:
        return self.center_distance_by_class.get(cname, self.default_center_distance)

    def merge_distance(self, cname: str) -> float:
        return self.merge_distance_by_class.get(cname, self.default_center_distance)


@dataclass
class FeatureTrack:
    feature_id: int
    observations: List[Tuple[int, int, np.ndarray]] = field(default_factory=list)
    descriptor: bytes = b""
    state: str = PENDING

    def add(self, pose_index: int, camera_id: int, pixel: np.ndarray) -> None:
        if self.observations and pose_index < self.observations[-1][0]:
            raise ValueError("track observations must be time ordered")
        self.observations.append((pose_index, camera_id, np.asarray(pixel, dtype=np.float64)))


@dataclass
class PendingObject:
    candidate_id: int
    semantic_class: str
    observations: List[BoundingBoxObservation] = field(default_factory=list)
    descriptors: List[Tuple[int, np.ndarray]] = field(default_factory=list)  # (frame, d)
    estimate: Optional[Ellipsoid] = None
    confidence_sum: float = 0.0
    last_frame: int = -1

    def add(self, frame_index: int, obs: BoundingBoxObservation, descriptor: np.ndarray,
            keep_frames: int) -> None:
        if obs.semantic_class != self.semantic_class:
            raise ValueError("pending objects hold a single semantic class")
        self.observations.append(obs)
        self.descriptors.append((frame_index, np.asarray(descriptor, dtype=np.float64)))
        # only descriptors from recent frames are retained (bounded memory)
        self.descriptors = [
            (f, d) for f, d in self.descriptors if f >= frame_index - keep_frames
        ]
        self.confidence_sum += obs.confidence
        self.last_frame = frame_index

    def mean_confidence(self) -> float:
        return self.confidence_sum / max(len(self.observations), 1)

    def latest_descriptor(self) -> np.ndarray:
        return self.descriptors[-1][1]


# ---------------------------------------------------------------------------
# Feature gating and triangulation
# ---------------------------------------------------------------------------


def _camera_pose(poses: Dict[int, Pose], cams: Dict[int, CameraModel],
                 pose_index: int, camera_id: int) -> Pose:
    return poses[pose_index].compose(cams[camera_id].extrinsic)


def _fundamental(T_wa: Pose, T_wb: Pose, Ka: np.ndarray, Kb: np.ndarray) -> np.ndarray:
    rel = T_wa.inverse().compose(T_wb)  # maps camera-b coordinates into camera a
    E = skew(rel.translation) @ rel.rotation_matrix()
    return np.linalg.inv(Ka).T @ E @ np.linalg.inv(Kb)


def _epipolar_distance(xa: np.ndarray, xb: np.ndarray, F: np.ndarray) -> float:
    """Symmetric point-to-epipolar-line distance in pixels."""
    ha = np.array([xa[0], xa[1], 1.0])
    hb = np.array([xb[0], xb[1], 1.0])
    la = F @ hb  # line in image a
    lb = F.T @ ha
    val = abs(ha @ la)
    da = val / max(math.hypot(la[0], la[1]), 1e-12)
    db = val / max(math.hypot(lb[0], lb[1]), 1e-12)
    return 0.5 * (da + db)


def gate_feature(track: FeatureTrack, poses: Dict[int, Pose],
                 cams: Dict[int, CameraModel], cfg: AssociationConfig
                 ) -> Tuple[str, List[int]]:
    """Epipolar/parallax admission gate for a pending track.

    Returns (accept|defer|reject, indices of observations to keep).  A track
    is rejected when a substantial share of pairwise epipolar errors is
    large; accepted when the majority agrees and both the pixel-disparity
    and ray-angle parallax minima are met.  Individual observations whose
    pairs are mostly bad are dropped from an accepted track.
    """
    src_idx = [i for i, o in enumerate(track.observations) if o[0] in poses]
    if len(src_idx) > cfg.max_track_gate_observations:
        src_idx = src_idx[-cfg.max_track_gate_observations:]
    obs = [track.observations[i] for i in src_idx]
    if len(obs) < 2:
        return DEFER, src_idx

    cam_poses = [_camera_pose(poses, cams, p, c) for p, c, _ in obs]
    n = len(obs)
    bad = np.zeros((n, n), dtype=bool)
    n_pairs = 0
    n_bad = 0
    max_disparity = 0.0
    max_angle = 0.0
    rays = []
    for (p, c, px), T in zip(obs, cam_poses):
        r = np.linalg.inv(cams[c].intrinsics) @ np.array([px[0], px[1], 1.0])
        rays.append(T.rotation_matrix() @ (r / np.linalg.norm(r)))
    for i in range(n):
        for j in range(i + 1, n):
            _, ci, pxi = obs[i]
            _, cj, pxj = obs[j]
            F = _fundamental(cam_poses[i], cam_poses[j], cams[ci].intrinsics,
                             cams[cj].intrinsics)
            err = _epipolar_distance(pxi, pxj, F)
            n_pairs += 1
            if err > cfg.epipolar_threshold_px:
                n_bad += 1
                bad[i, j] = bad[j, i] = True
            max_disparity = max(max_disparity, float(np.linalg.norm(pxi - pxj)))
            cosang = float(np.clip(rays[i] @ rays[j], -1.0, 1.0))
            max_angle = max(max_angle, math.degrees(math.acos(cosang)))

    if n_pairs == 0:
        return DEFER, src_idx
    bad_fraction = n_bad / n_pairs
    if bad_fraction > cfg.reject_fraction:
        return REJECT, []
    keep = [i for i in range(n) if bad[i].sum() <= cfg.bad_obs_fraction * max(n - 1, 1)]
    if len(keep) < 2:
        return DEFER, [src_idx[i] for i in keep]
    good_pairs = n_pairs - n_bad
    majority = good_pairs / n_pairs > 0.5
    enough_parallax = (max_disparity >= cfg.min_parallax_px
                       and max_angle >= cfg.min_parallax_deg)
    if majority and enough_parallax:
        return ACCEPT, [src_idx[i] for i in keep]
    return DEFER, [src_idx[i] for i in keep]


def triangulate_feature(track: FeatureTrack, poses: Dict[int, Pose],
                        cams: Dict[int, CameraModel],
                        obs_indices: Optional[Sequence[int]] = None,
                        max_range: float = 120.0) -> Optional[np.ndarray]:
    """Linear (DLT) triangulation; None when behind a camera or ill-conditioned."""
    obs = track.observations
    if obs_indices is not None:
        obs = [obs[i] for i in obs_indices]
    obs = [o for o in obs if o[0] in poses]
    if len(obs) < 2:
        return None
    rows = []
    projections = []
    for p, c, px in obs:
        X = _camera_pose(poses, cams, p, c).inverse()
        P = cams[c].intrinsics @ np.hstack([X.rotation_matrix(), X.translation[:, None]])
        projections.append(P)
        rows.append(px[0] * P[2] - P[0])
        rows.append(px[1] * P[2] - P[1])
    A = np.stack(rows)
    _, s, Vt = np.linalg.svd(A)
    X_h = Vt[-1]
    if abs(X_h[3]) < 1e-12 or s[-2] < 1e-12:
        return None
    pt = X_h[:3] / X_h[3]
    for P in projections:
        depth = P[2] @ np.append(pt, 1.0)
        if depth <= 1e-6:
            return None
    anchor = obs[0][0]
    if np.linalg.norm(pt - poses[anchor].translation) > max_range:
        return None
    return pt


# ---------------------------------------------------------------------------
# Bounding-box association (step 1: appearance against pendings)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AssociationDecision:
    detection_index: int
    kind: str  # "matched_pending" | "new_pending" | "ignored"
    candidate_id: Optional[int] = None


def associate_bboxes(detections: Sequence[Tuple[BoundingBoxObservation, np.ndarray]],
                     pending: Dict[int, PendingObject], frame_index: int,
                     cfg: AssociationConfig,
                     next_candidate_id: int) -> Tuple[List[AssociationDecision], int]:
    """Match detections to recent pending objects by descriptor distance.

    One-to-one assignment minimizing total descriptor distance (ties broken
    by lower candidate id through the sorted candidate ordering); unmatched
    detections above the confidence floor found new pending objects.
    """
    recent = [
        p for p in sorted(pending.values(), key=lambda p: p.candidate_id)
        if p.last_frame >= frame_index - cfg.pending_window_frames
    ]
    decisions: List[AssociationDecision] = []
    n_det = len(detections)
    if n_det == 0:
        return decisions, next_candidate_id

    BIG = 1e9
    cost = np.full((n_det, max(len(recent), 1)), BIG)
    for i, (obs, desc) in enumerate(detections):
        for j, p in enumerate(recent):
            if p.semantic_class != obs.semantic_class:
                continue
            d = float(np.linalg.norm(desc - p.latest_descriptor()))
            if d <= cfg.descriptor_match_threshold:
                cost[i, j] = d
    rows, cols = scipy.optimize.linear_sum_assignment(cost)
    matched = {}
    for r, c in zip(rows, cols):
        if cost[r, c] < BIG:
            matched[r] = recent[c].candidate_id

    for i, (obs, desc) in enumerate(detections):
        if i in matched:
            decisions.append(AssociationDecision(i, "matched_pending", matched[i]))
        elif obs.confidence >= cfg.min_confidence:
            decisions.append(AssociationDecision(i, "new_pending", next_candidate_id))
            next_candidate_id += 1
        else:
            decisions.append(AssociationDecision(i, "ignored"))
    return decisions, next_candidate_id


# ---------------------------------------------------------------------------
# Object initialization and promotion (step 2: geometric against the map)
# ---------------------------------------------------------------------------


def init_object_estimate(obs: BoundingBoxObservation, pose: Pose, cam: CameraModel,
                         prior: ShapePrior, mode: str = UPRIGHT) -> Ellipsoid:
    """Single-view initialization: class-mean dimensions, identity orientation,
    range where the class mean height reproduces the detected box height."""
    h = obs.box.v_max - obs.box.v_min
    if h < 1.0:
        raise ValueError("bounding box height below 1 px; refusing to initialize")
    mean_h = float(prior.mean_dimensions[2])
    rng_est = cam.fy * mean_h / h
    center = obs.box.center()
    ray = np.linalg.inv(cam.intrinsics) @ np.array([center[0], center[1], 1.0])
    ray = ray / np.linalg.norm(ray)
    cam_in_world = pose.compose(cam.extrinsic)
    position = cam_in_world.transform((rng_est * ray)[None, :])[0]
    if mode == UPRIGHT:
        return Ellipsoid.upright(position, 0.0, prior.mean_dimensions)
    return Ellipsoid.full(position, np.array([0.0, 0.0, 0.0, 1.0]), prior.mean_dimensions)


@dataclass(frozen=True)
class PromotionDecision:
    kind: str  # "merged_into" | "promoted" | "keep_pending"
    object_id: Optional[int] = None


def refine_pending_estimate(p: PendingObject, poses: Dict[int, Pose],
                            cams: Dict[int, CameraModel], prior: ShapePrior,
                            solver_cfg: SolverConfig, mode: str = UPRIGHT
                            ) -> Optional[Ellipsoid]:
    """Local solve over only the pending object (all poses constant).

    Box tangency has a swapped-axes ambiguity for elongated upright objects,
    so both the 0 and 90-degree yaw hypotheses are optimized and the cheaper
    one kept.
    """
    if p.estimate is None:
        return None

    def attempt(start: Ellipsoid):
        g = FactorGraph(cams, mode)
        for obs in p.observations:
            if obs.pose_index not in g.poses:
                g.add_pose(obs.pose_index, poses[obs.pose_index], constant=True)
        g.add_object(0, start, p.semantic_class)
        g.add_shape_prior(0, prior.mean_dimensions, prior.covariance)
        for obs in p.observations:
            g.add_bbox(obs.pose_index, 0, obs.camera_id, obs.box.as_array(),
                       obs.covariance)
        result = solve(g, solver_cfg,
                       FactorSelection(reprojection=False, odometry=False))
        if not result.success:
            return None, np.inf
        return g.objects[0], result.final_cost

    starts = [p.estimate]
    if mode == UPRIGHT:
        starts.append(Ellipsoid.upright(p.estimate.position,
                                        p.estimate.yaw + 0.5 * math.pi,
                                        p.estimate.dimensions))
    best = None
    best_cost = np.inf
    for start in starts:
        e, c = attempt(start)
        if e is not None and c < best_cost:
            best, best_cost = e, c
    return best


def promote_pending(p: PendingObject, graph: FactorGraph, poses: Dict[int, Pose],
                    cfg: AssociationConfig, solver_cfg: SolverConfig,
                    prior: ShapePrior) -> PromotionDecision:
    """Geometric matching of a ripe pending object against the map.

    Requires the observation count and aggregate confidence floors; refines
    the pending estimate locally, then merges into a close same-class map
    object or promotes to a new one.
    """
    if (len(p.observations) < cfg.min_observations_to_promote
            or p.mean_confidence() < cfg.min_confidence):
        return PromotionDecision("keep_pending")
    refined = refine_pending_estimate(p, poses, graph.cameras, prior, solver_cfg,
                                      graph.mode)
    if refined is None:
        return PromotionDecision("keep_pending")
    p.estimate = refined

    threshold = cfg.center_distance(p.semantic_class)
    best = None
    for oid in sorted(graph.objects):
        if graph.object_classes[oid] != p.semantic_class:
            continue
        d = float(np.linalg.norm(graph.objects[oid].position - refined.position))
        if d < threshold and (best is None or d < best[1]):
            best = (oid, d)
    if best is not None:
        return PromotionDecision("merged_into", best[0])
    return PromotionDecision("promoted")


# ---------------------------------------------------------------------------
# Post-session object merging
# ---------------------------------------------------------------------------


def merge_objects(graph: FactorGraph, cfg: AssociationConfig, refine_fn=None
                  ) -> List[Tuple[int, int]]:
    """Greedily merge same-class object pairs closer than the merge threshold.

    Each round merges the single closest qualifying pair into the lower id
    (reassigning its bounding-box factors), re-runs the supplied refinement,
    and repeats until no pair qualifies.  The absorbed object's shape and
    long-term-map priors are dropped with it.
    """
    merges: List[Tuple[int, int]] = []
    while True:
        ids = sorted(graph.objects)
        best = None
        for i, a in enumerate(ids):
            for b in ids[i + 1:]:
                if graph.object_classes[a] != graph.object_classes[b]:
                    continue
                d = float(np.linalg.norm(
                    graph.objects[a].position - graph.objects[b].position
                ))
                if d < cfg.merge_distance(graph.object_classes[a]):
                    if best is None or d < best[2]:
                        best = (a, b, d)
        if best is None:
            return merges
        survivor, absorbed, _ = best
        for f in graph.bbox:
            if f.object_id == absorbed:
                f.object_id = survivor
        graph.shape_priors = [f for f in graph.shape_priors if f.object_id != absorbed]
        graph.ltm_priors = [f for f in graph.ltm_priors if f.object_id != absorbed]
        graph.objects.pop(absorbed)
        graph.object_classes.pop(absorbed)
        graph.constants.discard((OBJECT, absorbed))
        merges.append((survivor, absorbed))
        if refine_fn is not None:
            refine_fn(graph)


# ---------------------------------------------------------------------------
# Session-scoped front-end state machine
# ---------------------------------------------------------------------------


class Frontend:
    """Single-writer mutable front-end for one deployment session."""

    def __init__(self, graph: FactorGraph, cfg: AssociationConfig,
                 solver_cfg: SolverConfig, shape_priors: Dict[str, ShapePrior],
                 pixel_sigma: float = 1.0, bbox_sigma: float = 2.0,
                 occlusion_margin: float = 5.0, occlusion_factor: float = 10.0):
        self.graph = graph
        self.cfg = cfg
        self.solver_cfg = solver_cfg
        self.shape_priors = shape_priors
        self.pixel_cov = (pixel_sigma**2) * np.eye(2)
        self.bbox_cov = (bbox_sigma**2) * np.eye(4)
        self.occlusion_margin = occlusion_margin
        self.occlusion_factor = occlusion_factor
        self.tracks: Dict[int, FeatureTrack] = {}
        self.pending: Dict[int, PendingObject] = {}
        self._next_candidate = 0
        self._next_object_id = (max(graph.objects) + 1) if graph.objects else 0
        self.stats = {
            "tracks_accepted": 0, "tracks_rejected": 0, "pendings_created": 0,
            "promoted": 0, "merged_into_map": 0, "detections_ignored": 0,
        }

    # -- features -------------------------------------------------------------

    def _observe_features(self, frame_index: int, records) -> None:
        g = self.graph
        updated: Set[int] = set()
        for rec in records:
            px = np.asarray(rec.pixel, dtype=np.float64)
            if rec.feature_id in g.features:
                track = self.tracks[rec.feature_id]
                if track.state == REJECTED:
                    continue
                g.add_reprojection(frame_index, rec.feature_id, rec.camera_id, px,
                                   self.pixel_cov)
                continue
            track = self.tracks.setdefault(
                rec.feature_id,
                FeatureTrack(rec.feature_id,
                             descriptor=int(rec.feature_id).to_bytes(8, "little")),
            )
            if track.state == REJECTED:
                continue
            track.add(frame_index, rec.camera_id, px)
            updated.add(rec.feature_id)

        for fid in sorted(updated):
            track = self.tracks[fid]
            if len(track.observations) < 2:
                continue
            decision, keep = gate_feature(track, g.poses, g.cameras, self.cfg)
            if decision == REJECT:
                track.state = REJECTED
                track.observations = []
                self.stats["tracks_rejected"] += 1
            elif decision == ACCEPT:
                pt = triangulate_feature(track, g.poses, g.cameras, keep,
                                         self.cfg.max_triangulation_range)
                if pt is None:
                    track.state = REJECTED
                    track.observations = []
                    self.stats["tracks_rejected"] += 1
                    continue
                g.add_feature(fid, pt)
                for p, c, px in (track.observations[i] for i in keep):
                    g.add_reprojection(p, fid, c, px, self.pixel_cov)
                track.state = ACTIVE
                track.observations = []  # factors now live in the graph
                self.stats["tracks_accepted"] += 1

    # -- detections -----------------------------------------------------------

    def _observe_detections(self, frame_index: int, records) -> None:
        g = self.graph
        det: List[Tuple[BoundingBoxObservation, np.ndarray]] = []
        for rec in records:
            cam = g.cameras[rec.camera_id]
            box = PixelBox.from_array(np.asarray(rec.box, dtype=np.float64))
            m = self.cfg.boundary_drop_margin
            if (box.u_min <= m or box.v_min <= m
                    or box.u_max >= cam.image_width - m
                    or box.v_max >= cam.image_height - m):
                continue
            obs = BoundingBoxObservation(box, frame_index, rec.camera_id,
                                         rec.semantic_class, rec.confidence,
                                         self.bbox_cov)
            obs = inflate_occluded_covariance(obs, cam, self.occlusion_margin,
                                              self.occlusion_factor)
            det.append((obs, np.asarray(rec.descriptor, dtype=np.float64)))

        decisions, self._next_candidate = associate_bboxes(
            det, self.pending, frame_index, self.cfg, self._next_candidate
        )
        for decision in decisions:
            obs, desc = det[decision.detection_index]
            if decision.kind == "ignored":
                self.stats["detections_ignored"] += 1
                continue
            if decision.kind == "new_pending":
                p = PendingObject(decision.candidate_id, obs.semantic_class)
                self.pending[decision.candidate_id] = p
                self.stats["pendings_created"] += 1
            else:
                p = self.pending[decision.candidate_id]
            p.add(frame_index, obs, desc, self.cfg.pending_window_frames)
            if (p.estimate is None
                    and len(p.observations) >= self.cfg.pending_init_observations):
                prior = self.shape_priors[p.semantic_class]
                try:
                    p.estimate = init_object_estimate(
                        p.observations[0], g.poses[p.observations[0].pose_index],
                        g.cameras[p.observations[0].camera_id], prior, g.mode
                    )
                except ValueError:
                    pass

    def _try_promotions(self, frame_index: int) -> None:
        g = self.graph
        for cid in sorted(self.pending):
            p = self.pending[cid]
            prior = self.shape_priors[p.semantic_class]
            decision = promote_pending(p, g, g.poses, self.cfg, self.solver_cfg, prior)
            if decision.kind == "keep_pending":
                if frame_index - p.last_frame > self.cfg.pending_prune_age:
                    del self.pending[cid]
                continue
            if decision.kind == "merged_into":
                oid = decision.object_id
                self.stats["merged_into_map"] += 1
            else:
                oid = self._next_object_id
                self._next_object_id += 1
                g.add_object(oid, p.estimate, p.semantic_class)
                g.add_shape_prior(oid, prior.mean_dimensions, prior.covariance)
                self.stats["promoted"] += 1
            for obs in p.observations:
                g.add_bbox(obs.pose_index, oid, obs.camera_id, obs.box.as_array(),
                           obs.covariance)
            del self.pending[cid]

    def observe(self, frame) -> None:
        """Ingest one frame (its pose variable must already exist)."""
        if frame.index not in self.graph.poses:
            raise KeyError(f"pose {frame.index} missing from graph")
        self._observe_features(frame.index, frame.features)
        self._observe_detections(frame.index, frame.detections)
        self._try_promotions(frame.index)
