"""Per-session estimation pipeline and campaign chaining.

One session: consume an observation log frame by frame (front-end + per-frame
windowed adjustment + periodic global adjustment), then post-session
refinement, object merging, and long-term map extraction.  Campaigns chain
sessions through the map files.
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .factors import ShapePrior, scale_odom_covariance
from .frontend import AssociationConfig, Frontend
from .geometry import Ellipsoid, Pose, pose_between
from .graph import FactorGraph, OBJECT, POSE
from .ltm import LongTermMap, compute_dense_prior, final_refinement, sparsify
from .simworld import ClassSpec, ObservationLog
from .solver import SolverConfig, global_adjust, local_adjust

log = logging.getLogger("obvi.pipeline")


@dataclass(frozen=True)
class PipelineConfig:
    solver: SolverConfig = field(default_factory=SolverConfig)
    association: AssociationConfig = field(default_factory=AssociationConfig)
    mode: str = "upright"
    pixel_sigma: float = 1.0  # estimator-assumed measurement noise, pixels
    bbox_sigma: float = 4.0
    occlusion_margin: float = 5.0
    occlusion_factor: float = 10.0
    odom_base_trans_sigma: float = 0.01  # meters
    odom_base_rot_sigma_deg: float = 0.2
    odom_scaling: Tuple[float, ...] = (0.05, 0.05, 0.05, 0.02, 0.02, 0.02)
    local_every: int = 1
    global_every: int = 30
    local_max_iterations: int = 10
    two_phase: bool = True

    def local_solver(self) -> SolverConfig:
        return dataclasses.replace(self.solver, max_iterations=self.local_max_iterations)

    def odom_base_cov(self) -> np.ndarray:
        t = self.odom_base_trans_sigma**2
        r = float(np.radians(self.odom_base_rot_sigma_deg)) ** 2
        return np.diag([t, t, t, r, r, r])


@dataclass
class SessionResult:
    session_index: int
    trajectory: List[Pose]
    ltm: LongTermMap
    report: dict
    graph: FactorGraph


def shape_priors_from_classes(classes: Dict[str, ClassSpec]) -> Dict[str, ShapePrior]:
    return {
        name: ShapePrior(name, np.asarray(spec.mean_dimensions, dtype=np.float64),
                         spec.covariance())
        for name, spec in classes.items()
    }


def _rebuild_odometry(graph: FactorGraph, cfg: PipelineConfig) -> None:
    """Odometry factors linking consecutive poses at their current estimates."""
    graph.odometry = []
    base = cfg.odom_base_cov()
    scaling = np.asarray(cfg.odom_scaling, dtype=np.float64)
    ids = sorted(graph.poses)
    for a, b in zip(ids[:-1], ids[1:]):
        measured = pose_between(graph.poses[a], graph.poses[b])
        cov = scale_odom_covariance(measured, base, scaling)
        graph.add_odometry(a, b, measured, cov)


def run_session(obs_log: ObservationLog, cfg: PipelineConfig,
                classes: Dict[str, ClassSpec],
                ltm_in: Optional[LongTermMap] = None) -> SessionResult:
    """Full per-session loop: SLAM, refinement, merging, map extraction."""
    t_start = time.perf_counter()
    if ltm_in is not None and ltm_in.mode != cfg.mode:
        raise ValueError(
            f"long-term map mode {ltm_in.mode!r} does not match configured mode "
            f"{cfg.mode!r}"
        )

    graph = FactorGraph(obs_log.cameras, cfg.mode)
    priors = shape_priors_from_classes(classes)
    carried_counts: Dict[int, int] = {}
    if ltm_in is not None:
        for e in ltm_in.entries:
            est = Ellipsoid.from_vector(e.mu, cfg.mode)
            graph.add_object(e.object_id, est, e.semantic_class)
            prior = priors[e.semantic_class]
            graph.add_shape_prior(e.object_id, prior.mean_dimensions, prior.covariance)
            graph.add_ltm_prior(e.object_id, e.mu, e.sigma)
            carried_counts[e.object_id] = e.obs_count

    frontend = Frontend(graph, cfg.association, cfg.solver, priors,
                        pixel_sigma=cfg.pixel_sigma, bbox_sigma=cfg.bbox_sigma,
                        occlusion_margin=cfg.occlusion_margin,
                        occlusion_factor=cfg.occlusion_factor)

    n_frames = 0
    n_globals = 0
    for frame in obs_log.frames():
        t = frame.index
        n_frames += 1
        if t == 0:
            # the session-start pose is known and anchors the session
            graph.add_pose(0, obs_log.start_pose, constant=True)
        else:
            if frame.vo is None:
                raise ValueError(f"frame {t} lacks a visual-odometry seed")
            graph.add_pose(t, graph.poses[t - 1].compose(frame.vo))
        frontend.observe(frame)
        if t > 0 and cfg.local_every > 0 and t % cfg.local_every == 0:
            lo = max(0, t - cfg.solver.window_size + 1)
            local_adjust(graph, range(lo, t + 1), cfg.local_solver(),
                         two_phase=cfg.two_phase)
        if t > 0 and cfg.global_every > 0 and t % cfg.global_every == 0:
            _rebuild_odometry(graph, cfg)
            global_adjust(graph, cfg.solver)
            n_globals += 1

    _rebuild_odometry(graph, cfg)
    merges = final_refinement(graph, cfg.solver, cfg.association)

    obs_counts: Dict[int, int] = {}
    for oid in graph.objects:
        obs_counts[oid] = carried_counts.get(oid, 0)
    for f in graph.bbox:
        obs_counts[f.object_id] = obs_counts.get(f.object_id, 0) + 1

    dense = compute_dense_prior(graph, cfg.solver)
    ltm_out = sparsify(dense, dict(graph.object_classes), obs_counts,
                       session_index=obs_log.session_index)

    trajectory = [graph.poses[t] for t in sorted(graph.poses)]
    report = {
        "session_index": obs_log.session_index,
        "n_frames": n_frames,
        "n_features": len(graph.features),
        "n_objects": len(graph.objects),
        "n_reprojection_factors": len(graph.reprojection),
        "n_bbox_factors": len(graph.bbox),
        "n_global_adjustments": n_globals,
        "n_merges": len(merges),
        "carried_objects": len(carried_counts),
        "frontend": dict(frontend.stats),
        "wall_time_s": time.perf_counter() - t_start,
    }
    log.info("session %d: %d frames, %d features, %d objects, %.1f s",
             obs_log.session_index, n_frames, len(graph.features),
             len(graph.objects), report["wall_time_s"])
    return SessionResult(obs_log.session_index, trajectory, ltm_out, report, graph)
