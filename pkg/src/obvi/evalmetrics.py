"""Evaluation metrics: ATE, waypoint consistency, object accuracy, map size.

All metrics are invariant to a common rigid transform of estimate and
reference; trajectory metrics align first (least-squares, no scale) to keep
early estimation error from skewing the result.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .geometry import Ellipsoid, Pose, matrix_to_quat

log = logging.getLogger("obvi.eval")


@dataclass(frozen=True)
class TrajectoryMetrics:
    translation_ate_rmse: float
    translation_ate_mean: float
    orientation_ate_deg: float

    def __post_init__(self):
        if min(self.translation_ate_rmse, self.translation_ate_mean,
               self.orientation_ate_deg) < 0.0:
            raise ValueError("trajectory metrics are non-negative")


@dataclass(frozen=True)
class ObjectMetrics:
    center_error_quartiles: Tuple[float, float, float]  # meters
    iou_quartiles: Tuple[float, float, float]
    estimated_per_gt: float
    recall: float
    matched: int
    n_estimates: int
    n_ground_truth: int


# ---------------------------------------------------------------------------
# Trajectory alignment and ATE
# ---------------------------------------------------------------------------


def align_trajectory(est: Sequence[Pose], ref: Sequence[Pose]) -> Pose:
    """Least-squares rigid alignment (no scale) of estimate onto reference."""
    if len(est) != len(ref):
        raise ValueError("trajectories must be time-associated and equal length")
    if len(est) < 3:
        raise ValueError("alignment needs at least 3 poses")
    P = np.stack([p.translation for p in est])
    Q = np.stack([p.translation for p in ref])
    cp, cq = P.mean(axis=0), Q.mean(axis=0)
    H = (P - cp).T @ (Q - cq)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, float(np.sign(np.linalg.det(Vt.T @ U.T)))])
    R = Vt.T @ D @ U.T
    t = cq - R @ cp
    return Pose(t, matrix_to_quat(R))


def compute_ate(est: Sequence[Pose], ref: Sequence[Pose],
                alignment: Optional[Pose] = None) -> TrajectoryMetrics:
    """Translation RMSE/mean and mean geodesic rotation angle after alignment."""
    if len(est) != len(ref) or not est:
        raise ValueError("trajectories must be time-associated and equal length")
    if alignment is None:
        alignment = Pose.identity()
    Ra = alignment.rotation_matrix()
    terrs = []
    rerrs = []
    for e, r in zip(est, ref):
        p = Ra @ e.translation + alignment.translation
        terrs.append(np.linalg.norm(p - r.translation))
        R_err = (Ra @ e.rotation_matrix()).T @ r.rotation_matrix()
        cosang = np.clip((np.trace(R_err) - 1.0) / 2.0, -1.0, 1.0)
        rerrs.append(math.degrees(math.acos(cosang)))
    terrs = np.asarray(terrs)
    return TrajectoryMetrics(
        float(np.sqrt(np.mean(terrs**2))),
        float(np.mean(terrs)),
        float(np.mean(rerrs)),
    )


# ---------------------------------------------------------------------------
# Waypoint consistency
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WaypointDeviation:
    waypoint_id: int
    label: str  # typically the session id of the visit
    position_dev: float  # meters from the per-waypoint mean position
    orientation_dev_deg: float


def _chordal_mean_rotation(Rs: Sequence[np.ndarray]) -> np.ndarray:
    M = np.sum(Rs, axis=0)
    U, _, Vt = np.linalg.svd(M)
    D = np.diag([1.0, 1.0, float(np.sign(np.linalg.det(U @ Vt)))])
    return U @ D @ Vt


def waypoint_consistency(visits: Dict[int, List[Tuple[str, Pose]]]
                         ) -> Tuple[List[WaypointDeviation], np.ndarray, np.ndarray]:
    """Per-visit deviation from the per-waypoint average estimate.

    Returns (deviations, position CDF, orientation CDF); CDFs are (n, 2)
    arrays of sorted (deviation, cumulative fraction) rows ending at 1.
    Waypoints with fewer than 2 visits are skipped.
    """
    deviations: List[WaypointDeviation] = []
    for wid in sorted(visits):
        entries = visits[wid]
        if len(entries) < 2:
            continue
        positions = np.stack([p.translation for _, p in entries])
        mean_pos = positions.mean(axis=0)
        Rs = [p.rotation_matrix() for _, p in entries]
        R_mean = _chordal_mean_rotation(Rs)
        for (label, pose), R in zip(entries, Rs):
            pos_dev = float(np.linalg.norm(pose.translation - mean_pos))
            cosang = np.clip((np.trace(R.T @ R_mean) - 1.0) / 2.0, -1.0, 1.0)
            deviations.append(
                WaypointDeviation(wid, label, pos_dev,
                                  math.degrees(math.acos(cosang)))
            )
    if deviations:
        pos_cdf = _cdf([d.position_dev for d in deviations])
        ori_cdf = _cdf([d.orientation_dev_deg for d in deviations])
    else:
        pos_cdf = np.zeros((0, 2))
        ori_cdf = np.zeros((0, 2))
    return deviations, pos_cdf, ori_cdf


def _cdf(values: np.ndarray) -> np.ndarray:
    v = np.sort(np.asarray(values, dtype=np.float64))
    frac = np.arange(1, len(v) + 1) / len(v)
    return np.column_stack([v, frac])


# ---------------------------------------------------------------------------
# Object metrics
# ---------------------------------------------------------------------------


def volume_iou(a: Ellipsoid, b: Ellipsoid, n_samples: int = 200_000,
               seed: int = 0) -> float:
    """Monte-Carlo volume intersection-over-union of two ellipsoids."""
    ra = float(np.linalg.norm(a.dimensions) / 2.0)
    rb = float(np.linalg.norm(b.dimensions) / 2.0)
    if np.linalg.norm(a.position - b.position) >= ra + rb:
        return 0.0
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7070]))
    half = n_samples // 2

    def sample_inside(e: Ellipsoid, n: int) -> np.ndarray:
        u = rng.standard_normal((n, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        r = rng.uniform(size=(n, 1)) ** (1.0 / 3.0)
        pts = u * r * (e.dimensions / 2.0)
        return pts @ e.rotation_matrix().T + e.position

    frac_ab = float(np.mean(b.contains(sample_inside(a, half))))
    frac_ba = float(np.mean(a.contains(sample_inside(b, half))))
    va, vb = a.volume(), b.volume()
    inter = 0.5 * (va * frac_ab + vb * frac_ba)
    union = va + vb - inter
    if union <= 0.0:
        return 0.0
    return min(inter / union, 1.0)


def object_metrics(estimates: Sequence[Tuple[str, Ellipsoid]],
                   ground_truth: Sequence[Tuple[str, Ellipsoid]],
                   match_radius: Dict[str, float],
                   default_radius: float = 2.0,
                   n_samples: int = 200_000, seed: int = 0) -> ObjectMetrics:
    """Nearest same-class matching (multiple estimates may share one truth).

    Center error and volume IoU are computed per matched estimate; the
    estimated-per-ground-truth ratio and recall only count classes present in
    the ground truth (others are excluded and logged).
    """
    gt_classes = {c for c, _ in ground_truth}
    skipped = [c for c, _ in estimates if c not in gt_classes]
    if skipped:
        log.warning("estimates of classes without ground truth excluded: %s",
                    sorted(set(skipped)))

    center_errors: List[float] = []
    ious: List[float] = []
    matched_gt: set = set()
    n_est = 0
    for c, e in estimates:
        if c not in gt_classes:
            continue
        n_est += 1
        best = None
        for gi, (gc, gt) in enumerate(ground_truth):
            if gc != c:
                continue
            d = float(np.linalg.norm(e.position - gt.position))
            if best is None or d < best[0]:
                best = (d, gi, gt)
        d, gi, gt = best
        center_errors.append(d)
        ious.append(volume_iou(e, gt, n_samples, seed))
        if d <= match_radius.get(c, default_radius):
            matched_gt.add(gi)

    n_gt = len(ground_truth)
    if center_errors:
        ce = tuple(float(x) for x in np.percentile(center_errors, [25, 50, 75]))
        iq = tuple(float(x) for x in np.percentile(ious, [25, 50, 75]))
    else:
        ce = (0.0, 0.0, 0.0)
        iq = (0.0, 0.0, 0.0)
    return ObjectMetrics(
        center_error_quartiles=ce,
        iou_quartiles=iq,
        estimated_per_gt=(n_est / n_gt) if n_gt else 0.0,
        recall=(len(matched_gt) / n_gt) if n_gt else 0.0,
        matched=len(matched_gt),
        n_estimates=n_est,
        n_ground_truth=n_gt,
    )


# ---------------------------------------------------------------------------
# Report writers
# ---------------------------------------------------------------------------


def write_metrics_csv(path, rows: Iterable[Dict[str, object]]) -> None:
    rows = list(rows)
    if not rows:
        raise ValueError("no metric rows to write")
    fields = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow(r)


def write_cdf_csv(path, cdf: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["deviation", "fraction"])
        for dev, frac in cdf:
            w.writerow([repr(float(dev)), repr(float(frac))])


def write_summary_json(path, summary: dict) -> None:
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
