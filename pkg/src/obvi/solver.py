"""Sparse Levenberg-Marquardt solver over the factor graph.

Realizes the local belief (reprojection + bbox + shape + long-term-map
factors), the global belief (odometry replacing reprojection, features
fixed), the two-phase outlier-rejecting solve, and the sliding-window rules.
Feature blocks are eliminated by a Schur complement; the reduced
(pose + object) system is solved densely.  Everything is deterministic:
variable ordering is fixed by sorted ids and reductions are sequential.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Optional, Sequence, Set, Tuple

import numpy as np
import scipy.linalg

from . import kernels
from .factors import _quadric_and_derivs, ltm_error, odometry_error
from .geometry import (
    BOX_OK,
    UPRIGHT,
    ellipsoid_to_dual_quadric,
    project_quadrics_to_boxes,
    skew,
)
from .graph import FEATURE, OBJECT, POSE, FactorGraph

STATUS_CONVERGED = "converged"
STATUS_MAX_ITERATIONS = "max_iterations"
STATUS_FAILURE = "failure"

# residual magnitude assigned to invalid (non-positive depth) reprojection
# factors; matches the degenerate bbox convention so a step that pushes a
# feature behind the camera cannot look like a cost improvement
INVALID_REPROJ_ERROR = 1000.0


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 25
    ftol: float = 1e-6
    gtol: float = 1e-10
    xtol: float = 1e-12
    init_lambda: float = 1e-4
    lambda_max: float = 1e10
    phase1_ftol_scale: float = 10.0
    phase1_max_iterations: int = 10
    outlier_percentile_reproj: float = 0.95
    outlier_percentile_bbox: float = 0.90
    outlier_min_cost: float = 1e-12  # costs at numerical noise are never outliers
    window_size: int = 20
    fixed_pose_prefix: int = 2
    min_observations_in_window: int = 2
    degenerate_bbox_error: float = 1000.0
    cost_floor: float = 1e-18  # whitened cost below this is machine zero

    def __post_init__(self):
        if min(self.ftol, self.gtol, self.xtol) <= 0.0:
            raise ValueError("tolerances must be positive")
        for p in (self.outlier_percentile_reproj, self.outlier_percentile_bbox):
            if not 0.0 < p <= 1.0:
                raise ValueError("outlier percentiles must lie in (0, 1]")

    def phase1(self) -> "SolverConfig":
        return dataclasses.replace(
            self,
            ftol=self.ftol * self.phase1_ftol_scale,
            max_iterations=self.phase1_max_iterations,
        )


@dataclass(frozen=True)
class FactorSelection:
    reprojection: bool = True
    odometry: bool = True
    bbox: bool = True
    shape: bool = True
    ltm: bool = True


LOCAL_SELECTION = FactorSelection(reprojection=True, odometry=False, bbox=True,
                                  shape=True, ltm=True)
GLOBAL_SELECTION = FactorSelection(reprojection=False, odometry=True, bbox=True,
                                   shape=True, ltm=True)


@dataclass
class SolveResult:
    status: str
    initial_cost: float
    final_cost: float
    iterations: int
    message: str = ""
    cost_by_type: Dict[str, float] = field(default_factory=dict)
    invalid_reprojections: int = 0
    degenerate_bboxes: int = 0

    @property
    def success(self) -> bool:
        return self.status != STATUS_FAILURE


class SolverError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Problem: batched views of the selected factors over the free variables
# ---------------------------------------------------------------------------


class _State:
    __slots__ = ("poses", "features", "objects")

    def __init__(self, poses, features, objects):
        self.poses = poses  # list[Pose] aligned with problem pose order
        self.features = features  # (F_all, 3) array aligned with feature order
        self.objects = objects  # list[Ellipsoid] aligned with object order


class _Problem:
    def __init__(self, graph: FactorGraph, cfg: SolverConfig,
                 selection: FactorSelection,
                 free: Optional[Dict[str, Set[int]]] = None,
                 excluded: FrozenSet[int] = frozenset(),
                 pose_window: Optional[Set[int]] = None):
        self.graph = graph
        self.cfg = cfg
        self.selection = selection
        self.excluded = excluded
        self.pose_window = pose_window

        if free is None:
            free = {
                POSE: {i for i in graph.poses if not graph.is_constant(POSE, i)},
                FEATURE: {i for i in graph.features if not graph.is_constant(FEATURE, i)},
                OBJECT: {i for i in graph.objects if not graph.is_constant(OBJECT, i)},
            }
        if not selection.reprojection:
            free = dict(free)
            free[FEATURE] = set()

        # deterministic variable ordering
        self.pose_ids = sorted(graph.poses)
        self.feature_ids = sorted(graph.features)
        self.object_ids = sorted(graph.objects)
        self.pose_pos = {p: i for i, p in enumerate(self.pose_ids)}
        self.feat_pos = {f: i for i, f in enumerate(self.feature_ids)}
        self.obj_pos = {o: i for i, o in enumerate(self.object_ids)}

        self.free_pose = sorted(free.get(POSE, set()) & set(self.pose_ids))
        self.free_feat = sorted(free.get(FEATURE, set()) & set(self.feature_ids))
        self.free_obj = sorted(free.get(OBJECT, set()) & set(self.object_ids))
        self.pose_slot = {p: i for i, p in enumerate(self.free_pose)}
        self.feat_slot = {f: i for i, f in enumerate(self.free_feat)}
        self.obj_slot = {o: i for i, o in enumerate(self.free_obj)}

        self.obj_dim = 7 if graph.mode == UPRIGHT else 9
        self.n_pose_cols = 6 * len(self.free_pose)
        self.n_cols = self.n_pose_cols + self.obj_dim * len(self.free_obj)
        self.n_feat = len(self.free_feat)

        self._gather_factors()

    def column_name(self, col: int) -> str:
        if col < self.n_pose_cols:
            return f"pose {self.free_pose[col // 6]}[{col % 6}]"
        c = col - self.n_pose_cols
        return f"object {self.free_obj[c // self.obj_dim]}[{c % self.obj_dim}]"

    # -- factor gathering ----------------------------------------------------

    def _touches_free(self, f) -> bool:
        if hasattr(f, "feature_id"):
            return f.pose_index in self.pose_slot or f.feature_id in self.feat_slot
        if hasattr(f, "object_id") and hasattr(f, "pose_index"):
            return f.pose_index in self.pose_slot or f.object_id in self.obj_slot
        if hasattr(f, "from_index"):
            return f.from_index in self.pose_slot or f.to_index in self.pose_slot
        return f.object_id in self.obj_slot

    def _in_window(self, *pose_indices) -> bool:
        if self.pose_window is None:
            return True
        return all(p in self.pose_window for p in pose_indices)

    def _gather_factors(self) -> None:
        g = self.graph
        sel = self.selection
        ex = self.excluded

        self.reproj = [f for f in g.reprojection
                       if sel.reprojection and f.factor_id not in ex
                       and self._in_window(f.pose_index) and self._touches_free(f)]
        self.odom = [f for f in g.odometry
                     if sel.odometry and f.factor_id not in ex
                     and self._in_window(f.from_index, f.to_index)
                     and self._touches_free(f)]
        self.bboxf = [f for f in g.bbox
                      if sel.bbox and f.factor_id not in ex
                      and self._in_window(f.pose_index) and self._touches_free(f)]
        self.shapef = [f for f in g.shape_priors
                       if sel.shape and f.factor_id not in ex and self._touches_free(f)]
        self.ltmf = [f for f in g.ltm_priors
                     if sel.ltm and f.factor_id not in ex and self._touches_free(f)]

        # every free variable must be touched by at least one active factor
        touched: Set[Tuple[str, int]] = set()
        for f in self.reproj:
            touched.add((POSE, f.pose_index))
            touched.add((FEATURE, f.feature_id))
        for f in self.odom:
            touched.add((POSE, f.from_index))
            touched.add((POSE, f.to_index))
        for f in self.bboxf:
            touched.add((POSE, f.pose_index))
            touched.add((OBJECT, f.object_id))
        for f in self.shapef + self.ltmf:
            touched.add((OBJECT, f.object_id))
        missing = (
            [(POSE, p) for p in self.free_pose if (POSE, p) not in touched]
            + [(FEATURE, f) for f in self.free_feat if (FEATURE, f) not in touched]
            + [(OBJECT, o) for o in self.free_obj if (OBJECT, o) not in touched]
        )
        if missing:
            raise SolverError(f"free variables without any active factor: {missing[:10]}")

        # batched reprojection arrays, sorted by (feature slot, factor id) so
        # free-feature observations group contiguously for the Schur step
        def sort_key(f):
            return (self.feat_slot.get(f.feature_id, -1), f.factor_id)

        self.reproj.sort(key=sort_key)
        n = len(self.reproj)
        self.r_pose_slot = np.array(
            [self.pose_slot.get(f.pose_index, -1) for f in self.reproj], dtype=np.int64
        )
        self.r_feat_slot = np.array(
            [self.feat_slot.get(f.feature_id, -1) for f in self.reproj], dtype=np.int64
        )
        self.r_pose_pos = np.array([self.pose_pos[f.pose_index] for f in self.reproj],
                                   dtype=np.int64)
        self.r_feat_pos = np.array([self.feat_pos[f.feature_id] for f in self.reproj],
                                   dtype=np.int64)
        self.r_cam = np.array([f.camera_id for f in self.reproj], dtype=np.int64)
        self.r_pixel = (np.stack([f.pixel for f in self.reproj])
                        if n else np.zeros((0, 2)))
        self.r_whiten = (np.stack([f.sqrt_info for f in self.reproj])
                         if n else np.zeros((0, 2, 2)))

        cam_ids = sorted(g.cameras)
        self.cam_index = {c: i for i, c in enumerate(cam_ids)}
        self.cam_list = [g.cameras[c] for c in cam_ids]
        self.r_cam_idx = np.array([self.cam_index[c] for c in self.r_cam], dtype=np.int64)
        self.kparams = np.array(
            [[c.fx, float(c.intrinsics[0, 1]), c.cx, c.fy, c.cy] for c in self.cam_list]
        ).reshape(-1, 5)
        self._extrinsic_rot = (np.stack([c.extrinsic.rotation_matrix()
                                         for c in self.cam_list])
                               if self.cam_list else np.zeros((0, 3, 3)))
        self._extrinsic_t = (np.stack([c.extrinsic.translation for c in self.cam_list])
                             if self.cam_list else np.zeros((0, 3)))

        # static observation -> (pose, camera) pair mapping for transforms
        pair_keys: Dict[Tuple[int, int], int] = {}
        self.r_pair_of_obs = np.empty(n, dtype=np.int64)
        for i in range(n):
            key = (int(self.r_pose_pos[i]), int(self.r_cam_idx[i]))
            if key not in pair_keys:
                pair_keys[key] = len(pair_keys)
            self.r_pair_of_obs[i] = pair_keys[key]
        self.r_pairs = list(pair_keys)

        # bbox factor batches grouped by (pose, camera) for vectorized costs
        m = len(self.bboxf)
        self.b_pose_pos = np.array([self.pose_pos[f.pose_index] for f in self.bboxf],
                                   dtype=np.int64)
        self.b_obj_pos = np.array([self.obj_pos[f.object_id] for f in self.bboxf],
                                  dtype=np.int64)
        self.b_cam_idx = np.array([self.cam_index[f.camera_id] for f in self.bboxf],
                                  dtype=np.int64)
        self.b_box = (np.stack([f.box for f in self.bboxf]) if m else np.zeros((0, 4)))
        self.b_whiten = (np.stack([f.sqrt_info for f in self.bboxf])
                         if m else np.zeros((0, 4, 4)))
        groups: Dict[Tuple[int, int], List[int]] = {}
        for i in range(m):
            groups.setdefault((int(self.b_pose_pos[i]), int(self.b_cam_idx[i])),
                              []).append(i)
        self.b_groups = [(k, np.array(v, dtype=np.int64)) for k, v in groups.items()]

    # -- state shuttling -------------------------------------------------------

    def state_from_graph(self) -> _State:
        g = self.graph
        poses = [g.poses[p] for p in self.pose_ids]
        feats = (np.stack([g.features[f] for f in self.feature_ids])
                 if self.feature_ids else np.zeros((0, 3)))
        objs = [g.objects[o] for o in self.object_ids]
        return _State(poses, feats, objs)

    def write_back(self, st: _State) -> None:
        g = self.graph
        for p in self.free_pose:
            g.poses[p] = st.poses[self.pose_pos[p]]
        for f in self.free_feat:
            g.features[f] = st.features[self.feat_pos[f]].copy()
        for o in self.free_obj:
            g.objects[o] = st.objects[self.obj_pos[o]]

    def retract(self, st: _State, delta: np.ndarray, feat_delta: np.ndarray) -> _State:
        poses = list(st.poses)
        for p, slot in self.pose_slot.items():
            d = delta[6 * slot: 6 * slot + 6]
            poses[self.pose_pos[p]] = st.poses[self.pose_pos[p]].retract(d[:3], d[3:])
        objects = list(st.objects)
        off = self.n_pose_cols
        for o, slot in self.obj_slot.items():
            d = delta[off + self.obj_dim * slot: off + self.obj_dim * (slot + 1)]
            objects[self.obj_pos[o]] = st.objects[self.obj_pos[o]].retract(d)
        features = st.features
        if self.n_feat:
            features = st.features.copy()
            for f, slot in self.feat_slot.items():
                features[self.feat_pos[f]] += feat_delta[3 * slot: 3 * slot + 3]
        return _State(poses, features, objects)

    # -- evaluation ------------------------------------------------------------

    def _reproj_eval(self, st: _State, want_jacobians: bool):
        n = len(self.reproj)
        if n == 0:
            empty = np.zeros((0, 2))
            return (empty, np.zeros((0, 2, 6)), np.zeros((0, 2, 3)),
                    np.ones(0, dtype=bool))
        pair_ppos = np.array([p for p, _ in self.r_pairs], dtype=np.int64)
        pair_cidx = np.array([c for _, c in self.r_pairs], dtype=np.int64)
        quats = np.stack([st.poses[p].rotation for p in pair_ppos])
        t_wr = np.stack([st.poses[p].translation for p in pair_ppos])
        R_wr = kernels.quat_to_rot_batch(quats)
        Re = self._extrinsic_rot[pair_cidx]
        te = self._extrinsic_t[pair_cidx]
        R_wc = np.einsum("nij,njk->nik", R_wr, Re)
        t_wc = np.einsum("nij,nj->ni", R_wr, te) + t_wr
        R_cw = np.transpose(R_wc, (0, 2, 1))
        t_cw = -np.einsum("nij,nj->ni", R_cw, t_wc)
        Re_T = np.transpose(Re, (0, 2, 1))
        Rwr_T = np.transpose(R_wr, (0, 2, 1))

        pair_of_obs = self.r_pair_of_obs
        points = st.features[self.r_feat_pos]
        res, J_pose, J_pt, valid = kernels.reprojection_batch(
            R_cw[pair_of_obs], t_cw[pair_of_obs], Re_T[pair_of_obs],
            Rwr_T[pair_of_obs], t_wr[pair_of_obs],
            self.kparams[self.r_cam_idx], points, self.r_pixel, self.r_whiten,
            want_jacobians,
        )
        return res, J_pose, J_pt, valid

    def _bbox_residuals_batch(self, st: _State):
        """Whitened residuals for every bbox factor; degenerate ones get the
        fixed error with a True flag in the returned degenerate mask."""
        m = len(self.bboxf)
        res = np.zeros((m, 4))
        degenerate = np.zeros(m, dtype=bool)
        if m == 0:
            return res, degenerate
        quadrics = np.stack(
            [ellipsoid_to_dual_quadric(o).matrix for o in st.objects]
        )
        for (ppos, cidx), idx in self.b_groups:
            pose = st.poses[ppos]
            cam = self.cam_list[cidx]
            X = pose.compose(cam.extrinsic).inverse()
            obj_rows = self.b_obj_pos[idx]
            boxes, status = project_quadrics_to_boxes(
                quadrics[obj_rows], X, cam.intrinsics
            )
            ok = status == BOX_OK
            raw = boxes - self.b_box[idx]
            out = np.einsum("nij,nj->ni", self.b_whiten[idx], raw)
            out[~ok] = self.cfg.degenerate_bbox_error
            res[idx] = out
            degenerate[idx[~ok]] = True
        return res, degenerate

    @staticmethod
    def _batched_box_grads(G: np.ndarray):
        """Vectorized tangent-line boxes and gradients for conics (m,3,3).

        Returns (box (m,4), dbox_dg (m,4,6), ok (m,)) with gradient columns
        ordered (g11, g12, g13, g22, g23, g33); mirrors the scalar path in
        factors._box_and_derivs / geometry.conic_to_bbox.
        """
        m = G.shape[0]
        g11, g12, g13 = G[:, 0, 0], G[:, 0, 1], G[:, 0, 2]
        g22, g23, g33 = G[:, 1, 1], G[:, 1, 2], G[:, 2, 2]
        gmax = np.maximum(np.max(np.abs(G), axis=(1, 2)) ** 2, 1.0)
        scale2 = g33 * g33
        ok = scale2 >= 1e-24 * gmax
        deadband = 1e-10 * scale2
        disc_u = g13 * g13 - g11 * g33
        disc_v = g23 * g23 - g22 * g33
        u_neg = disc_u < -deadband
        v_neg = disc_v < -deadband
        ok &= ~(u_neg | v_neg)
        a11 = -disc_v
        a22 = -disc_u
        a12 = -(g12 * g33 - g13 * g23)
        ok &= (a11 * a22 - a12 * a12) > 0.0

        box = np.zeros((m, 4))
        dbox = np.zeros((m, 4, 6))
        if ok.any():
            i = np.where(ok)[0]
            su = np.sqrt(np.maximum(disc_u[i], 1e-300))
            sv = np.sqrt(np.maximum(disc_v[i], 1e-300))
            sgn = np.where(g33[i] > 0.0, -1.0, 1.0)
            for row, (gaa, ga3, s, sign, caa, ca3) in enumerate(
                [(g11[i], g13[i], su, sgn, 0, 2), (g11[i], g13[i], su, -sgn, 0, 2),
                 (g22[i], g23[i], sv, sgn, 3, 4), (g22[i], g23[i], sv, -sgn, 3, 4)]
            ):
                val = (ga3 + sign * s) / g33[i]
                box[i, row] = val
                dbox[i, row, caa] = sign * (-g33[i] / (2.0 * s)) / g33[i]
                dbox[i, row, ca3] = (1.0 + sign * ga3 / s) / g33[i]
                dbox[i, row, 5] = sign * (-gaa / (2.0 * s)) / g33[i] - val / g33[i]
        return box, dbox, ok

    def _bbox_linearize_batch(self, st: _State):
        """Residuals + Jacobians for all bbox factors, vectorized per group."""
        m = len(self.bboxf)
        nobj = self.obj_dim
        res = np.full((m, 4), self.cfg.degenerate_bbox_error)
        J_pose = np.zeros((m, 4, 6))
        J_obj = np.zeros((m, 4, nobj))
        valid = np.zeros(m, dtype=bool)
        if m == 0:
            return res, J_pose, J_obj, valid

        # per-object quadrics and parameter derivatives, computed once
        used_objs = sorted(set(int(o) for o in self.b_obj_pos))
        Q_of = {}
        dQ_of = {}
        for opos in used_objs:
            Q_of[opos], dQ_of[opos] = _quadric_and_derivs(st.objects[opos])

        sym_rows = ([0, 0, 0, 1, 1, 2], [0, 1, 2, 1, 2, 2])

        for (ppos, cidx), idx in self.b_groups:
            pose = st.poses[ppos]
            cam = self.cam_list[cidx]
            R_wr = pose.rotation_matrix()
            R_e = cam.extrinsic.rotation_matrix()
            R_wc = R_wr @ R_e
            t_wc = R_wr @ cam.extrinsic.translation + pose.translation
            R_cw = R_wc.T
            t_cw = -(R_cw @ t_wc)
            K = cam.intrinsics
            M = K @ np.hstack([R_cw, t_cw[:, None]])

            # pose-tangent directional derivatives of M (shared by the group)
            dM = np.zeros((6, 3, 4))
            for k in range(3):
                e = np.zeros(3)
                e[k] = 1.0
                dM[k, :, 3] = K @ (-(R_cw @ e))
            for k in range(3):
                e = np.zeros(3)
                e[k] = 1.0
                dRcw = -R_e.T @ skew(e) @ R_wr.T
                dM[3 + k, :, :3] = K @ dRcw
                dM[3 + k, :, 3] = K @ (-(dRcw @ pose.translation))

            obj_rows = self.b_obj_pos[idx]
            Q = np.stack([Q_of[int(o)] for o in obj_rows])  # (f,4,4)
            dQ = np.stack([dQ_of[int(o)] for o in obj_rows])  # (f,n,4,4)

            center = Q[:, :3, 3] / Q[:, 3, 3, None]
            depth = center @ R_cw[2] + t_cw[2]

            QMt = np.einsum("fij,kj->fik", Q, M)  # (f,4,3)
            G = np.einsum("ij,fjk->fik", M, QMt)
            G = 0.5 * (G + np.transpose(G, (0, 2, 1)))
            box, dbox, ok = self._batched_box_grads(G)
            ok &= depth > 0.0

            raw = box - self.b_box[idx]
            r = np.einsum("fij,fj->fi", self.b_whiten[idx], raw)
            r[~ok] = self.cfg.degenerate_bbox_error

            # object-parameter Jacobians: dG_k = M dQ_k M^T
            dG_obj = np.einsum("ij,fkjl,ml->fkim", M, dQ, M)
            sym_obj = dG_obj[:, :, sym_rows[0], sym_rows[1]]  # (f,n,6)
            Jo = np.einsum("fre,fke->frk", dbox, sym_obj)
            # pose-tangent Jacobians: dG_j = dM_j Q M^T + (dM_j Q M^T)^T
            T = np.einsum("jik,fkl->fjil", dM, QMt)  # (f,6,3,3)
            Tsym = T + np.transpose(T, (0, 1, 3, 2))
            sym_pose = Tsym[:, :, sym_rows[0], sym_rows[1]]  # (f,6,6)
            Jp = np.einsum("fre,fje->frj", dbox, sym_pose)

            Jo = np.einsum("fij,fjk->fik", self.b_whiten[idx], Jo)
            Jp = np.einsum("fij,fjk->fik", self.b_whiten[idx], Jp)
            Jo[~ok] = 0.0
            Jp[~ok] = 0.0

            res[idx] = r
            J_pose[idx] = Jp
            J_obj[idx] = Jo
            valid[idx] = ok
        return res, J_pose, J_obj, valid

    def cost(self, st: _State) -> Tuple[float, Dict[str, float], Dict[str, int]]:
        by_type: Dict[str, float] = {}
        counters = {"invalid_reproj": 0, "degenerate_bbox": 0}

        res, _, _, valid = self._reproj_eval(st, want_jacobians=False)
        by_type["reprojection"] = 0.5 * float(np.sum(res * res))
        counters["invalid_reproj"] = int(np.sum(~valid))

        c = 0.0
        for f in self.odom:
            r = self._odom_residual(st, f)
            c += 0.5 * float(r @ r)
        by_type["odometry"] = c

        bres, degenerate = self._bbox_residuals_batch(st)
        by_type["bbox"] = 0.5 * float(np.sum(bres * bres))
        counters["degenerate_bbox"] = int(degenerate.sum())

        c = 0.0
        for f in self.shapef:
            r = self._shape_residual(st, f)
            c += 0.5 * float(r @ r)
        by_type["shape_prior"] = c

        c = 0.0
        for f in self.ltmf:
            r = self._ltm_residual(st, f)
            c += 0.5 * float(r @ r)
        by_type["ltm_prior"] = c

        return float(sum(by_type.values())), by_type, counters

    # per-factor residual helpers (whitened); sqrt_info is prebaked in factors
    def _odom_residual(self, st: _State, f, jac: bool = False):
        a = st.poses[self.pose_pos[f.from_index]]
        b = st.poses[self.pose_pos[f.to_index]]
        r, Ja, Jb = odometry_error(a, b, f.measured, jacobians=jac)
        if not jac:
            return f.sqrt_info @ r
        return f.sqrt_info @ r, f.sqrt_info @ Ja, f.sqrt_info @ Jb

    def _shape_residual(self, st: _State, f, jac: bool = False):
        obj = st.objects[self.obj_pos[f.object_id]]
        r = f.mean_dimensions - obj.dimensions
        if not jac:
            return f.sqrt_info @ r
        n = obj.param_dim()
        J = np.zeros((3, n))
        J[:, n - 3:] = -np.eye(3)
        return f.sqrt_info @ r, f.sqrt_info @ J

    def _ltm_residual(self, st: _State, f, jac: bool = False):
        obj = st.objects[self.obj_pos[f.object_id]]
        r, J = ltm_error(obj, f.mean, jacobians=jac)
        if not jac:
            return f.sqrt_info @ r
        return f.sqrt_info @ r, f.sqrt_info @ J

    # -- linearization ----------------------------------------------------------

    def linearize(self, st: _State):
        """Build the whitened normal-equation pieces at the current state."""
        nA = self.n_cols
        A = np.zeros((nA, nA))
        b = np.zeros(nA)
        C = np.zeros((self.n_feat, 3, 3))
        bC = np.zeros((self.n_feat, 3))

        res, J_pose, J_pt, valid = self._reproj_eval(st, want_jacobians=True)
        n = len(self.reproj)
        W = None  # dense pose-feature cross term (n_pose_cols, 3 n_feat)
        if n:
            ps = self.r_pose_slot
            fs = self.r_feat_slot
            # pose-diagonal contributions
            use_p = (ps >= 0) & valid
            if use_p.any():
                Jp = J_pose[use_p]
                blocks = np.einsum("nij,nik->njk", Jp, Jp)
                gvec = np.einsum("nij,ni->nj", Jp, res[use_p])
                slots = ps[use_p]
                H_diag = np.zeros((len(self.free_pose), 6, 6))
                g_diag = np.zeros((len(self.free_pose), 6))
                np.add.at(H_diag, slots, blocks)
                np.add.at(g_diag, slots, gvec)
                for s in range(len(self.free_pose)):
                    A[6 * s: 6 * s + 6, 6 * s: 6 * s + 6] += H_diag[s]
                    b[6 * s: 6 * s + 6] -= g_diag[s]
            # feature blocks
            use_f = (fs >= 0) & valid
            if use_f.any():
                Jf = J_pt[use_f]
                np.add.at(C, fs[use_f], np.einsum("nij,nik->njk", Jf, Jf))
                np.add.at(bC, fs[use_f], -np.einsum("nij,ni->nj", Jf, res[use_f]))
            # pose-feature cross terms, scattered into one dense matrix once
            both = (ps >= 0) & (fs >= 0) & valid
            if self.n_feat and both.any():
                W = np.zeros((self.n_pose_cols, 3 * self.n_feat))
                idx = np.where(both)[0]
                W_blk = np.einsum("nij,nik->njk", J_pose[idx], J_pt[idx])  # (m,6,3)
                rows = (6 * ps[idx])[:, None, None] + np.arange(6)[None, :, None]
                cols = (3 * fs[idx])[:, None, None] + np.arange(3)[None, None, :]
                np.add.at(W, (rows, cols), W_blk)

        for f in self.odom:
            r, Ja, Jb = self._odom_residual(st, f, jac=True)
            sa = self.pose_slot.get(f.from_index, -1)
            sb = self.pose_slot.get(f.to_index, -1)
            self._add_dense(A, b, r, [(sa, Ja, 6, 0), (sb, Jb, 6, 0)])
        bres, bJp, bJo, bok = self._bbox_linearize_batch(st)
        for i, f in enumerate(self.bboxf):
            if not bok[i]:
                continue  # degenerate: constant cost, zero gradient
            sp = self.pose_slot.get(f.pose_index, -1)
            so = self.obj_slot.get(f.object_id, -1)
            self._add_dense(A, b, bres[i],
                            [(sp, bJp[i], 6, 0), (so, bJo[i], self.obj_dim, self.n_pose_cols)])
        for f in self.shapef:
            r, J = self._shape_residual(st, f, jac=True)
            so = self.obj_slot.get(f.object_id, -1)
            self._add_dense(A, b, r, [(so, J, self.obj_dim, self.n_pose_cols)])
        for f in self.ltmf:
            r, J = self._ltm_residual(st, f, jac=True)
            so = self.obj_slot.get(f.object_id, -1)
            self._add_dense(A, b, r, [(so, J, self.obj_dim, self.n_pose_cols)])

        return _Linearized(self, A, b, C, bC, W)

    @staticmethod
    def _add_dense(A, b, r, terms):
        keep = [(slot, J, dim, off) for slot, J, dim, off in terms if slot >= 0]
        for slot, J, dim, off in keep:
            i0 = off + dim * slot
            b[i0: i0 + dim] -= J.T @ r
        for ai in range(len(keep)):
            sa, Ja, da, oa = keep[ai]
            i0 = oa + da * sa
            for bi in range(ai, len(keep)):
                sb, Jb, db, ob = keep[bi]
                j0 = ob + db * sb
                blk = Ja.T @ Jb
                A[i0: i0 + da, j0: j0 + db] += blk
                if (i0, da) != (j0, db):
                    A[j0: j0 + db, i0: i0 + da] += blk.T


class _Linearized:
    """Normal-equation pieces; damping and Schur elimination happen per-lambda."""

    def __init__(self, prob: _Problem, A, b, C, bC, W):
        self.prob = prob
        self.A = A
        self.b = b
        self.C = C  # (F, 3, 3) feature information blocks
        self.bC = bC  # (F, 3)
        self.W = W  # dense (n_pose_cols, 3F) cross term, or None
        # flat directions (e.g. the yaw of a rotationally symmetric object)
        # must still be damped on the scale of the rest of the problem
        scale = 0.0
        if A.size:
            scale = float(np.max(np.diag(A)))
        if C.size:
            scale = max(scale, float(np.max(C[:, [0, 1, 2], [0, 1, 2]])))
        self._diag_floor = max(1e-6 * scale, 1e-8)
        # gradient infinity norm over free variables (feature part included)
        self.grad_inf = 0.0
        if b.size:
            self.grad_inf = float(np.max(np.abs(b)))
        if bC.size:
            self.grad_inf = max(self.grad_inf, float(np.max(np.abs(bC))))

    def reduce(self, lam: float):
        """Feature-eliminated (A, b) at damping lam, plus the damped C inverse."""
        prob = self.prob
        A = self.A.copy()
        b = self.b.copy()
        Cinv = None
        if prob.n_feat:
            C = self.C + lam * _damp_diag(self.C, self._diag_floor)
            Cinv = np.linalg.inv(C)
            if self.W is not None:
                npc = prob.n_pose_cols
                Wr = self.W.reshape(npc, prob.n_feat, 3)
                X = np.einsum("pfi,fij->pfj", Wr, Cinv)
                A[:npc, :npc] -= np.einsum("pfj,qfj->pq", X, Wr)
                b[:npc] -= np.einsum("pfj,fj->p", X, self.bC)
        return A, b, Cinv

    def solve(self, lam: float):
        prob = self.prob
        nA = prob.n_cols
        A, b, Cinv = self.reduce(lam)

        A[np.diag_indices(nA)] += lam * _damp_vec(np.diag(self.A), self._diag_floor)
        if nA:
            try:
                cho = scipy.linalg.cho_factor(A, lower=True, check_finite=False)
                delta = scipy.linalg.cho_solve(cho, b, check_finite=False)
            except (np.linalg.LinAlgError, ValueError) as e:
                raise _NormalEqFailure(self._diagnose(A)) from e
            if not np.all(np.isfinite(delta)):
                raise _NormalEqFailure(self._diagnose(A))
        else:
            delta = np.zeros(0)

        feat_delta = np.zeros(3 * prob.n_feat)
        if prob.n_feat and Cinv is not None:
            resid = self.bC.copy()
            if self.W is not None:
                back = self.W.T @ delta[: prob.n_pose_cols]
                resid -= back.reshape(prob.n_feat, 3)
            feat_delta = np.einsum("fij,fj->fi", Cinv, resid).ravel()
        return delta, feat_delta

    def _diagnose(self, A) -> str:
        d = np.diag(A)
        bad = np.where(~np.isfinite(d) | (d <= 0.0))[0]
        names = []
        for col in bad[:20]:
            names.append(self.prob.column_name(int(col)))
        return f"normal equations not positive definite; suspect columns: {names}"


def _damp_vec(d: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    return np.clip(d, floor, 1e32)


def _damp_diag(C: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    out = np.zeros_like(C)
    idx = np.arange(C.shape[1])
    out[:, idx, idx] = _damp_vec(C[:, idx, idx], floor)
    return out


class _NormalEqFailure(Exception):
    pass


# ---------------------------------------------------------------------------
# Public solve entry points
# ---------------------------------------------------------------------------


def solve(graph: FactorGraph, cfg: SolverConfig,
          selection: FactorSelection = FactorSelection(),
          free: Optional[Dict[str, Set[int]]] = None,
          excluded: FrozenSet[int] = frozenset(),
          pose_window: Optional[Set[int]] = None) -> SolveResult:
    """Levenberg-Marquardt minimization of the selected factors.

    Updates the graph estimates in place on success; constant variables are
    never touched.  The accepted-step cost sequence is non-increasing.
    """
    graph.validate()
    prob = _Problem(graph, cfg, selection, free, excluded, pose_window)
    st = prob.state_from_graph()
    cost, by_type, counters = prob.cost(st)
    initial_cost = cost

    if prob.n_cols == 0 and prob.n_feat == 0:
        return SolveResult(STATUS_CONVERGED, initial_cost, cost, 0, "no free variables",
                           by_type, counters["invalid_reproj"], counters["degenerate_bbox"])

    lam = cfg.init_lambda
    iterations = 0
    status = STATUS_MAX_ITERATIONS
    message = ""
    for _ in range(cfg.max_iterations):
        if cost <= cfg.cost_floor:
            status = STATUS_CONVERGED
            message = "cost at machine zero"
            break
        lin = prob.linearize(st)
        if lin.grad_inf < cfg.gtol:
            status = STATUS_CONVERGED
            message = "gradient tolerance reached"
            break

        accepted = False
        failure_msg = ""
        while lam <= cfg.lambda_max:
            try:
                delta, feat_delta = lin.solve(lam)
            except _NormalEqFailure as e:
                # escalate damping first; report failure only if it never helps
                failure_msg = str(e)
                lam *= 4.0
                continue
            step_inf = max(
                float(np.max(np.abs(delta))) if delta.size else 0.0,
                float(np.max(np.abs(feat_delta))) if feat_delta.size else 0.0,
            )
            cand = prob.retract(st, delta, feat_delta)
            new_cost, new_by_type, new_counters = prob.cost(cand)
            if new_cost <= cost:
                st = cand
                decrease = cost - new_cost
                cost, by_type, counters = new_cost, new_by_type, new_counters
                lam = max(lam / 3.0, 1e-12)
                iterations += 1
                accepted = True
                if decrease <= cfg.ftol * max(cost, 1e-30):
                    status = STATUS_CONVERGED
                    message = "function tolerance reached"
                elif step_inf < cfg.xtol:
                    status = STATUS_CONVERGED
                    message = "step tolerance reached"
                break
            lam *= 4.0
        if not accepted:
            if failure_msg:
                prob.write_back(st)
                return SolveResult(STATUS_FAILURE, initial_cost, cost, iterations,
                                   failure_msg, by_type, counters["invalid_reproj"],
                                   counters["degenerate_bbox"])
            status = STATUS_CONVERGED
            message = "no further progress (damping exhausted)"
            break
        if status == STATUS_CONVERGED:
            break

    prob.write_back(st)
    return SolveResult(status, initial_cost, cost, iterations, message, by_type,
                       counters["invalid_reproj"], counters["degenerate_bbox"])


@dataclass
class ReducedInformation:
    """Gauss-Newton information over [pose | object] columns, features eliminated.

    ``matrix`` is J^T J at the current estimates with every free feature block
    removed by an exact Schur complement; ``column_norm`` holds the full
    Jacobian column norms (sqrt of the pre-elimination diagonal).
    """

    matrix: np.ndarray
    column_norm: np.ndarray
    free_pose: Tuple[int, ...]
    free_obj: Tuple[int, ...]
    n_pose_cols: int
    obj_dim: int

    def column_label(self, col: int) -> str:
        if col < self.n_pose_cols:
            return f"pose {self.free_pose[col // 6]}[{col % 6}]"
        c = col - self.n_pose_cols
        return f"object {self.free_obj[c // self.obj_dim]}[{c % self.obj_dim}]"


def reduced_information(graph: FactorGraph, cfg: SolverConfig,
                        selection: FactorSelection = FactorSelection(),
                        free: Optional[Dict[str, Set[int]]] = None
                        ) -> ReducedInformation:
    """Linearize at the current estimates and eliminate feature blocks exactly."""
    prob = _Problem(graph, cfg, selection, free)
    st = prob.state_from_graph()
    lin = prob.linearize(st)
    col_norm = np.sqrt(np.maximum(np.diag(lin.A), 0.0))

    if prob.n_feat:
        evals = np.linalg.eigvalsh(lin.C)
        bad = (evals[:, 0] <= 1e-12 * np.maximum(evals[:, -1], 1e-12))
        if bad.any():
            ids = [prob.free_feat[i] for i in np.where(bad)[0][:10]]
            raise SolverError(
                f"feature blocks singular during marginalization: {ids}"
            )
    A, _, _ = lin.reduce(0.0)

    return ReducedInformation(A, col_norm, tuple(prob.free_pose), tuple(prob.free_obj),
                              prob.n_pose_cols, prob.obj_dim)


def factor_costs(graph: FactorGraph, cfg: SolverConfig,
                 selection: FactorSelection = FactorSelection(),
                 free: Optional[Dict[str, Set[int]]] = None,
                 excluded: FrozenSet[int] = frozenset(),
                 pose_window: Optional[Set[int]] = None):
    """Whitened squared cost per included reprojection / bbox factor."""
    prob = _Problem(graph, cfg, selection, free, excluded, pose_window)
    st = prob.state_from_graph()
    res, _, _, _ = prob._reproj_eval(st, want_jacobians=False)
    reproj = {f.factor_id: float(r @ r) for f, r in zip(prob.reproj, res)}
    bres, _ = prob._bbox_residuals_batch(st)
    bbox = {f.factor_id: float(r @ r) for f, r in zip(prob.bboxf, bres)}
    return reproj, bbox


def two_phase_solve(graph: FactorGraph, cfg: SolverConfig,
                    selection: FactorSelection = FactorSelection(),
                    free: Optional[Dict[str, Set[int]]] = None,
                    excluded: FrozenSet[int] = frozenset(),
                    pose_window: Optional[Set[int]] = None
                    ) -> Tuple[SolveResult, FrozenSet[int]]:
    """Outlier-rejecting solve: a loose pass flags high-cost reprojection and
    bbox factors, then the final pass re-runs from the pre-phase-1 estimates
    without them.  Odometry, shape, and long-term-map factors are never
    excluded.
    """
    snapshot = graph.snapshot()
    solve(graph, cfg.phase1(), selection, free, excluded, pose_window)
    reproj_costs, bbox_costs = factor_costs(graph, cfg, selection, free, excluded,
                                            pose_window)

    outliers: Set[int] = set()
    if reproj_costs:
        vals = np.array(list(reproj_costs.values()))
        thresh = max(float(np.quantile(vals, cfg.outlier_percentile_reproj)),
                     cfg.outlier_min_cost)
        outliers |= {fid for fid, c in reproj_costs.items() if c > thresh}
    if bbox_costs:
        vals = np.array(list(bbox_costs.values()))
        thresh = max(float(np.quantile(vals, cfg.outlier_percentile_bbox)),
                     cfg.outlier_min_cost)
        outliers |= {fid for fid, c in bbox_costs.items() if c > thresh}

    graph.restore(snapshot)
    all_excluded = frozenset(excluded) | frozenset(outliers)
    pruned = _prune_orphaned_free(graph, selection, free, all_excluded, pose_window)
    result = solve(graph, cfg, selection, pruned, all_excluded, pose_window)
    return result, frozenset(outliers)


def _prune_orphaned_free(graph: FactorGraph, selection: FactorSelection,
                         free: Optional[Dict[str, Set[int]]],
                         excluded: FrozenSet[int],
                         pose_window: Optional[Set[int]]) -> Dict[str, Set[int]]:
    """Drop free variables whose every factor was excluded as an outlier."""
    if free is None:
        free = {
            POSE: {i for i in graph.poses if not graph.is_constant(POSE, i)},
            FEATURE: {i for i in graph.features if not graph.is_constant(FEATURE, i)},
            OBJECT: {i for i in graph.objects if not graph.is_constant(OBJECT, i)},
        }

    def in_window(*idx):
        return pose_window is None or all(p in pose_window for p in idx)

    touched: Set[Tuple[str, int]] = set()
    if selection.reprojection:
        for f in graph.reprojection:
            if f.factor_id not in excluded and in_window(f.pose_index):
                touched.add((POSE, f.pose_index))
                touched.add((FEATURE, f.feature_id))
    if selection.odometry:
        for f in graph.odometry:
            if f.factor_id not in excluded and in_window(f.from_index, f.to_index):
                touched.add((POSE, f.from_index))
                touched.add((POSE, f.to_index))
    if selection.bbox:
        for f in graph.bbox:
            if f.factor_id not in excluded and in_window(f.pose_index):
                touched.add((POSE, f.pose_index))
                touched.add((OBJECT, f.object_id))
    if selection.shape:
        for f in graph.shape_priors:
            if f.factor_id not in excluded:
                touched.add((OBJECT, f.object_id))
    if selection.ltm:
        for f in graph.ltm_priors:
            if f.factor_id not in excluded:
                touched.add((OBJECT, f.object_id))
    return {
        kind: {v for v in ids if (kind, v) in touched}
        for kind, ids in free.items()
    }


def local_adjust(graph: FactorGraph, window: Sequence[int], cfg: SolverConfig,
                 two_phase: bool = False):
    """Sliding-window adjustment with the local belief (no odometry factors).

    Only observations made inside the window enter the problem, and only
    variables observed inside the window are free; the first
    ``fixed_pose_prefix`` window poses stay constant (never all of them), and
    features/objects short of ``min_observations_in_window`` in-window
    observations stay constant.
    """
    window = sorted(w for w in window if w in graph.poses)
    if not window:
        raise ValueError("empty local adjustment window")
    wset = set(window)

    feat_count: Dict[int, int] = {}
    obj_count: Dict[int, int] = {}
    observed_poses: Set[int] = set()
    for f in graph.reprojection:
        if f.pose_index in wset:
            feat_count[f.feature_id] = feat_count.get(f.feature_id, 0) + 1
            observed_poses.add(f.pose_index)
    for f in graph.bbox:
        if f.pose_index in wset:
            obj_count[f.object_id] = obj_count.get(f.object_id, 0) + 1
            observed_poses.add(f.pose_index)

    prefix = min(cfg.fixed_pose_prefix, len(window) - 1)
    free_poses = {
        p for p in window[prefix:]
        if p in observed_poses and not graph.is_constant(POSE, p)
    }
    free_feats = {
        f for f, c in feat_count.items()
        if c >= cfg.min_observations_in_window and not graph.is_constant(FEATURE, f)
    }
    free_objs = {
        o for o, c in obj_count.items()
        if c >= cfg.min_observations_in_window and not graph.is_constant(OBJECT, o)
    }
    free = {POSE: free_poses, FEATURE: free_feats, OBJECT: free_objs}
    if two_phase:
        return two_phase_solve(graph, cfg, LOCAL_SELECTION, free, pose_window=wset)[0]
    return solve(graph, cfg, LOCAL_SELECTION, free, pose_window=wset)


def global_adjust(graph: FactorGraph, cfg: SolverConfig):
    """Full-trajectory adjustment with the simplified belief.

    Odometry factors replace reprojection terms and must exist for every
    consecutive pose pair; feature variables are held constant.
    """
    pose_ids = sorted(graph.poses)
    have = {(f.from_index, f.to_index) for f in graph.odometry}
    missing = [
        (a, b) for a, b in zip(pose_ids[:-1], pose_ids[1:]) if (a, b) not in have
    ]
    if missing:
        raise SolverError(f"global adjustment requires odometry factors; missing {missing[:5]}")
    free = {
        POSE: {p for p in graph.poses if not graph.is_constant(POSE, p)},
        FEATURE: set(),
        OBJECT: {o for o in graph.objects if not graph.is_constant(OBJECT, o)},
    }
    return solve(graph, cfg, GLOBAL_SELECTION, free)
