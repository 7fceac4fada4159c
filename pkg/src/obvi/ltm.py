"""Long-term map extraction: refinement, dense prior, sparsification, storage.

After a session, the graph is refined and duplicate objects merged; the dense
prior is the marginal Gaussian over all objects (poses/features eliminated),
with covariance recovered from the Gauss-Newton information at the optimum
and a column-norm retry path for rank-deficient problems.  Sparsification
keeps the KL-optimal independent per-object Gaussians, which the next session
loads as priors.
"""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .geometry import UPRIGHT
from .graph import FEATURE, OBJECT, POSE, FactorGraph
from .solver import (
    FactorSelection,
    ReducedInformation,
    SolverConfig,
    global_adjust,
    reduced_information,
    solve,
)

log = logging.getLogger("obvi.ltm")

FORMAT_VERSION = 1

EQ21_SELECTION = FactorSelection(reprojection=True, odometry=False, bbox=True,
                                 shape=False, ltm=True)
FULL_SELECTION = FactorSelection(reprojection=True, odometry=False, bbox=True,
                                 shape=True, ltm=True)


class LtmError(RuntimeError):
    pass


class LtmParseError(ValueError):
    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class DensePrior:
    """Joint Gaussian over all object parameters, ordered by object id."""

    object_ids: Tuple[int, ...]
    mu: np.ndarray
    cov: np.ndarray
    mode: str

    def __post_init__(self):
        n = len(self.mu)
        cov = np.asarray(self.cov, dtype=np.float64)
        if cov.shape != (n, n):
            raise ValueError("dense prior mean/covariance dimensions disagree")
        if n == 0:
            return
        if np.max(np.abs(cov - cov.T)) > 1e-9 * max(1.0, float(np.max(np.abs(cov)))):
            raise ValueError("dense prior covariance must be symmetric")
        if np.min(np.linalg.eigvalsh(0.5 * (cov + cov.T))) < -1e-8:
            raise ValueError("dense prior covariance is not positive semi-definite")

    @property
    def block_size(self) -> int:
        return 7 if self.mode == UPRIGHT else 9

    def block(self, i: int, j: int) -> np.ndarray:
        s = self.block_size
        return self.cov[i * s:(i + 1) * s, j * s:(j + 1) * s]


@dataclass(frozen=True)
class LtmEntry:
    object_id: int
    semantic_class: str
    mu: np.ndarray
    sigma: np.ndarray
    obs_count: int


@dataclass(frozen=True)
class LongTermMap:
    session_index: int
    mode: str
    entries: Tuple[LtmEntry, ...]  # sorted by object id

    def __post_init__(self):
        ids = [e.object_id for e in self.entries]
        if ids != sorted(ids):
            object.__setattr__(
                self, "entries",
                tuple(sorted(self.entries, key=lambda e: e.object_id)),
            )
        d = 7 if self.mode == UPRIGHT else 9
        for e in self.entries:
            if e.mu.shape != (d,) or e.sigma.shape != (d, d):
                raise ValueError(
                    f"entry {e.object_id} has wrong parameter dimension for mode {self.mode}"
                )

    def __len__(self) -> int:
        return len(self.entries)

    def entry(self, object_id: int) -> LtmEntry:
        for e in self.entries:
            if e.object_id == object_id:
                return e
        raise KeyError(object_id)


# ---------------------------------------------------------------------------
# Post-session refinement
# ---------------------------------------------------------------------------


def final_refinement(graph: FactorGraph, solver_cfg: SolverConfig, assoc_cfg,
                     max_rounds: int = 8) -> List[Tuple[int, int]]:
    """Global adjustment, full-belief refinement, and object merging to fixpoint."""
    from .frontend import merge_objects

    if graph.odometry:
        global_adjust(graph, solver_cfg)
    _full_solve(graph, solver_cfg)
    all_merges: List[Tuple[int, int]] = []
    for _ in range(max_rounds):
        merges = merge_objects(
            graph, assoc_cfg,
            refine_fn=lambda g: (global_adjust(g, solver_cfg)
                                 if g.odometry else _full_solve(g, solver_cfg)),
        )
        if not merges:
            break
        all_merges.extend(merges)
        _full_solve(graph, solver_cfg)
    return all_merges


def _full_solve(graph: FactorGraph, cfg: SolverConfig):
    return solve(graph, cfg, FULL_SELECTION)


# ---------------------------------------------------------------------------
# Dense prior computation (objects' marginal)
# ---------------------------------------------------------------------------


def _eq21_free_sets(graph: FactorGraph) -> Dict[str, set]:
    """Free sets for the marginalization problem, demoting untouched variables.

    A pose or feature with no factor in the marginalization graph is
    independent of the objects and is held constant (its marginal cannot
    inform the map).
    """
    touched_pose = set()
    touched_feat = set()
    feat_counts: Dict[int, int] = {}
    for f in graph.reprojection:
        touched_pose.add(f.pose_index)
        feat_counts[f.feature_id] = feat_counts.get(f.feature_id, 0) + 1
    for f in graph.bbox:
        touched_pose.add(f.pose_index)
    for fid, n in feat_counts.items():
        if n >= 2:
            touched_feat.add(fid)
    return {
        POSE: {p for p in graph.poses
               if p in touched_pose and not graph.is_constant(POSE, p)},
        FEATURE: {f for f in graph.features
                  if f in touched_feat and not graph.is_constant(FEATURE, f)},
        OBJECT: {o for o in graph.objects if not graph.is_constant(OBJECT, o)},
    }


@dataclass(frozen=True)
class ObjectSystem:
    """Reduced object-block information with retry bookkeeping."""

    information: np.ndarray
    column_norms: np.ndarray
    labels: Tuple[str, ...]
    augmentations: Tuple[Tuple[int, float], ...] = ()  # (column, added weight)


def _object_system(info: ReducedInformation) -> ObjectSystem:
    H = info.matrix
    npc = info.n_pose_cols
    H_pp = H[:npc, :npc]
    H_po = H[:npc, npc:]
    H_oo = H[npc:, npc:]
    if npc:
        try:
            Y = np.linalg.solve(H_pp, H_po)
        except np.linalg.LinAlgError as e:
            raise LtmError(f"pose block singular during marginalization: {e}") from e
        reduced = H_oo - H_po.T @ Y
    else:
        reduced = H_oo.copy()
    reduced = 0.5 * (reduced + reduced.T)
    labels = tuple(info.column_label(npc + k) for k in range(reduced.shape[0]))
    # column norms of the marginalized system: a parameter whose information
    # is explained away by the eliminated variables must count as weak here
    # even when its full-Jacobian column is large
    norms = np.sqrt(np.maximum(np.diag(reduced), 0.0))
    return ObjectSystem(reduced, norms, labels)


def _rank_deficiency(sys: ObjectSystem, cond_threshold: float) -> int:
    if sys.information.size == 0:
        return 0
    evals = np.linalg.eigvalsh(sys.information)
    top = max(float(evals[-1]), 1e-300)
    return int(np.sum(evals < top / cond_threshold))


def covariance_retry(sys: ObjectSystem, deficiency: int) -> ObjectSystem:
    """Augment weak Jacobian columns with single-parameter priors.

    The target norm is the (deficiency+1)-th smallest column norm; every
    column below it gains a prior residual raising its norm exactly to the
    target.  The added rows are zero at the current estimate, so the optimum
    is unchanged; only the recovered covariance tightens.
    """
    if deficiency < 1:
        return sys
    norms = sys.column_norms
    order = np.argsort(norms, kind="stable")
    k = min(deficiency, len(norms) - 1)
    target = float(norms[order[k]])
    if target <= 0.0:
        target = max(float(norms.max()), 1.0) * 1e-6
    info = sys.information.copy()
    new_norms = norms.copy()
    augmented = list(sys.augmentations)
    for col in np.where(norms < target)[0]:
        w2 = target * target - norms[col] * norms[col]
        if w2 <= 0.0:
            continue
        info[col, col] += w2
        new_norms[col] = target
        augmented.append((int(col), float(np.sqrt(w2))))
        log.info("covariance retry: column %s augmented with weight %.3e",
                 sys.labels[col], np.sqrt(w2))
    return ObjectSystem(info, new_norms, sys.labels, tuple(augmented))


def compute_dense_prior(graph: FactorGraph, cfg: SolverConfig,
                        cond_threshold: float = 1e12) -> DensePrior:
    """Marginal Gaussian over objects via the marginalization belief.

    Re-optimizes over reprojection, bounding-box, and long-term-map factors
    (shape priors are re-applied every session and therefore excluded, as is
    odometry), then recovers the object-block covariance from the
    Gauss-Newton information with poses and features eliminated by Schur
    complements.  Graph estimates are restored afterwards; the map mean is
    the marginalization optimum, not the full-belief estimate.
    """
    snapshot = graph.snapshot()
    try:
        free = _eq21_free_sets(graph)
        result = solve(graph, cfg, EQ21_SELECTION, free)
        if not result.success:
            raise LtmError(f"marginalization solve failed: {result.message}")

        object_ids = tuple(sorted(o for o in graph.objects))
        mu = (np.concatenate([graph.objects[o].to_vector() for o in object_ids])
              if object_ids else np.zeros(0))

        info = reduced_information(graph, cfg, EQ21_SELECTION, free)
        if tuple(info.free_obj) != object_ids:
            # constant objects (if any) cannot receive a fresh marginal
            raise LtmError(
                "all objects must be free during map extraction; constant: "
                f"{sorted(set(object_ids) - set(info.free_obj))}"
            )
        sys = _object_system(info)
        deficiency = _rank_deficiency(sys, cond_threshold)
        if deficiency > 0:
            log.info("covariance recovery rank-deficient (n=%d); retrying", deficiency)
            sys = covariance_retry(sys, deficiency)
            still = _rank_deficiency(sys, cond_threshold)
            if still > 0:
                order = np.argsort(sys.column_norms, kind="stable")
                bad = [sys.labels[i] for i in order[:still]]
                raise LtmError(
                    f"covariance recovery failed after retry; deficient columns {bad}"
                )
        cov = np.linalg.inv(sys.information) if sys.information.size else np.zeros((0, 0))
        cov = 0.5 * (cov + cov.T)
        return DensePrior(object_ids, mu, cov, graph.mode)
    finally:
        graph.restore(snapshot)


def schur_marginal_covariance(information: np.ndarray, keep: Sequence[int]
                              ) -> np.ndarray:
    """Marginal covariance of ``keep`` indices by eliminating the rest."""
    information = np.asarray(information, dtype=np.float64)
    n = information.shape[0]
    keep = list(keep)
    elim = [i for i in range(n) if i not in set(keep)]
    H_kk = information[np.ix_(keep, keep)]
    if elim:
        H_ke = information[np.ix_(keep, elim)]
        H_ee = information[np.ix_(elim, elim)]
        H_kk = H_kk - H_ke @ np.linalg.solve(H_ee, H_ke.T)
    return np.linalg.inv(0.5 * (H_kk + H_kk.T))


# ---------------------------------------------------------------------------
# KL divergence and sparsification
# ---------------------------------------------------------------------------


def _assemble_sparse(dense: DensePrior, sparse: LongTermMap
                     ) -> Tuple[np.ndarray, np.ndarray]:
    if sparse.mode != dense.mode:
        raise ValueError("parameterization modes differ")
    s = dense.block_size
    by_id = {e.object_id: e for e in sparse.entries}
    mus = []
    blocks = []
    for oid in dense.object_ids:
        if oid not in by_id:
            raise ValueError(f"sparse map is missing object {oid}")
        mus.append(by_id[oid].mu)
        blocks.append(by_id[oid].sigma)
    n = s * len(dense.object_ids)
    mu = np.concatenate(mus) if mus else np.zeros(0)
    sigma = np.zeros((n, n))
    for i, b in enumerate(blocks):
        sigma[i * s:(i + 1) * s, i * s:(i + 1) * s] = b
    return mu, sigma


def kl_divergence(dense: DensePrior, sparse: LongTermMap) -> float:
    """KL(dense || sparse) in nats for the block-diagonal sparse topology."""
    mu_s, sigma_s = _assemble_sparse(dense, sparse)
    d = len(dense.mu)
    if d == 0:
        return 0.0
    sign_s, logdet_s = np.linalg.slogdet(sigma_s)
    sign_d, logdet_d = np.linalg.slogdet(dense.cov)
    if sign_s <= 0:
        raise ValueError("sparse covariance is singular")
    if sign_d <= 0:
        raise ValueError("dense covariance is singular")
    diff = mu_s - dense.mu
    solve_s = np.linalg.solve(sigma_s, np.column_stack([diff[:, None], dense.cov]))
    quad = float(diff @ solve_s[:, 0])
    trace = float(np.trace(solve_s[:, 1:]))
    return 0.5 * (logdet_s - logdet_d - d + quad + trace)


def sparsify(dense: DensePrior, classes: Dict[int, str],
             obs_counts: Optional[Dict[int, int]] = None,
             session_index: int = 0, spd_floor: float = 1e-9) -> LongTermMap:
    """KL-optimal independent-Gaussian map: means copied, diagonal blocks kept."""
    s = dense.block_size
    entries = []
    for i, oid in enumerate(dense.object_ids):
        block = dense.block(i, i).copy()
        block = 0.5 * (block + block.T)
        evals, evecs = np.linalg.eigh(block)
        if evals.min() < spd_floor:
            log.warning("object %d covariance block floored (min eig %.3e)",
                        oid, evals.min())
            evals = np.maximum(evals, spd_floor)
            block = evecs @ np.diag(evals) @ evecs.T
            block = 0.5 * (block + block.T)
        entries.append(
            LtmEntry(
                object_id=oid,
                semantic_class=classes[oid],
                mu=dense.mu[i * s:(i + 1) * s].copy(),
                sigma=block,
                obs_count=int((obs_counts or {}).get(oid, 0)),
            )
        )
    return LongTermMap(session_index, dense.mode, tuple(entries))


# ---------------------------------------------------------------------------
# Serialization: versioned JSON with >= 17 significant digits per number
# ---------------------------------------------------------------------------


def _fnum(x: float) -> str:
    if not np.isfinite(x):
        raise ValueError("long-term map contains non-finite values")
    return format(float(x), ".16e")


def serialize(ltm: LongTermMap) -> bytes:
    parts = [
        '{"version": %d, "session_index": %d, "mode": %s, "objects": ['
        % (FORMAT_VERSION, ltm.session_index, json.dumps(ltm.mode))
    ]
    obj_parts = []
    for e in ltm.entries:
        mu = ", ".join(_fnum(x) for x in e.mu)
        sigma = ", ".join(
            "[" + ", ".join(_fnum(x) for x in row) + "]" for row in e.sigma
        )
        obj_parts.append(
            '{"id": %d, "class": %s, "obs_count": %d, "mu": [%s], "sigma": [%s]}'
            % (e.object_id, json.dumps(e.semantic_class), e.obs_count, mu, sigma)
        )
    parts.append(", ".join(obj_parts))
    parts.append("]}")
    return "".join(parts).encode("utf-8")


def deserialize(data: bytes) -> LongTermMap:
    try:
        doc = json.loads(data.decode("utf-8"))
    except UnicodeDecodeError as e:
        raise LtmParseError("invalid encoding", e.start) from e
    except json.JSONDecodeError as e:
        raise LtmParseError(e.msg, e.pos) from e
    try:
        if doc["version"] != FORMAT_VERSION:
            raise LtmParseError(f"unsupported format version {doc['version']}")
        mode = doc["mode"]
        d = 7 if mode == UPRIGHT else 9
        entries = []
        for obj in doc["objects"]:
            mu = np.asarray(obj["mu"], dtype=np.float64)
            sigma = np.asarray(obj["sigma"], dtype=np.float64)
            if mu.shape != (d,) or sigma.shape != (d, d):
                raise LtmParseError(
                    f"object {obj.get('id')} has wrong parameter dimensions"
                )
            entries.append(
                LtmEntry(int(obj["id"]), str(obj["class"]), mu, sigma,
                         int(obj["obs_count"]))
            )
        return LongTermMap(int(doc["session_index"]), mode, tuple(entries))
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, LtmParseError):
            raise
        raise LtmParseError(f"malformed long-term map document: {e}") from e


def compressed_size(ltm: LongTermMap) -> int:
    """Bytes after a standard stream compressor (the map-size metric)."""
    return len(zlib.compress(serialize(ltm), 6))
