"""Factor graph: variables (poses, features, objects) plus typed factors."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Set, Tuple

import numpy as np

from .geometry import UPRIGHT, CameraModel, Ellipsoid, Pose
from .factors import sqrt_info

POSE = "pose"
FEATURE = "feature"
OBJECT = "object"

VarKey = Tuple[str, int]


@dataclass
class ReprojFactor:
    factor_id: int
    pose_index: int
    feature_id: int
    camera_id: int
    pixel: np.ndarray  # (2,)
    sqrt_info: np.ndarray  # (2, 2)


@dataclass
class OdomFactor:
    factor_id: int
    from_index: int
    to_index: int
    measured: Pose
    sqrt_info: np.ndarray  # (6, 6)


@dataclass
class BBoxFactor:
    factor_id: int
    pose_index: int
    object_id: int
    camera_id: int
    box: np.ndarray  # (4,) as (u_min, u_max, v_min, v_max)
    sqrt_info: np.ndarray  # (4, 4)


@dataclass
class ShapePriorFactor:
    factor_id: int
    object_id: int
    mean_dimensions: np.ndarray  # (3,)
    sqrt_info: np.ndarray  # (3, 3)


@dataclass
class LtmPriorFactor:
    factor_id: int
    object_id: int
    mean: np.ndarray  # (7,) or (9,)
    sqrt_info: np.ndarray


class FactorGraph:
    """Mutable optimization substrate; one logical writer at a time."""

    def __init__(self, cameras: Dict[int, CameraModel], mode: str = UPRIGHT):
        self.cameras = dict(cameras)
        self.mode = mode
        self.poses: Dict[int, Pose] = {}
        self.features: Dict[int, np.ndarray] = {}
        self.objects: Dict[int, Ellipsoid] = {}
        self.object_classes: Dict[int, str] = {}
        self.reprojection: List[ReprojFactor] = []
        self.odometry: List[OdomFactor] = []
        self.bbox: List[BBoxFactor] = []
        self.shape_priors: List[ShapePriorFactor] = []
        self.ltm_priors: List[LtmPriorFactor] = []
        self.constants: Set[VarKey] = set()
        self._next_factor_id = 0

    # -- variables ----------------------------------------------------------

    def add_pose(self, index: int, estimate: Pose, constant: bool = False) -> None:
        self.poses[index] = estimate
        if constant:
            self.constants.add((POSE, index))

    def add_feature(self, feature_id: int, estimate: np.ndarray) -> None:
        self.features[feature_id] = np.asarray(estimate, dtype=np.float64).copy()

    def add_object(self, object_id: int, estimate: Ellipsoid, semantic_class: str) -> None:
        if estimate.mode != self.mode:
            raise ValueError(f"object mode {estimate.mode} does not match graph mode {self.mode}")
        self.objects[object_id] = estimate
        self.object_classes[object_id] = semantic_class

    def set_constant(self, kind: str, var_id: int, constant: bool = True) -> None:
        if constant:
            self.constants.add((kind, var_id))
        else:
            self.constants.discard((kind, var_id))

    def is_constant(self, kind: str, var_id: int) -> bool:
        return (kind, var_id) in self.constants

    # -- factors -------------------------------------------------------------

    def _fid(self) -> int:
        fid = self._next_factor_id
        self._next_factor_id += 1
        return fid

    def add_reprojection(self, pose_index: int, feature_id: int, camera_id: int,
                         pixel, covariance) -> ReprojFactor:
        self._check(POSE, pose_index)
        self._check(FEATURE, feature_id)
        f = ReprojFactor(self._fid(), pose_index, feature_id, camera_id,
                         np.asarray(pixel, dtype=np.float64).reshape(2),
                         sqrt_info(covariance))
        self.reprojection.append(f)
        return f

    def add_odometry(self, from_index: int, to_index: int, measured: Pose,
                     covariance) -> OdomFactor:
        self._check(POSE, from_index)
        self._check(POSE, to_index)
        if to_index != from_index + 1:
            raise ValueError("odometry factors connect consecutive poses")
        f = OdomFactor(self._fid(), from_index, to_index, measured, sqrt_info(covariance))
        self.odometry.append(f)
        return f

    def add_bbox(self, pose_index: int, object_id: int, camera_id: int, box,
                 covariance) -> BBoxFactor:
        self._check(POSE, pose_index)
        self._check(OBJECT, object_id)
        f = BBoxFactor(self._fid(), pose_index, object_id, camera_id,
                       np.asarray(box, dtype=np.float64).reshape(4), sqrt_info(covariance))
        self.bbox.append(f)
        return f

    def add_shape_prior(self, object_id: int, mean_dimensions, covariance) -> ShapePriorFactor:
        self._check(OBJECT, object_id)
        f = ShapePriorFactor(self._fid(), object_id,
                             np.asarray(mean_dimensions, dtype=np.float64).reshape(3),
                             sqrt_info(covariance))
        self.shape_priors.append(f)
        return f

    def add_ltm_prior(self, object_id: int, mean, covariance) -> LtmPriorFactor:
        self._check(OBJECT, object_id)
        mean = np.asarray(mean, dtype=np.float64)
        expected = self.objects[object_id].param_dim()
        if mean.shape != (expected,):
            raise ValueError(
                f"long-term map mean for object {object_id} has shape {mean.shape}, "
                f"expected ({expected},)"
            )
        f = LtmPriorFactor(self._fid(), object_id, mean, sqrt_info(covariance))
        self.ltm_priors.append(f)
        return f

    def _check(self, kind: str, var_id: int) -> None:
        table = {POSE: self.poses, FEATURE: self.features, OBJECT: self.objects}[kind]
        if var_id not in table:
            raise KeyError(f"unknown {kind} variable {var_id}")

    # -- queries -------------------------------------------------------------

    def bbox_factors_of(self, object_id: int) -> List[BBoxFactor]:
        return [f for f in self.bbox if f.object_id == object_id]

    def remove_object(self, object_id: int) -> None:
        """Drop an object variable and every factor attached to it."""
        self.objects.pop(object_id)
        self.object_classes.pop(object_id)
        self.constants.discard((OBJECT, object_id))
        self.bbox = [f for f in self.bbox if f.object_id != object_id]
        self.shape_priors = [f for f in self.shape_priors if f.object_id != object_id]
        self.ltm_priors = [f for f in self.ltm_priors if f.object_id != object_id]

    def snapshot(self) -> dict:
        return {
            "poses": dict(self.poses),
            "features": {k: v.copy() for k, v in self.features.items()},
            "objects": dict(self.objects),
        }

    def restore(self, snap: dict) -> None:
        self.poses = dict(snap["poses"])
        self.features = {k: v.copy() for k, v in snap["features"].items()}
        self.objects = dict(snap["objects"])

    def validate(self) -> None:
        for f in self.reprojection:
            self._check(POSE, f.pose_index)
            self._check(FEATURE, f.feature_id)
        for f in self.odometry:
            self._check(POSE, f.from_index)
            self._check(POSE, f.to_index)
        for f in self.bbox:
            self._check(POSE, f.pose_index)
            self._check(OBJECT, f.object_id)
        for f in self.shape_priors + self.ltm_priors:
            self._check(OBJECT, f.object_id)
        for kind, var_id in self.constants:
            self._check(kind, var_id)
