"""JSON configuration loading for scenarios and the estimator.

Every section is optional; omitted fields keep their documented defaults.
Unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

from .frontend import AssociationConfig
from .pipeline import PipelineConfig
from .simworld import CampaignConfig, ClassSpec, DEFAULT_CLASSES, NoiseModel, WorldConfig
from .solver import SolverConfig


class ConfigError(ValueError):
    pass


_NESTED = {
    "noise": NoiseModel,
    "solver": SolverConfig,
    "association": AssociationConfig,
}


def _from_dict(cls, data: Dict[str, Any], path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        f = names[key]
        if key in _NESTED and isinstance(value, dict):
            kwargs[key] = _from_dict(_NESTED[key], value, f"{path}.{key}")
        elif isinstance(value, list) and isinstance(f.default, tuple):
            kwargs[key] = tuple(value)
        elif isinstance(value, list) and f.default is dataclasses.MISSING \
                and f.default_factory is not dataclasses.MISSING \
                and isinstance(f.default_factory(), tuple):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{path}: {e}") from e


def _classes_from_dict(data: Dict[str, Any], path: str) -> Dict[str, ClassSpec]:
    out = {}
    for name, spec in data.items():
        if not isinstance(spec, dict):
            raise ConfigError(f"{path}.{name}: expected an object")
        unknown = set(spec) - {"mean_dimensions", "dim_variances", "match_radius"}
        if unknown:
            raise ConfigError(f"{path}.{name}: unknown keys {sorted(unknown)}")
        try:
            out[name] = ClassSpec(
                tuple(spec["mean_dimensions"]),
                tuple(spec["dim_variances"]),
                float(spec["match_radius"]),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"{path}.{name}: {e}") from e
    return out


def classes_to_dict(classes: Dict[str, ClassSpec]) -> Dict[str, Any]:
    return {
        name: {
            "mean_dimensions": list(spec.mean_dimensions),
            "dim_variances": list(spec.dim_variances),
            "match_radius": spec.match_radius,
        }
        for name, spec in sorted(classes.items())
    }


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int = 0
    world: WorldConfig = field(default_factory=WorldConfig)
    campaign: CampaignConfig = field(default_factory=CampaignConfig)
    classes: Dict[str, ClassSpec] = field(default_factory=lambda: dict(DEFAULT_CLASSES))


def load_config(path) -> Dict[str, Any]:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from e


def scenario_config_from_dict(doc: Dict[str, Any], path: str = "config"
                              ) -> ScenarioConfig:
    known = {"seed", "world", "campaign", "classes", "estimator"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    classes = (_classes_from_dict(doc["classes"], f"{path}.classes")
               if "classes" in doc else dict(DEFAULT_CLASSES))
    return ScenarioConfig(
        seed=int(doc.get("seed", 0)),
        world=_from_dict(WorldConfig, doc.get("world", {}), f"{path}.world"),
        campaign=_from_dict(CampaignConfig, doc.get("campaign", {}), f"{path}.campaign"),
        classes=classes,
    )


def pipeline_config_from_dict(doc: Dict[str, Any], path: str = "config"
                              ) -> PipelineConfig:
    est = doc.get("estimator", {})
    return _from_dict(PipelineConfig, est, f"{path}.estimator")


def resolved_estimator_json(cfg: PipelineConfig) -> str:
    """Canonical JSON of the resolved estimator config (hashed into manifests)."""
    def enc(obj):
        if dataclasses.is_dataclass(obj):
            return {f.name: enc(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        if isinstance(obj, tuple):
            return list(obj)
        if isinstance(obj, dict):
            return {k: enc(v) for k, v in sorted(obj.items())}
        return obj

    return json.dumps(enc(cfg), sort_keys=True)
