"""Run configuration: one JSON document for fitting, loss weights, scenes and evaluation.

Every key is optional. Missing keys take the library defaults and unknown
keys are rejected with their dotted path in the message.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigurationError
from .fitting import FitConfig
from .gaussian import ClassId
from .losses import LossWeights
from .metrics import EvalConfig
from .raster import RasterGrid
from .scene import SceneSpec

SECTIONS = ("fit", "weights", "scene", "eval")


@dataclass(frozen=True)
class RunConfig:
    fit: FitConfig = field(default_factory=FitConfig)
    scene: SceneSpec = field(default_factory=SceneSpec)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def weights(self) -> LossWeights:
        return self.fit.weights

    @classmethod
    def from_dict(cls, doc) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigurationError("config must be a JSON object")
        _reject_unknown(doc, SECTIONS, "")
        weights = _build(LossWeights, doc.get("weights", {}), "weights")
        fit_doc = dict(_section(doc, "fit"))
        if "weights" in fit_doc:
            raise ConfigurationError("unknown key 'fit.weights' (loss weights live in the top-level 'weights' section)")
        fit = _build(FitConfig, fit_doc, "fit", weights=weights)
        scene_doc = dict(_section(doc, "scene"))
        grid = _build(RasterGrid, scene_doc.pop("grid", {}), "scene.grid")
        scene = _build(SceneSpec, scene_doc, "scene", grid=grid)
        ev_doc = dict(_section(doc, "eval"))
        iou = ev_doc.pop("iou_thresholds_by_class", None)
        extra = {}
        if iou is not None:
            if not isinstance(iou, dict):
                raise ConfigurationError("eval.iou_thresholds_by_class must be an object")
            merged = dict(EvalConfig().iou_thresholds_by_class)
            for k, v in iou.items():
                try:
                    cid = ClassId[k.upper()]
                except KeyError:
                    raise ConfigurationError(f"unknown key 'eval.iou_thresholds_by_class.{k}'") from None
                merged[cid] = v
            extra["iou_thresholds_by_class"] = merged
        ev = _build(EvalConfig, ev_doc, "eval", **extra)
        return cls(fit, scene, ev)

    @classmethod
    def load(cls, path) -> "RunConfig":
        """Parse a config file; a missing path raises OSError, bad content ConfigurationError."""
        text = Path(path).read_text(encoding="utf-8")
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        fit = {f.name: _plain(getattr(self.fit, f.name)) for f in dataclasses.fields(FitConfig) if f.name != "weights"}
        weights = {f.name: _plain(getattr(self.weights, f.name)) for f in dataclasses.fields(LossWeights)}
        scene = {f.name: _plain(getattr(self.scene, f.name)) for f in dataclasses.fields(SceneSpec) if f.name != "grid"}
        scene["grid"] = self.scene.grid.to_dict()
        ev = {f.name: _plain(getattr(self.eval, f.name)) for f in dataclasses.fields(EvalConfig)}
        ev["iou_thresholds_by_class"] = {
            ClassId(k).label: list(v) for k, v in self.eval.iou_thresholds_by_class.items()
        }
        return {"fit": fit, "weights": weights, "scene": scene, "eval": ev}


def _section(doc: dict, name: str) -> dict:
    value = doc.get(name, {})
    if not isinstance(value, dict):
        raise ConfigurationError(f"config section '{name}' must be an object")
    return value


def _reject_unknown(doc: dict, allowed, prefix: str) -> None:
    for key in doc:
        if key not in allowed:
            raise ConfigurationError(f"unknown key '{prefix}{key}'")


def _coerce(value, default, path: str):
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"'{path}' must be a list")
        return tuple(_number(v, path) for v in value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f"'{path}' must be true or false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"'{path}' must be an integer")
        return value
    if isinstance(default, float) or default is None:
        if value is None and default is None:
            return None
        return _number(value, path)
    return value


def _number(value, path: str) -> float:
    if isinstance(value, str) and value.lower() in ("inf", "infinity"):
        return math.inf
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigurationError(f"'{path}' must be a number")
    return float(value)


def _build(cls, doc, path: str, **fixed):
    if not isinstance(doc, dict):
        raise ConfigurationError(f"config section '{path}' must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls) if f.name not in fixed}
    _reject_unknown(doc, fields, path + ".")
    defaults = cls()
    kwargs = dict(fixed)
    for key, value in doc.items():
        default = getattr(defaults, key)
        if key == "w_pos":
            default = None
        kwargs[key] = _coerce(value, default, f"{path}.{key}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ConfigurationError(f"section '{path}': {exc}") from None


def _plain(value):
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if isinstance(value, float) and math.isinf(value):
        return "inf"
    return value
