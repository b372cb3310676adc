"""Chamfer-based and rasterized-IoU-based average precision."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigurationError
from .gaussian import ClassId, GaussianMap
from .raster import DEFAULT_CUTOFF, render_element
from .vector import DEFAULT_CHAMFER_SAMPLES, Polyline, chamfer_distance, vectorize


def _steps(lo: float, hi: float) -> tuple[float, ...]:
    n = int(round((hi - lo) / 0.05)) + 1
    return tuple(round(lo + 0.05 * k, 10) for k in range(n))


def _default_iou_thresholds() -> dict:
    return {
        ClassId.PED_CROSSING: _steps(0.50, 0.75),
        ClassId.DIVIDER: _steps(0.25, 0.50),
        ClassId.BOUNDARY: _steps(0.25, 0.50),
    }


@dataclass(frozen=True)
class EvalConfig:
    chamfer_thresholds: tuple[float, ...] = (0.5, 1.0, 1.5)
    iou_thresholds_by_class: dict = field(default_factory=_default_iou_thresholds)
    binarize_at: float = 0.5
    chamfer_samples: int = DEFAULT_CHAMFER_SAMPLES
    cutoff: float = DEFAULT_CUTOFF

    def __post_init__(self):
        # classes left out keep their default thresholds
        iou = _default_iou_thresholds()
        iou.update({ClassId.parse(k): tuple(float(t) for t in v) for k, v in self.iou_thresholds_by_class.items()})
        object.__setattr__(self, "iou_thresholds_by_class", iou)
        object.__setattr__(self, "chamfer_thresholds", tuple(float(t) for t in self.chamfer_thresholds))
        for name, ts in [("chamfer_thresholds", self.chamfer_thresholds)] + [
            (f"iou_thresholds[{k.label}]", v) for k, v in iou.items()
        ]:
            if len(ts) == 0 or any(b <= a for a, b in zip(ts, ts[1:])):
                raise ConfigurationError(f"{name} must be non-empty and strictly increasing")
        if not 0 < self.binarize_at < 1:
            raise ConfigurationError(f"binarize_at must lie in (0, 1), got {self.binarize_at}")
        if self.chamfer_samples < 2:
            raise ConfigurationError("chamfer_samples must be >= 2")


@dataclass(frozen=True, eq=False)
class Detection:
    """A scored prediction as seen by the metrics: polyline plus binary mask."""

    class_id: ClassId
    score: float
    polyline: Polyline
    mask: np.ndarray | None = None


def detections_from_map(m: GaussianMap, grid, cfg: EvalConfig | None = None, with_masks: bool = True):
    cfg = cfg or EvalConfig()
    out = []
    for e in m:
        mask = render_element(e, grid, cfg.cutoff).binarize(cfg.binarize_at) if with_masks else None
        out.append(Detection(e.class_id, e.score, vectorize(e), mask))
    return out


def detections_from_scene(scene, score: float = 1.0):
    """Treat GT elements as predictions (masks taken verbatim)."""
    return [Detection(g.class_id, score, g.vertices, g.mask.values > 0.5) for g in scene]


def hard_iou(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def average_precision(tp: Sequence[bool], n_gt: int) -> float:
    """Area under the precision envelope of a ranked TP/FP list (all-point)."""
    if n_gt <= 0:
        raise ValueError("AP is undefined without ground truth")
    tp = np.asarray(tp, dtype=bool)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, tp.size + 1)
    # precision envelope: best precision at any recall >= current
    env = np.maximum.accumulate(precision[::-1])[::-1]
    r_prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - r_prev) * env))


def _as_detections(preds, gts, cfg, with_masks):
    out = []
    for p, scene in zip(preds, gts):
        if isinstance(p, GaussianMap):
            out.append(detections_from_map(p, scene.grid, cfg, with_masks))
        else:
            out.append(list(p))
    return out


def _evaluate(preds, gts, cfg: EvalConfig, kind: str):
    if len(preds) != len(gts):
        raise ConfigurationError(f"{len(preds)} prediction sets for {len(gts)} scenes")
    dets = _as_detections(preds, gts, cfg, with_masks=(kind == "raster"))
    per_class = {}
    for cid in ClassId:
        n_gt = sum(1 for s in gts for g in s if g.class_id == cid)
        thresholds = cfg.chamfer_thresholds if kind == "chamfer" else cfg.iou_thresholds_by_class[cid]
        if n_gt == 0:
            per_class[cid.label] = None
            continue
        # (score, scene, det index) ranked by descending score; stable on input order
        ranked = []
        scores_to_gt = []
        for s, (scene_dets, scene) in enumerate(zip(dets, gts)):
            gt_idx = [k for k, g in enumerate(scene) if g.class_id == cid]
            for d in scene_dets:
                if d.class_id != cid:
                    continue
                if kind == "chamfer":
                    vals = [chamfer_distance(d.polyline, scene[k].vertices, cfg.chamfer_samples) for k in gt_idx]
                else:
                    vals = [hard_iou(d.mask, scene[k].mask.values > 0.5) for k in gt_idx]
                ranked.append((d.score, s))
                scores_to_gt.append((gt_idx, vals))
        order = sorted(range(len(ranked)), key=lambda i: -ranked[i][0])
        by_t = {}
        for t in thresholds:
            covered = set()
            flags = []
            for i in order:
                s = ranked[i][1]
                gt_idx, vals = scores_to_gt[i]
                if not gt_idx:
                    flags.append(False)
                    continue
                if kind == "chamfer":
                    b = int(np.argmin(vals))
                    ok = vals[b] < t
                else:
                    b = int(np.argmax(vals))
                    ok = vals[b] > t
                key = (s, gt_idx[b])
                if ok and key not in covered:
                    covered.add(key)
                    flags.append(True)
                else:
                    flags.append(False)
            by_t[t] = average_precision(flags, n_gt)
        per_class[cid.label] = {"per_threshold": by_t, "ap": float(np.mean(list(by_t.values())))}
    present = [v["ap"] for v in per_class.values() if v is not None]
    return {"per_class": per_class, "mean": float(np.mean(present)) if present else None}


def ap_chamfer(preds, gts, cfg: EvalConfig | None = None) -> dict:
    """Per-class AP with TP iff Chamfer distance < threshold, averaged over thresholds.

    ``preds`` holds one entry per scene: a :class:`GaussianMap` or a list of
    :class:`Detection`. Classes without GT are reported as ``None``.
    """
    return _evaluate(preds, gts, cfg or EvalConfig(), "chamfer")


def ap_raster(preds, gts, cfg: EvalConfig | None = None) -> dict:
    """Per-class AP with TP iff hard IoU of binarized masks > threshold."""
    return _evaluate(preds, gts, cfg or EvalConfig(), "raster")


def evaluate(preds, gts, cfg: EvalConfig | None = None) -> dict:
    cfg = cfg or EvalConfig()
    return {"ap_chamfer": ap_chamfer(preds, gts, cfg), "ap_raster": ap_raster(preds, gts, cfg)}


def report_to_json(report: dict) -> dict:
    """Stringify threshold keys so the report serialises as JSON."""

    def conv(x):
        if isinstance(x, dict):
            return {(repr(k) if isinstance(k, float) else str(k)): conv(v) for k, v in x.items()}
        return x

    return conv(report)
