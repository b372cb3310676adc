"""Gradient-based fitting of Gaussian maps to GT scenes.

Stands in for a learned decoder: the Gaussian parameters of every element are
optimized directly against the joint objective (focal classification, Manhattan
vector loss, raster loss) with an Adam-style optimizer.
"""

from __future__ import annotations

import dataclasses
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DivergenceError, ShapeError
from .gaussian import DEFAULT_N_GAUSSIANS, GaussianMap, MapElement, one_hot_scores, wrap_theta
from .losses import InstanceLoss, LossWeights
from .matching import component_sums, map_loss_grad, match_map
from .metrics import EvalConfig, ap_chamfer, ap_raster, hard_iou
from .raster import DEFAULT_CUTOFF, RasterGrid, render_element
from .vector import chamfer_distance, vectorize

INIT_SIGMA = (0.5, 0.15)
LR_SCHEDULES = ("cosine", "constant")


@dataclass(frozen=True)
class FitConfig:
    iterations: int = 2000
    lr_mu: float = 0.05
    lr_log_sigma: float = 0.02
    lr_theta: float = 0.02
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    sigma_floor: float = 0.05
    rematch_every: int = 50
    seed: int = 0
    noise_sigma: float = 0.5
    n_gaussians: int = DEFAULT_N_GAUSSIANS
    cutoff: float = DEFAULT_CUTOFF
    # "cosine" anneals every learning rate to zero over the run; "constant" keeps them fixed
    lr_schedule: str = "cosine"
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigurationError(f"lr_schedule must be one of {LR_SCHEDULES}, got {self.lr_schedule!r}")
        if min(self.lr_mu, self.lr_log_sigma, self.lr_theta) <= 0:
            raise ConfigurationError("learning rates must be > 0")
        if self.sigma_floor <= 0:
            raise ConfigurationError("sigma_floor must be > 0")
        if self.iterations < 0 or self.rematch_every < 1:
            raise ConfigurationError("iterations >= 0 and rematch_every >= 1 required")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ConfigurationError("invalid Adam constants")
        if self.noise_sigma < 0 or self.n_gaussians < 2:
            raise ConfigurationError("noise_sigma >= 0 and n_gaussians >= 2 required")

    def replace(self, **kw) -> "FitConfig":
        return dataclasses.replace(self, **kw)


class Adam:
    """Adam with one learning rate per named parameter group."""

    def __init__(self, lrs: dict[str, float], beta1=0.9, beta2=0.999, eps=1e-8):
        self.lrs = dict(lrs)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], scale: float = 1.0) -> None:
        """One update; ``scale`` multiplies every group's learning rate."""
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * (g * g)
            params[k] -= scale * self.lrs[k] * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)


def _tangent_angles(pts: np.ndarray, closed: bool) -> np.ndarray:
    if closed:
        d = np.roll(pts, -1, axis=0) - np.roll(pts, 1, axis=0)
    else:
        d = np.gradient(pts, axis=0)
    return wrap_theta(np.arctan2(d[:, 1], d[:, 0]))


def init_elements(scene, noise_sigma: float = 0.5, rng=None, n: int = DEFAULT_N_GAUSSIANS) -> GaussianMap:
    """One element per GT element: noisy resampled centres, tangent-aligned Gaussians."""
    if noise_sigma < 0:
        raise ConfigurationError("noise_sigma must be >= 0")
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    elements = []
    for gt in scene:
        pts = gt.points(n)
        theta = _tangent_angles(pts, gt.closed)
        centers = pts + rng.normal(0.0, 1.0, pts.shape) * noise_sigma
        params = np.column_stack(
            [centers, np.full(n, INIT_SIGMA[0]), np.full(n, INIT_SIGMA[1]), theta]
        )
        elements.append(MapElement(params, gt.class_id, gt.closed, one_hot_scores(gt.class_id)))
    return GaussianMap(tuple(elements))


@dataclass
class FitReport:
    trajectory: dict
    initial_total: float
    final: dict
    best_iteration: int
    converged_iteration: int
    iterations: int
    wall_time: float = 0.0

    def to_dict(self, include_timing: bool = False) -> dict:
        out = {
            "iterations": self.iterations,
            "initial_total": self.initial_total,
            "best_iteration": self.best_iteration,
            "converged_iteration": self.converged_iteration,
            "final": self.final,
            "trajectory": self.trajectory,
        }
        if include_timing:
            out["wall_time"] = self.wall_time
        return out


def _unpack(m: GaussianMap):
    ns = {e.n for e in m}
    if len(ns) > 1:
        raise ShapeError(f"all elements must have the same Gaussian count, got {sorted(ns)}")
    if len(m) == 0:
        return {"mu": np.zeros((0, 0, 2)), "log_sigma": np.zeros((0, 0, 2)), "theta": np.zeros((0, 0))}
    stack = np.stack([e.params for e in m])
    return {
        "mu": stack[..., 0:2].copy(),
        "log_sigma": np.log(stack[..., 2:4]),
        "theta": stack[..., 4].copy(),
    }


def _pack(state, template: GaussianMap) -> GaussianMap:
    elements = []
    for k, e in enumerate(template):
        params = np.column_stack([state["mu"][k], np.exp(state["log_sigma"][k]), state["theta"][k]])
        elements.append(e.replace(params))
    return GaussianMap(tuple(elements), template.max_instances)


def element_metrics(m: GaussianMap, scene, match, grid: RasterGrid, cutoff: float = DEFAULT_CUTOFF,
                    samples: int = 100, binarize_at: float = 0.5) -> list[dict]:
    rows = []
    for p, e in enumerate(m):
        g = match.assignment[p]
        if g is None:
            rows.append({"class": e.class_id.label, "gt_index": None, "chamfer": None, "hard_iou": None})
            continue
        gt = scene[g]
        mask = render_element(e, grid, cutoff).binarize(binarize_at)
        rows.append({
            "class": e.class_id.label,
            "gt_index": g,
            "chamfer": chamfer_distance(vectorize(e), gt.vertices, samples),
            "hard_iou": hard_iou(mask, gt.mask.values > 0.5),
        })
    return rows


def _components(per) -> InstanceLoss:
    return component_sums(per)


def lr_scale(cfg: FitConfig, it: int) -> float:
    if cfg.lr_schedule == "constant" or cfg.iterations == 0:
        return 1.0
    return 0.5 * (1.0 + math.cos(math.pi * it / cfg.iterations))


def fit(map0: GaussianMap, scene, grid: RasterGrid | None = None, cfg: FitConfig | None = None,
        callback=None):
    """Optimize every element's (mu, log sigma, theta) against ``scene``.

    Matching is recomputed every ``cfg.rematch_every`` iterations and frozen in
    between. ``callback(it, current_map)`` runs after every step. Returns the
    lowest-loss iterate and a :class:`FitReport`.
    """
    cfg = cfg or FitConfig()
    grid = grid or scene.grid
    t0 = time.perf_counter()
    state = _unpack(map0)
    current = map0
    log_floor = math.log(cfg.sigma_floor)
    adam = Adam(
        {"mu": cfg.lr_mu, "log_sigma": cfg.lr_log_sigma, "theta": cfg.lr_theta},
        cfg.beta1, cfg.beta2, cfg.eps,
    )
    traj = {"total": [], "cls": [], "vector": [], "raster": []}
    match = None
    best = (math.inf, -1, map0, None)

    def evaluate(m, it, match):
        loss, grads = map_loss_grad(m, scene, grid, cfg.weights, match, cfg.cutoff)
        if not math.isfinite(loss.total) or not all(np.all(np.isfinite(g)) for g in grads):
            raise DivergenceError(it)
        return loss, grads

    for it in range(cfg.iterations + 1):
        if match is None or (it % cfg.rematch_every == 0 and it < cfg.iterations):
            match = match_map(current, scene, grid, cfg.cutoff)
        loss, grads = evaluate(current, it, match)
        if loss.total < best[0]:
            best = (loss.total, it, current, match)
        if it == cfg.iterations:
            break
        comp = _components(loss.per_element)
        traj["total"].append(loss.total)
        traj["cls"].append(comp.cls)
        traj["vector"].append(comp.vector)
        traj["raster"].append(comp.raster)
        if len(current) == 0:
            continue
        g = np.stack(grads)
        sigma = np.exp(state["log_sigma"])
        adam.step(state, {"mu": g[..., 0:2], "log_sigma": g[..., 2:4] * sigma, "theta": g[..., 4]},
                  lr_scale(cfg, it))
        np.maximum(state["log_sigma"], log_floor, out=state["log_sigma"])
        state["theta"] = wrap_theta(state["theta"])
        with np.errstate(over="ignore"):
            finite = np.all(np.isfinite(state["mu"])) and np.all(np.isfinite(np.exp(state["log_sigma"])))
        if not finite or not np.all(np.isfinite(state["theta"])):
            raise DivergenceError(it + 1, "non-finite Gaussian parameters after the optimizer step")
        current = _pack(state, map0)
        if callback is not None:
            callback(it + 1, current)

    best_total, best_it, best_map, best_match = best
    final_loss = map_loss_grad(best_map, scene, grid, cfg.weights, best_match, cfg.cutoff, grad=False)[0]
    comp = _components(final_loss.per_element)
    rows = element_metrics(best_map, scene, best_match, grid, cfg.cutoff)
    matched = [r for r in rows if r["gt_index"] is not None]
    initial_total = traj["total"][0] if traj["total"] else final_loss.total
    final = {
        "total": final_loss.total,
        "cls": comp.cls,
        "vector": comp.vector,
        "raster": comp.raster,
        "assignment": list(best_match.assignment),
        "per_element": rows,
        "chamfer": float(np.mean([r["chamfer"] for r in matched])) if matched else None,
        "hard_iou": float(np.mean([r["hard_iou"] for r in matched])) if matched else None,
    }
    report = FitReport(
        trajectory=traj,
        initial_total=initial_total,
        final=final,
        best_iteration=best_it,
        converged_iteration=_converged_at(traj["total"], final_loss.total),
        iterations=cfg.iterations,
        wall_time=time.perf_counter() - t0,
    )
    return best_map, report


def _converged_at(totals, final: float, frac: float = 0.01) -> int:
    """First iteration whose loss is within ``frac`` of the total improvement from the end value."""
    if not totals:
        return 0
    gap = max(totals[0] - final, 0.0)
    target = final + frac * gap
    for i, v in enumerate(totals):
        if v <= target:
            return i
    return len(totals)


def fit_scene(scene, cfg: FitConfig | None = None, seed: int | None = None):
    """Initialise from GT with ``cfg.noise_sigma`` noise and fit; returns (map, report)."""
    cfg = cfg or FitConfig()
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    map0 = init_elements(scene, cfg.noise_sigma, rng, cfg.n_gaussians)
    return fit(map0, scene.with_n(cfg.n_gaussians), scene.grid, cfg)


def worker_count() -> int:
    """Worker cap from ``GSMAP_THREADS`` (0 or unset = one per CPU)."""
    raw = os.environ.get("GSMAP_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise ConfigurationError(f"GSMAP_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ConfigurationError("GSMAP_THREADS must be >= 0")
    return n or (os.cpu_count() or 1)


def _fit_job(args):
    scene, cfg, seed = args
    return fit_scene(scene, cfg, seed)


def fit_many(scenes, cfg: FitConfig, seeds=None):
    seeds = list(seeds) if seeds is not None else [cfg.seed + k for k in range(len(scenes))]
    jobs = list(zip(scenes, [cfg] * len(scenes), seeds))
    workers = min(worker_count(), len(jobs))
    if workers <= 1:
        return [_fit_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_fit_job, jobs))


SWEEP_PARAMS = ("lambda_r", "n_gaussians")


def sweep(param: str, values, scenes, cfg: FitConfig | None = None, eval_cfg: EvalConfig | None = None):
    """Fit every scene once per value of ``param``; one result row per value."""
    if param not in SWEEP_PARAMS:
        raise ConfigurationError(f"unknown sweep parameter {param!r}; expected one of {SWEEP_PARAMS}")
    cfg = cfg or FitConfig()
    rows = []
    for value in values:
        if param == "lambda_r":
            run_cfg = cfg.replace(weights=dataclasses.replace(cfg.weights, lambda_r=float(value)))
        else:
            run_cfg = cfg.replace(n_gaussians=int(value))
        results = fit_many(scenes, run_cfg)
        maps = [m for m, _ in results]
        reports = [r for _, r in results]
        gts = [s.with_n(run_cfg.n_gaussians) for s in scenes]
        chamfers = [r.final["chamfer"] for r in reports if r.final["chamfer"] is not None]
        ious = [r.final["hard_iou"] for r in reports if r.final["hard_iou"] is not None]
        rows.append({
            "param": param,
            "value": value,
            "ap_chamfer": ap_chamfer(maps, gts, eval_cfg)["mean"],
            "ap_raster": ap_raster(maps, gts, eval_cfg)["mean"],
            "mean_chamfer": float(np.mean(chamfers)) if chamfers else None,
            "mean_hard_iou": float(np.mean(ious)) if ious else None,
        })
    return rows
