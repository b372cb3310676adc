"""Instance-level bipartite matching and map-level loss assembly."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import InvalidCostError
from .gaussian import GaussianMap, MapElement
from .losses import (
    InstanceLoss,
    LossWeights,
    focal_background_loss,
    focal_cls_cost,
    instance_loss,
    instance_loss_grad,
    soft_iou,
)
from .raster import DEFAULT_CUTOFF, RasterGrid, render_element
from .vector import best_point_ordering, vector_loss

CROSS_CLASS_COST = 1e6


@dataclass(frozen=True)
class MatchResult:
    # per prediction: matched GT index or None for background
    assignment: tuple
    point_orderings: dict = field(default_factory=dict)
    total_cost: float = 0.0

    def pairs(self) -> list[tuple[int, int]]:
        return [(p, g) for p, g in enumerate(self.assignment) if g is not None]

    @property
    def matched(self) -> int:
        return sum(g is not None for g in self.assignment)


def _solve_square(cost: np.ndarray) -> np.ndarray:
    """Shortest-augmenting-path Hungarian method with potentials, O(n^3).

    Returns ``col_of_row`` for a square matrix.
    """
    n = cost.shape[0]
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    # owner[j]: row matched to column j (1-based; 0 = free); column 0 is the virtual root
    owner = np.zeros(n + 1, dtype=int)
    way = np.zeros(n + 1, dtype=int)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(n + 1, inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            cols = np.flatnonzero(free) + 1
            cur = cost[i0 - 1, cols - 1] - u[i0] - v[cols]
            better = cur < minv[cols]
            minv[cols[better]] = cur[better]
            way[cols[better]] = j0
            j1 = cols[int(np.argmin(minv[cols]))]
            delta = minv[j1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    col_of_row = np.empty(n, dtype=int)
    for j in range(1, n + 1):
        col_of_row[owner[j] - 1] = j - 1
    return col_of_row


def hungarian_assign(cost) -> MatchResult:
    """Minimum-cost one-to-one assignment of rows (predictions) to columns (GT).

    Rectangular inputs are padded to square with a constant above every real
    cost; rows left on padding columns map to background (``None``).
    """
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2:
        raise InvalidCostError(f"cost must be a matrix, got shape {cost.shape}")
    n_pred, n_gt = cost.shape
    if not np.all(np.isfinite(cost)):
        raise InvalidCostError("cost matrix contains non-finite entries")
    if n_pred == 0 or n_gt == 0:
        return MatchResult(tuple([None] * n_pred), {}, 0.0)
    k = max(n_pred, n_gt)
    pad_value = float(np.max(np.abs(cost))) + 1.0
    square = np.full((k, k), pad_value)
    square[:n_pred, :n_gt] = cost
    cols = _solve_square(square)
    assignment = []
    total = 0.0
    for r in range(n_pred):
        c = int(cols[r])
        if c < n_gt:
            assignment.append(c)
            total += cost[r, c]
        else:
            assignment.append(None)
    return MatchResult(tuple(assignment), {}, total)


def instance_cost(pred: MapElement, gt, grid: RasterGrid, cutoff: float = DEFAULT_CUTOFF,
                  rendered=None) -> float:
    """Focal class cost + per-point Manhattan cost + (1 - soft IoU of the rendered mask)."""
    ref = gt.points(pred.n)
    order = best_point_ordering(pred, ref, pred.closed)
    c_cls = focal_cls_cost(pred.scores, gt.class_id)
    c_mu = vector_loss(pred, ref, order) / pred.n
    if rendered is None:
        rendered = render_element(pred, grid, cutoff)
    c_iou = 1.0 - soft_iou(rendered, gt.mask)
    return c_cls + c_mu + c_iou


def cost_matrix(pred: GaussianMap, scene, grid: RasterGrid | None = None,
                cutoff: float = DEFAULT_CUTOFF) -> np.ndarray:
    grid = grid or scene.grid
    cost = np.full((len(pred), len(scene)), CROSS_CLASS_COST)
    renders = [render_element(e, grid, cutoff) for e in pred]
    for p, e in enumerate(pred):
        for g, gt in enumerate(scene):
            if e.class_id == gt.class_id:
                cost[p, g] = instance_cost(e, gt, grid, cutoff, rendered=renders[p])
    return cost


def match_map(pred: GaussianMap, scene, grid: RasterGrid | None = None,
              cutoff: float = DEFAULT_CUTOFF) -> MatchResult:
    """Class-gated Hungarian matching followed by per-pair point ordering."""
    cost = cost_matrix(pred, scene, grid, cutoff)
    raw = hungarian_assign(cost)
    assignment = []
    orderings = {}
    total = 0.0
    for p, g in enumerate(raw.assignment):
        if g is None or cost[p, g] >= CROSS_CLASS_COST:
            assignment.append(None)
            continue
        assignment.append(g)
        total += cost[p, g]
        e = pred[p]
        orderings[p] = best_point_ordering(e, scene[g].points(e.n), e.closed)
    return MatchResult(tuple(assignment), orderings, total)


class MapLoss(NamedTuple):
    total: float
    # InstanceLoss for matched predictions, background focal term (float) otherwise
    per_element: list
    match: MatchResult


def map_loss(pred: GaussianMap, scene, grid: RasterGrid | None = None, w: LossWeights | None = None,
             match: MatchResult | None = None, cutoff: float = DEFAULT_CUTOFF) -> MapLoss:
    return map_loss_grad(pred, scene, grid, w, match, cutoff, grad=False)[0]


def map_loss_grad(pred: GaussianMap, scene, grid: RasterGrid | None = None, w: LossWeights | None = None,
                  match: MatchResult | None = None, cutoff: float = DEFAULT_CUTOFF, grad: bool = True):
    """Summed instance losses of matched pairs plus background terms of the rest.

    Returns ``(MapLoss, grads)`` where ``grads[k]`` is the (N, 5) gradient of
    element ``k``; the assignment is held fixed.
    """
    grid = grid or scene.grid
    w = w or LossWeights()
    if match is None:
        match = match_map(pred, scene, grid, cutoff)
    total = 0.0
    per = []
    grads = []
    for p, e in enumerate(pred):
        g = match.assignment[p]
        if g is None:
            bg = focal_background_loss(e.scores)
            per.append(bg)
            total += bg
            grads.append(np.zeros((e.n, 5)))
            continue
        order = match.point_orderings.get(p)
        if grad:
            loss, gr = instance_loss_grad(e, scene[g], grid, w, order, cutoff)
            grads.append(gr)
        else:
            loss = instance_loss(e, scene[g], grid, w, order, cutoff)
        per.append(loss)
        total += loss.total
    return MapLoss(total, per, match), (grads if grad else None)


def component_sums(per_element) -> InstanceLoss:
    """Sum loss components over all predictions; background terms count as classification."""
    cls = vec = ras = tot = 0.0
    for item in per_element:
        if isinstance(item, InstanceLoss):
            tot += item.total
            cls += item.cls
            vec += item.vector
            ras += item.raster
        else:
            tot += item
            cls += item
    return InstanceLoss(tot, cls, vec, ras)

