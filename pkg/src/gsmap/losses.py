"""Raster, vector and classification losses plus the matching cost terms.

Everything here works on plain ``(H, W)`` arrays as well as on
:class:`~gsmap.raster.DensityMask` values. Functions with a ``_grad`` suffix
return ``(value, d value / d pred)``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple

import numpy as np

from .errors import ConfigurationError, ShapeError
from .gaussian import NUM_CLASSES, MapElement
from .raster import DEFAULT_CUTOFF, DensityMask, RasterGrid, render_element, render_with_grad
from .vector import PointOrdering, best_point_ordering, vector_loss, vector_loss_grad

log = logging.getLogger(__name__)

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
LOG_CLAMP = 1e-12

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass(frozen=True)
class LossWeights:
    lambda_v: float = 1.0
    lambda_r: float = 10.0
    lambda_alpha: float = 0.8
    # None picks background/foreground pixel ratio of each GT mask, clamped to [1, 50];
    # large weights over-widen the fitted stroke, so the default stays small
    w_pos: float | None = 2.0

    def __post_init__(self):
        if not (self.lambda_v >= 0 and self.lambda_r >= 0):
            raise ConfigurationError("lambda_v and lambda_r must be >= 0")
        if not 0 <= self.lambda_alpha <= 1:
            raise ConfigurationError(f"lambda_alpha must lie in [0, 1], got {self.lambda_alpha}")
        if self.w_pos is not None and not self.w_pos >= 1:
            raise ConfigurationError(f"w_pos must be >= 1, got {self.w_pos}")


def _arr(m) -> np.ndarray:
    return m.values if isinstance(m, DensityMask) else np.asarray(m, dtype=float)


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(pred, DensityMask) and isinstance(gt, DensityMask) and pred.grid != gt.grid:
        raise ShapeError("masks live on different grids")
    a, b = _arr(pred), _arr(gt)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def auto_w_pos(gt) -> float:
    fg = int(np.count_nonzero(_arr(gt) > 0.5))
    if fg == 0:
        return 1.0
    return float(np.clip((_arr(gt).size - fg) / fg, 1.0, 50.0))


def weighted_l1(pred, gt, w_pos: float | None = None) -> float:
    return weighted_l1_grad(pred, gt, w_pos)[0]


def weighted_l1_grad(pred, gt, w_pos: float | None = None):
    """L1 error with GT-foreground pixels weighted by ``w_pos``, normalised by the weight sum."""
    a, b = _pair(pred, gt)
    if w_pos is None:
        w_pos = auto_w_pos(b)
    w = np.where(b > 0.5, w_pos, 1.0)
    total = w.sum()
    diff = a - b
    value = float(np.sum(w * np.abs(diff)) / total)
    return value, w * np.sign(diff) / total


@lru_cache(maxsize=64)
def _filter_matrix(n: int) -> np.ndarray:
    """(n, n) Gaussian smoothing with reflect (edge-excluded) borders."""
    r = SSIM_WINDOW // 2
    taps = np.exp(-((np.arange(-r, r + 1)) ** 2) / (2 * SSIM_SIGMA**2))
    taps /= taps.sum()
    mat = np.zeros((n, n))
    for i in range(n):
        for t, wt in zip(range(-r, r + 1), taps):
            mat[i, _reflect(i + t, n)] += wt
    mat.setflags(write=False)
    return mat


def _reflect(k: int, n: int) -> int:
    if n == 1:
        return 0
    period = 2 * (n - 1)
    k = k % period
    return period - k if k >= n else k


def _support_crop(a: np.ndarray, b: np.ndarray):
    nz = (a != 0) | (b != 0)
    if not nz.any():
        return None
    rows = np.flatnonzero(nz.any(axis=1))
    cols = np.flatnonzero(nz.any(axis=0))
    m = 2 * (SSIM_WINDOW // 2)
    return (
        max(rows[0] - m, 0),
        min(rows[-1] + m + 1, a.shape[0]),
        max(cols[0] - m, 0),
        min(cols[-1] + m + 1, a.shape[1]),
    )


def _ssim_map(x: np.ndarray, y: np.ndarray):
    ky = _filter_matrix(x.shape[0])
    kx = _filter_matrix(x.shape[1])

    def filt(img):
        return ky @ img @ kx.T

    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    n1 = 2 * mx * my + SSIM_C1
    n2 = 2 * sxy + SSIM_C2
    d1 = mx * mx + my * my + SSIM_C1
    d2 = sxx + syy + SSIM_C2
    s = (n1 * n2) / (d1 * d2)
    return s, (ky, kx, mx, my, n1, n2, d1, d2)


def ssim(pred, gt) -> float:
    """Mean SSIM (11x11 Gaussian window, sigma 1.5, dynamic range 1)."""
    a, b = _pair(pred, gt)
    crop = _support_crop(a, b)
    if crop is None:
        return 1.0
    r0, r1, c0, c1 = crop
    s, _ = _ssim_map(a[r0:r1, c0:c1], b[r0:r1, c0:c1])
    outside = a.size - s.size
    return float((s.sum() + outside) / a.size)


def d_ssim(pred, gt) -> float:
    return 0.5 * (1.0 - ssim(pred, gt))


def d_ssim_grad(pred, gt):
    a, b = _pair(pred, gt)
    grad = np.zeros_like(a)
    crop = _support_crop(a, b)
    if crop is None:
        return 0.0, grad
    r0, r1, c0, c1 = crop
    x, y = a[r0:r1, c0:c1], b[r0:r1, c0:c1]
    s, (ky, kx, mx, my, n1, n2, d1, d2) = _ssim_map(x, y)
    value = 0.5 * (1.0 - (s.sum() + a.size - s.size) / a.size)
    # partials of the SSIM map w.r.t. the local statistics of x
    dd = d1 * d2
    g_mx = 2 * my * n2 / dd - s * 2 * mx / d1
    g_sxx = -s / d2
    g_sxy = 2 * n1 / dd
    # sxx = E[x^2] - mx^2 and sxy = E[xy] - mx my also depend on mx
    g_m = g_mx - 2 * mx * g_sxx - my * g_sxy

    def adj(img):
        return ky.T @ img @ kx

    g = adj(g_m) + 2 * x * adj(g_sxx) + y * adj(g_sxy)
    grad[r0:r1, c0:c1] = -0.5 * g / a.size
    return value, grad


def raster_loss(pred, gt, w: LossWeights | None = None) -> float:
    return raster_loss_grad(pred, gt, w)[0]


def raster_loss_grad(pred, gt, w: LossWeights | None = None):
    w = w or LossWeights()
    alpha = w.lambda_alpha
    l1, g1 = weighted_l1_grad(pred, gt, w.w_pos)
    if alpha == 1.0:
        return l1, g1
    ds, g2 = d_ssim_grad(pred, gt)
    if alpha == 0.0:
        return ds, g2
    return alpha * l1 + (1 - alpha) * ds, alpha * g1 + (1 - alpha) * g2


def _focal_pos(p: float, alpha: float, gamma: float) -> float:
    return alpha * (1.0 - p) ** gamma * -math.log(max(p, LOG_CLAMP))


def _focal_neg(p: float, alpha: float, gamma: float) -> float:
    return (1.0 - alpha) * p**gamma * -math.log(max(1.0 - p, LOG_CLAMP))


def focal_cls_cost(scores, target_class: int, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA) -> float:
    """Focal matching cost of the target-class probability; 0 at p = 1."""
    scores = np.asarray(scores, dtype=float)
    return _focal_pos(float(scores[int(target_class)]), alpha, gamma)


def focal_loss(scores, target_class: int, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA) -> float:
    """Per-class sigmoid focal loss: positive term on the target, negative terms elsewhere."""
    scores = np.asarray(scores, dtype=float)
    if scores.shape != (NUM_CLASSES,):
        raise ShapeError(f"expected {NUM_CLASSES} class scores, got {scores.shape}")
    total = 0.0
    for c, p in enumerate(scores):
        total += _focal_pos(p, alpha, gamma) if c == int(target_class) else _focal_neg(p, alpha, gamma)
    return total


def focal_background_loss(scores, alpha: float = FOCAL_ALPHA, gamma: float = FOCAL_GAMMA) -> float:
    """Focal loss of a prediction whose target is background (all classes negative)."""
    return sum(_focal_neg(float(p), alpha, gamma) for p in np.asarray(scores, dtype=float))


def soft_iou(a, b) -> float:
    x, y = _pair(a, b)
    den = float(np.maximum(x, y).sum())
    if den == 0:
        log.warning("soft IoU of two empty masks; treating as identical")
        return 1.0
    return float(np.minimum(x, y).sum()) / den


class InstanceLoss(NamedTuple):
    total: float
    cls: float
    vector: float
    raster: float


def instance_loss(
    pred: MapElement,
    gt,
    grid: RasterGrid,
    w: LossWeights | None = None,
    ordering: PointOrdering | None = None,
    cutoff: float = DEFAULT_CUTOFF,
) -> InstanceLoss:
    return _instance(pred, gt, grid, w or LossWeights(), ordering, cutoff, grad=False)[0]


def instance_loss_grad(
    pred: MapElement,
    gt,
    grid: RasterGrid,
    w: LossWeights | None = None,
    ordering: PointOrdering | None = None,
    cutoff: float = DEFAULT_CUTOFF,
):
    """Instance loss and its (N, 5) gradient w.r.t. the element's parameters.

    The classification term has no geometric gradient.
    """
    return _instance(pred, gt, grid, w or LossWeights(), ordering, cutoff, grad=True)


def _instance(pred, gt, grid, w, ordering, cutoff, grad):
    ref = gt.points(pred.n)
    if ordering is None:
        ordering = best_point_ordering(pred, ref, pred.closed)
    cls = focal_loss(pred.scores, gt.class_id)
    vec = vector_loss(pred, ref, ordering)
    g = np.zeros((pred.n, 5))
    ras = 0.0
    if grad and w.lambda_r > 0:
        rendered, backward = render_with_grad(pred, grid, cutoff)
        ras, up = raster_loss_grad(rendered, gt.mask, w)
        g += w.lambda_r * backward(up)
    else:
        ras = raster_loss(render_element(pred, grid, cutoff), gt.mask, w)
    if grad and w.lambda_v > 0:
        g[:, :2] += w.lambda_v * vector_loss_grad(pred, ref, ordering)
    total = cls + w.lambda_v * vec + w.lambda_r * ras
    return InstanceLoss(total, cls, vec, ras), g
