"""Differentiable BEV rasterization of Gaussian sequences.

An element renders to ``R(p) = 1 - prod_i (1 - G_i(p))`` sampled at pixel
centres. With a finite cutoff each Gaussian only contributes inside its
``cutoff``-sigma Mahalanobis ellipse, which bounds the per-pixel deviation from
the exact render by ``N * exp(-cutoff**2 / 2)``.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ShapeError
from .gaussian import GaussianMap, MapElement, covariance, density_terms

DEFAULT_CUTOFF = 3.5

# below this transmittance factor the exclusive product is recomputed directly
_SAFE_FACTOR = 1e-12


@functools.lru_cache(maxsize=64)
def _centres(lo: float, step: float, n: int) -> np.ndarray:
    out = lo + (np.arange(n) + 0.5) * step
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class RasterGrid:
    """Pixel grid over a metric extent. Row ``i`` runs along y, column ``j`` along x."""

    width_px: int = 200
    height_px: int = 100
    x_min: float = -30.0
    x_max: float = 30.0
    y_min: float = -15.0
    y_max: float = 15.0

    def __post_init__(self):
        if int(self.width_px) != self.width_px or int(self.height_px) != self.height_px:
            raise ConfigurationError("grid dimensions must be integers")
        if self.width_px < 1 or self.height_px < 1:
            raise ConfigurationError(f"grid must be at least 1x1, got {self.width_px}x{self.height_px}")
        vals = (self.x_min, self.x_max, self.y_min, self.y_max)
        if not all(math.isfinite(v) for v in vals):
            raise ConfigurationError("grid extent must be finite")
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ConfigurationError(f"empty grid extent {vals}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height_px, self.width_px)

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / self.width_px

    @property
    def dy(self) -> float:
        return (self.y_max - self.y_min) / self.height_px

    @property
    def xs(self) -> np.ndarray:
        return _centres(self.x_min, self.dx, self.width_px)

    @property
    def ys(self) -> np.ndarray:
        return _centres(self.y_min, self.dy, self.height_px)

    def pixel_center(self, i: int, j: int) -> tuple[float, float]:
        return (self.x_min + (j + 0.5) * self.dx, self.y_min + (i + 0.5) * self.dy)

    def pixel_index(self, x: float, y: float) -> tuple[int, int]:
        """Row/column of the pixel containing ``(x, y)``."""
        j = int(math.floor((x - self.x_min) / self.dx))
        i = int(math.floor((y - self.y_min) / self.dy))
        return i, j

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        return np.meshgrid(self.xs, self.ys)

    def to_dict(self) -> dict:
        return {
            "width_px": self.width_px,
            "height_px": self.height_px,
            "x_min": self.x_min,
            "x_max": self.x_max,
            "y_min": self.y_min,
            "y_max": self.y_max,
        }


@dataclass(frozen=True, eq=False)
class DensityMask:
    grid: RasterGrid
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.shape != self.grid.shape:
            raise ShapeError(f"mask shape {values.shape} does not match grid {self.grid.shape}")
        if np.any(values < 0) or np.any(values > 1) or not np.all(np.isfinite(values)):
            raise ConfigurationError("mask values must lie in [0, 1]")
        object.__setattr__(self, "values", values)

    def binarize(self, threshold: float = 0.5) -> np.ndarray:
        return self.values >= threshold


def _check_cutoff(cutoff: float) -> float:
    cutoff = float(cutoff)
    if not cutoff > 0:
        raise ConfigurationError(f"cutoff must be positive or inf, got {cutoff}")
    return cutoff


def _spans(params: np.ndarray, grid: RasterGrid, cutoff: float):
    """Flat (gaussian, pixel) pairs whose pixel centre may lie inside the cutoff ellipse.

    Pairs are ordered Gaussian-major, which fixes the accumulation order. Each
    row span is padded by one pixel; the exact ellipse test is applied later.
    """
    h, w = grid.shape
    k = params.shape[0]
    if math.isinf(cutoff):
        gid = np.repeat(np.arange(k), h * w)
        pix = np.tile(np.arange(h * w), k)
        return gid, pix
    mx, my, sx, sy, th = params.T
    c, s = np.cos(th), np.sin(th)
    sx2, sy2 = sx * sx, sy * sy
    # inverse covariance entries
    ia = c * c / sx2 + s * s / sy2
    ib = c * s * (1.0 / sx2 - 1.0 / sy2)
    ic = s * s / sx2 + c * c / sy2
    ey = cutoff * np.sqrt(s * s * sx2 + c * c * sy2)
    i0 = np.maximum(np.ceil((my - ey - grid.y_min) / grid.dy - 0.5) - 1, 0).astype(np.int64)
    i1 = np.minimum(np.floor((my + ey - grid.y_min) / grid.dy - 0.5) + 1, h - 1).astype(np.int64)
    nrows = np.maximum(i1 - i0 + 1, 0)
    g_rows = np.repeat(np.arange(k), nrows)
    starts = np.cumsum(nrows) - nrows
    rows = i0[g_rows] + (np.arange(g_rows.size) - np.repeat(starts, nrows))
    dy = grid.y_min + (rows + 0.5) * grid.dy - my[g_rows]
    a, b = ia[g_rows], ib[g_rows]
    # a dx^2 + 2 b dy dx + (ic dy^2 - cutoff^2) <= 0
    disc = (b * b - a * ic[g_rows]) * dy * dy + a * cutoff * cutoff
    root = np.sqrt(np.maximum(disc, 0.0))
    x_lo = mx[g_rows] + (-b * dy - root) / a
    x_hi = mx[g_rows] + (-b * dy + root) / a
    j0 = np.maximum(np.ceil((x_lo - grid.x_min) / grid.dx - 0.5) - 1, 0).astype(np.int64)
    j1 = np.minimum(np.floor((x_hi - grid.x_min) / grid.dx - 0.5) + 1, w - 1).astype(np.int64)
    ncols = np.where(disc >= 0, np.maximum(j1 - j0 + 1, 0), 0)
    total = int(ncols.sum())
    owner = np.repeat(np.arange(rows.size), ncols)
    cstarts = np.cumsum(ncols) - ncols
    cols = j0[owner] + (np.arange(total) - cstarts[owner])
    return g_rows[owner], rows[owner] * w + cols


@dataclass
class _Pass:
    """Per-pair densities (and partials) of one element, plus its transmittance."""

    gid: np.ndarray
    pix: np.ndarray
    dens: np.ndarray
    partials: np.ndarray | None
    trans: np.ndarray  # flat, length H*W


def _raster_pass(params: np.ndarray, grid: RasterGrid, cutoff: float, grad: bool) -> _Pass:
    params = np.asarray(params, dtype=float)
    gid, pix = _spans(params, grid, cutoff)
    xs, ys = grid.xs, grid.ys
    w = grid.width_px
    x = xs[pix % w]
    y = ys[pix // w]
    cols = [params[gid, i] for i in range(5)]
    dens, maha, partials = density_terms(*cols, x, y, grad=grad)
    if not math.isinf(cutoff):
        inside = maha <= cutoff * cutoff
        keep = np.flatnonzero(inside)
        gid, pix, dens = gid[keep], pix[keep], dens[keep]
        if partials is not None:
            partials = tuple(p[keep] for p in partials)
    trans = np.ones(grid.height_px * w)
    # unbuffered and sequential: each pixel's product runs in Gaussian order
    np.multiply.at(trans, pix, 1.0 - dens)
    return _Pass(gid, pix, dens, None if partials is None else np.stack(partials), trans)


def transmittance(params: np.ndarray, grid: RasterGrid, cutoff: float = DEFAULT_CUTOFF) -> np.ndarray:
    """``prod_i (1 - G_i)`` per pixel, accumulated in element order."""
    cutoff = _check_cutoff(cutoff)
    return _raster_pass(params, grid, cutoff, grad=False).trans.reshape(grid.shape)


def render_element(e: MapElement, grid: RasterGrid, cutoff_sigmas: float = DEFAULT_CUTOFF) -> DensityMask:
    """Occupancy mask of one element sampled at pixel centres."""
    return DensityMask(grid, 1.0 - transmittance(e.params, grid, cutoff_sigmas))


def render_map(m: GaussianMap, grid: RasterGrid, cutoff_sigmas: float = DEFAULT_CUTOFF) -> list[DensityMask]:
    return [render_element(e, grid, cutoff_sigmas) for e in m]


def render_backward(
    e: MapElement,
    grid: RasterGrid,
    upstream: np.ndarray,
    cutoff_sigmas: float = DEFAULT_CUTOFF,
) -> np.ndarray:
    """Gradient of ``sum(upstream * R)`` w.r.t. every Gaussian's 5 parameters.

    Returns an (N, 5) array.
    """
    return render_with_grad(e, grid, cutoff_sigmas)[1](upstream)


def render_with_grad(e: MapElement, grid: RasterGrid, cutoff_sigmas: float = DEFAULT_CUTOFF):
    """Render once and return ``(mask, backward)``.

    ``backward(upstream)`` maps an upstream gradient over pixels to the (N, 5)
    parameter gradient, reusing the forward densities.
    """
    cutoff = _check_cutoff(cutoff_sigmas)
    params = e.params
    fp = _raster_pass(params, grid, cutoff, grad=True)
    mask = DensityMask(grid, 1.0 - fp.trans.reshape(grid.shape))
    n = params.shape[0]

    def backward(upstream) -> np.ndarray:
        upstream = np.asarray(upstream, dtype=float)
        if upstream.shape != grid.shape:
            raise ShapeError(f"upstream shape {upstream.shape} does not match grid {grid.shape}")
        factor = 1.0 - fp.dens
        tight = factor < _SAFE_FACTOR
        others = fp.trans[fp.pix] / np.where(tight, 1.0, factor)
        if tight.any():
            idx = np.flatnonzero(tight)
            others[idx] = _exclusive_product(fp, idx)
        # dL/dR * dR/dG_k with dR/dG_k = prod_{m != k} (1 - G_m)
        weight = upstream.ravel()[fp.pix] * others
        out = np.empty((n, 5))
        for c in range(5):
            out[:, c] = np.bincount(fp.gid, weights=fp.partials[c] * weight, minlength=n)
        return out

    return mask, backward


def _exclusive_product(fp: _Pass, idx: np.ndarray) -> np.ndarray:
    """Product of ``1 - G_m`` over every other Gaussian at the pairs ``idx``."""
    out = np.empty(idx.size)
    for t, q in enumerate(idx):
        same = np.flatnonzero(fp.pix == fp.pix[q])
        same = same[same != q]
        out[t] = np.prod(1.0 - fp.dens[same])
    return out


def render_oracle(e: MapElement, grid: RasterGrid) -> DensityMask:
    """Reference render: no culling, log-space accumulation, explicit covariance inverse."""
    xx, yy = grid.centers()
    log_t = np.zeros(grid.shape)
    for g in e.gaussians:
        cov = covariance(g)
        a, b, c = cov[0, 0], cov[0, 1], cov[1, 1]
        det = a * c - b * b
        dx = xx - g.mu_x
        dy = yy - g.mu_y
        maha = (c * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det
        with np.errstate(divide="ignore"):
            log_t += np.log1p(-np.exp(-0.5 * maha))
    return DensityMask(grid, -np.expm1(log_t))
