"""Seeded synthetic BEV scenes with class-labelled GT elements and binary masks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DegenerateGeometryError, GenerationError
from .gaussian import DEFAULT_N_GAUSSIANS, ClassId
from .raster import DensityMask, RasterGrid
from .vector import Polyline, resample_uniform

DEFAULT_HALF_WIDTH = 0.45
DEFAULT_SUPERSAMPLE = 4
_MAX_TRIES = 200


@dataclass(frozen=True, eq=False)
class GroundTruthElement:
    class_id: ClassId
    vertices: Polyline
    resampled: Polyline
    mask: DensityMask
    half_width: float = DEFAULT_HALF_WIDTH

    def __post_init__(self):
        object.__setattr__(self, "class_id", ClassId.parse(self.class_id))
        vals = self.mask.values
        if not np.all((vals == 0) | (vals == 1)):
            raise ConfigurationError("GT masks must be binary")

    @property
    def closed(self) -> bool:
        return self.vertices.closed

    @property
    def n(self) -> int:
        return len(self.resampled)

    def points(self, n: int) -> np.ndarray:
        """GT vertices resampled to ``n`` points (cached copy when ``n`` matches)."""
        if n == len(self.resampled):
            return self.resampled.points
        return resample_uniform(self.vertices, n).points

    def with_n(self, n: int) -> "GroundTruthElement":
        return GroundTruthElement(
            self.class_id, self.vertices, resample_uniform(self.vertices, n), self.mask, self.half_width
        )


@dataclass(frozen=True, eq=False)
class Scene:
    grid: RasterGrid
    elements: tuple[GroundTruthElement, ...] = ()
    seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "elements", tuple(self.elements))
        for e in self.elements:
            if e.mask.grid != self.grid:
                raise ConfigurationError("GT mask grid differs from the scene grid")

    def __len__(self) -> int:
        return len(self.elements)

    def __iter__(self):
        return iter(self.elements)

    def __getitem__(self, i) -> GroundTruthElement:
        return self.elements[i]

    def with_n(self, n: int) -> "Scene":
        return Scene(self.grid, tuple(e.with_n(n) for e in self.elements), self.seed)

    def subset(self, indices) -> "Scene":
        return Scene(self.grid, tuple(self.elements[i] for i in indices), self.seed)


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    grid: RasterGrid = field(default_factory=RasterGrid)
    n_dividers: int = 1
    n_boundaries: int = 1
    n_crossings: int = 1
    # |curvature| range in 1/m; zero gives straight elements
    curvature: tuple[float, float] = (0.0, 0.05)
    divider_length: tuple[float, float] = (10.0, 25.0)
    boundary_length: tuple[float, float] = (15.0, 40.0)
    crossing_width: tuple[float, float] = (3.0, 5.0)
    crossing_length: tuple[float, float] = (8.0, 14.0)
    vertex_jitter: float = 0.0
    margin: float = 1.0
    half_width: float = DEFAULT_HALF_WIDTH
    supersample: int = DEFAULT_SUPERSAMPLE
    n_points: int = DEFAULT_N_GAUSSIANS

    def __post_init__(self):
        for name in ("n_dividers", "n_boundaries", "n_crossings"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")
        for name in ("curvature", "divider_length", "boundary_length", "crossing_width", "crossing_length"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi:
                raise ConfigurationError(f"{name} must be an increasing non-negative range")
        if self.half_width <= 0 or self.supersample < 1 or self.n_points < 2:
            raise ConfigurationError("half_width > 0, supersample >= 1 and n_points >= 2 required")
        if self.vertex_jitter < 0 or self.margin < 0:
            raise ConfigurationError("vertex_jitter and margin must be >= 0")


def generate_scene(spec: SceneSpec) -> Scene:
    rng = np.random.default_rng(spec.seed)
    grid = spec.grid
    avail = (grid.x_max - grid.x_min - 2 * spec.margin, grid.y_max - grid.y_min - 2 * spec.margin)
    if min(avail) <= 0:
        raise GenerationError("margin leaves no room inside the grid extent")
    diag = math.hypot(*avail)
    for name, count in (("divider_length", spec.n_dividers), ("boundary_length", spec.n_boundaries)):
        if count and getattr(spec, name)[0] > diag:
            raise GenerationError(f"{name} {getattr(spec, name)[0]} m exceeds the extent diagonal {diag:.1f} m")
    if spec.n_crossings and math.hypot(spec.crossing_width[0], spec.crossing_length[0]) > diag:
        raise GenerationError("pedestrian crossing larger than the grid extent")

    recipe = (
        [ClassId.DIVIDER] * spec.n_dividers
        + [ClassId.BOUNDARY] * spec.n_boundaries
        + [ClassId.PED_CROSSING] * spec.n_crossings
    )
    elements = []
    for cid in recipe:
        if cid == ClassId.PED_CROSSING:
            verts = _crossing(rng, spec, avail)
        else:
            lengths = spec.divider_length if cid == ClassId.DIVIDER else spec.boundary_length
            verts = _open_curve(rng, spec, lengths, avail)
        elements.append(make_gt_element(cid, verts, grid, spec.half_width, spec.supersample, spec.n_points))
    return Scene(grid, tuple(elements), spec.seed)


def make_gt_element(class_id, vertices: Polyline, grid: RasterGrid, half_width=DEFAULT_HALF_WIDTH,
                    supersample=DEFAULT_SUPERSAMPLE, n_points=DEFAULT_N_GAUSSIANS) -> GroundTruthElement:
    mask = gt_mask(vertices, class_id, grid, half_width, supersample)
    return GroundTruthElement(
        ClassId.parse(class_id), vertices, resample_uniform(vertices, n_points), mask, half_width
    )


def _place(rng, pts: np.ndarray, spec: SceneSpec, avail) -> np.ndarray | None:
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = hi - lo
    if span[0] > avail[0] or span[1] > avail[1]:
        return None
    g = spec.grid
    ox = rng.uniform(g.x_min + spec.margin, g.x_min + spec.margin + avail[0] - span[0])
    oy = rng.uniform(g.y_min + spec.margin, g.y_min + spec.margin + avail[1] - span[1])
    return pts - lo + np.array([ox, oy])


def _open_curve(rng, spec: SceneSpec, lengths, avail) -> Polyline:
    for _ in range(_MAX_TRIES):
        length = rng.uniform(*lengths)
        kappa = rng.uniform(*spec.curvature) * rng.choice([-1.0, 1.0])
        heading = rng.uniform(-math.pi, math.pi)
        n = max(int(math.ceil(length)), 1) + 1
        s = np.linspace(0.0, length, n)
        if abs(kappa) < 1e-9:
            local = np.column_stack([s, np.zeros_like(s)])
        else:
            local = np.column_stack([np.sin(kappa * s) / kappa, (1 - np.cos(kappa * s)) / kappa])
        c, sn = math.cos(heading), math.sin(heading)
        pts = local @ np.array([[c, sn], [-sn, c]])
        if spec.vertex_jitter > 0:
            pts = pts + rng.normal(0.0, spec.vertex_jitter, pts.shape)
        placed = _place(rng, pts, spec, avail)
        if placed is not None:
            return Polyline(placed, closed=False)
    raise GenerationError("could not place an open element inside the extent")


def _crossing(rng, spec: SceneSpec, avail) -> Polyline:
    for _ in range(_MAX_TRIES):
        w = rng.uniform(*spec.crossing_width)
        l = rng.uniform(*spec.crossing_length)
        base = np.array([[-l / 2, -w / 2], [l / 2, -w / 2], [l / 2, w / 2], [-l / 2, w / 2]])
        base = base + rng.uniform(-0.1, 0.1, base.shape) * min(w, l)
        ang = rng.uniform(-math.pi, math.pi)
        c, s = math.cos(ang), math.sin(ang)
        pts = base @ np.array([[c, s], [-s, c]])
        if not _is_convex(pts):
            continue
        placed = _place(rng, pts, spec, avail)
        if placed is not None:
            return Polyline(placed, closed=True)
    raise GenerationError("could not place a pedestrian crossing inside the extent")


def _is_convex(pts: np.ndarray) -> bool:
    d = np.diff(np.vstack([pts, pts[:2]]), axis=0)
    cross = d[:-1, 0] * d[1:, 1] - d[:-1, 1] * d[1:, 0]
    return bool(np.all(cross > 0) or np.all(cross < 0))


def _canonical_edges(loop: np.ndarray):
    a, b = loop[:-1], loop[1:]
    swap = (a[:, 0] > b[:, 0]) | ((a[:, 0] == b[:, 0]) & (a[:, 1] > b[:, 1]))
    a2 = np.where(swap[:, None], b, a)
    b2 = np.where(swap[:, None], a, b)
    return a2, b2


def _segment_distance(px, py, a, b) -> np.ndarray:
    best = np.full(px.shape, np.inf)
    for (ax, ay), (bx, by) in zip(a, b):
        ex, ey = bx - ax, by - ay
        ll = ex * ex + ey * ey
        if ll == 0:
            t = 0.0
        else:
            t = np.clip(((px - ax) * ex + (py - ay) * ey) / ll, 0.0, 1.0)
        d = np.hypot(px - (ax + t * ex), py - (ay + t * ey))
        np.minimum(best, d, out=best)
    return best


def _inside_polygon(px, py, a, b) -> np.ndarray:
    inside = np.zeros(px.shape, dtype=bool)
    for (ax, ay), (bx, by) in zip(a, b):
        if ay == by:
            continue
        crosses = (ay > py) != (by > py)
        xint = ax + (py - ay) * (bx - ax) / (by - ay)
        inside ^= crosses & (px < xint)
    return inside


def gt_mask(vertices, class_id, grid: RasterGrid, half_width: float = DEFAULT_HALF_WIDTH,
            supersample: int = DEFAULT_SUPERSAMPLE) -> DensityMask:
    """Binary mask: stroked polyline for open elements, filled polygon for closed ones.

    A pixel is foreground when at least half of its ``supersample**2``
    sub-samples fall inside the shape.
    """
    if half_width <= 0 or supersample < 1:
        raise ConfigurationError("half_width must be > 0 and supersample >= 1")
    poly = vertices if isinstance(vertices, Polyline) else Polyline(
        vertices, ClassId.parse(class_id) == ClassId.PED_CROSSING
    )
    if poly.length() <= 0:
        raise DegenerateGeometryError("zero-length GT geometry")
    loop = poly.loop()
    if poly.closed:
        x, y = loop[:, 0], loop[:, 1]
        if abs(np.dot(x[:-1], y[1:]) - np.dot(x[1:], y[:-1])) <= 0:
            raise DegenerateGeometryError("zero-area GT polygon")
    pad = 0.0 if poly.closed else half_width
    lo = loop.min(axis=0) - pad
    hi = loop.max(axis=0) + pad
    j0 = max(int(math.floor((lo[0] - grid.x_min) / grid.dx)) - 1, 0)
    j1 = min(int(math.floor((hi[0] - grid.x_min) / grid.dx)) + 1, grid.width_px - 1)
    i0 = max(int(math.floor((lo[1] - grid.y_min) / grid.dy)) - 1, 0)
    i1 = min(int(math.floor((hi[1] - grid.y_min) / grid.dy)) + 1, grid.height_px - 1)
    values = np.zeros(grid.shape)
    if j0 > j1 or i0 > i1:
        return DensityMask(grid, values)
    s = supersample
    offs = (np.arange(s) + 0.5) / s
    xs = grid.x_min + (np.arange(j0, j1 + 1)[:, None] + offs[None, :]).ravel() * grid.dx
    ys = grid.y_min + (np.arange(i0, i1 + 1)[:, None] + offs[None, :]).ravel() * grid.dy
    px, py = np.meshgrid(xs, ys)
    a, b = _canonical_edges(loop)
    if poly.closed:
        hit = _inside_polygon(px, py, a, b)
    else:
        hit = _segment_distance(px, py, a, b) <= half_width
    h, w = i1 - i0 + 1, j1 - j0 + 1
    counts = hit.reshape(h, s, w, s).sum(axis=(1, 3))
    values[i0 : i1 + 1, j0 : j1 + 1] = (2 * counts >= s * s).astype(float)
    return DensityMask(grid, values)
