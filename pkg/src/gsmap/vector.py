"""Polylines, arc-length resampling, Chamfer distance and point-level ordering."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometryError, ShapeError
from .gaussian import MapElement

DEFAULT_CHAMFER_SAMPLES = 100


@dataclass(frozen=True, eq=False)
class Polyline:
    points: np.ndarray
    closed: bool = False

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ShapeError(f"polyline points must be (n, 2), got {pts.shape}")
        if pts.shape[0] < 2:
            raise ShapeError("a polyline needs at least 2 points")
        if not np.all(np.isfinite(pts)):
            raise DegenerateGeometryError("non-finite polyline vertex")
        if self.closed and np.array_equal(pts[0], pts[-1]):
            raise DegenerateGeometryError("closed polylines must not repeat the first vertex")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self) -> int:
        return self.points.shape[0]

    def loop(self) -> np.ndarray:
        """Vertices with the closing vertex appended for closed polylines."""
        return np.vstack([self.points, self.points[:1]]) if self.closed else self.points

    def length(self) -> float:
        return float(np.sum(np.hypot(*np.diff(self.loop(), axis=0).T)))

    def reversed(self) -> "Polyline":
        return Polyline(self.points[::-1], self.closed)

    def __eq__(self, other):
        if not isinstance(other, Polyline):
            return NotImplemented
        return self.closed == other.closed and np.array_equal(self.points, other.points)


def vectorize(e: MapElement) -> Polyline:
    """Gaussian centres in element order; topology copied from the element."""
    return Polyline(e.centers, e.closed)


def resample_uniform(p: Polyline, n: int) -> Polyline:
    """``n`` points at equal arc-length spacing along ``p``.

    Open polylines keep both endpoints; closed ones are sampled around the loop
    starting at the first vertex with spacing ``perimeter / n``.
    """
    if n < 2:
        raise ShapeError(f"resample count must be >= 2, got {n}")
    pts = p.loop()
    seg = np.hypot(*np.diff(pts, axis=0).T)
    keep = np.concatenate([[True], seg > 0])
    pts, seg = pts[keep], seg[seg > 0]
    total = float(seg.sum())
    if total <= 0:
        raise DegenerateGeometryError("cannot resample a zero-length polyline")
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    if p.closed:
        s = np.arange(n) * (total / n)
    else:
        s = np.arange(n) * (total / (n - 1))
        s[-1] = cum[-1]
    out = np.column_stack([np.interp(s, cum, pts[:, 0]), np.interp(s, cum, pts[:, 1])])
    out[0] = pts[0]
    if not p.closed:
        out[-1] = pts[-1]
    return Polyline(out, p.closed)


def chamfer_points(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric mean nearest-point distance between two point sets."""
    a = np.asarray(a, dtype=float).reshape(-1, 2)
    b = np.asarray(b, dtype=float).reshape(-1, 2)
    if len(a) == 0 or len(b) == 0:
        raise ShapeError("chamfer distance needs non-empty point sets")
    d = np.sqrt(
        (a[:, None, 0] - b[None, :, 0]) ** 2 + (a[:, None, 1] - b[None, :, 1]) ** 2
    )
    return 0.5 * (float(np.mean(d.min(axis=1))) + float(np.mean(d.min(axis=0))))


def chamfer_distance(a: Polyline, b: Polyline, samples: int = DEFAULT_CHAMFER_SAMPLES) -> float:
    return chamfer_points(resample_uniform(a, samples).points, resample_uniform(b, samples).points)


@dataclass(frozen=True)
class PointOrdering:
    """Index map from predicted points to GT points.

    Forward: ``pi(i) = (i + shift) mod n``; reversed:
    ``pi(i) = (n - 1 - i + shift) mod n``. The identity is ``(0, False)`` and
    the plain reversal of an open polyline is ``(0, True)``.
    """

    shift: int = 0
    reverse: bool = False

    def indices(self, n: int) -> np.ndarray:
        i = np.arange(n)
        base = (n - 1 - i) if self.reverse else i
        return (base + self.shift) % n

    def rank(self, n: int) -> int:
        """Position in the enumeration used for tie-breaking."""
        return self.shift + (n if self.reverse else 0)


IDENTITY = PointOrdering()


def candidate_orderings(n: int, closed: bool) -> list[PointOrdering]:
    if closed:
        return [PointOrdering(k, False) for k in range(n)] + [PointOrdering(k, True) for k in range(n)]
    return [PointOrdering(0, False), PointOrdering(0, True)]


def _centers(pred) -> np.ndarray:
    if isinstance(pred, MapElement):
        return pred.params[:, :2]
    if isinstance(pred, Polyline):
        return pred.points
    return np.asarray(pred, dtype=float)


def _gt_points(gt) -> np.ndarray:
    return gt.points if isinstance(gt, Polyline) else np.asarray(gt, dtype=float)


def vector_loss(pred, gt, ordering: PointOrdering = IDENTITY) -> float:
    """Summed Manhattan distance between centres and GT points under ``ordering``."""
    mu, ref = _centers(pred), _gt_points(gt)
    if mu.shape != ref.shape:
        raise ShapeError(f"prediction has {mu.shape} points but GT has {ref.shape}")
    return float(np.sum(np.abs(mu - ref[ordering.indices(len(ref))])))


def vector_loss_grad(pred, gt, ordering: PointOrdering = IDENTITY) -> np.ndarray:
    """Subgradient of :func:`vector_loss` w.r.t. the centres (zero at kinks)."""
    mu, ref = _centers(pred), _gt_points(gt)
    if mu.shape != ref.shape:
        raise ShapeError(f"prediction has {mu.shape} points but GT has {ref.shape}")
    return np.sign(mu - ref[ordering.indices(len(ref))])


def best_point_ordering(pred, gt, closed: bool | None = None) -> PointOrdering:
    """Ordering minimizing :func:`vector_loss`, ties going to the earliest candidate."""
    mu, ref = _centers(pred), _gt_points(gt)
    if mu.shape != ref.shape:
        raise ShapeError(f"prediction has {mu.shape} points but GT has {ref.shape}")
    if closed is None:
        closed = pred.closed if isinstance(pred, (MapElement, Polyline)) else False
    cands = candidate_orderings(len(ref), closed)
    idx = np.stack([o.indices(len(ref)) for o in cands])
    losses = np.abs(mu[None] - ref[idx]).sum(axis=(1, 2))
    return cands[int(np.argmin(losses))]
