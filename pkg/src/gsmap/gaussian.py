"""2D Gaussian primitives, map elements and their density math.

A primitive is the 5-vector ``(mu_x, mu_y, sigma_x, sigma_y, theta)`` in
metres/radians. Its covariance is ``R diag(sigma_x^2, sigma_y^2) R^T`` and its
(unnormalised) density at ``p`` is ``exp(-0.5 (p - mu)^T Sigma^-1 (p - mu))``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, InvalidPrimitiveError, ShapeError

DEFAULT_N_GAUSSIANS = 20
DEFAULT_MAX_INSTANCES = 50

# densities under this are flushed to exactly zero
DENSITY_FLUSH = 1e-30
_LOG_FLUSH = math.log(DENSITY_FLUSH)

PARAM_NAMES = ("mu_x", "mu_y", "sigma_x", "sigma_y", "theta")


class ClassId(enum.IntEnum):
    PED_CROSSING = 0
    DIVIDER = 1
    BOUNDARY = 2

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, value) -> "ClassId":
        if isinstance(value, ClassId):
            return value
        if isinstance(value, str):
            try:
                return cls[value.upper()]
            except KeyError:
                raise ConfigurationError(f"unknown class {value!r}") from None
        return cls(int(value))


NUM_CLASSES = len(ClassId)


@dataclass(frozen=True)
class Gaussian2D:
    mu_x: float
    mu_y: float
    sigma_x: float
    sigma_y: float
    theta: float

    def __post_init__(self):
        values = (self.mu_x, self.mu_y, self.sigma_x, self.sigma_y, self.theta)
        if not all(math.isfinite(v) for v in values):
            raise InvalidPrimitiveError(f"non-finite Gaussian field in {values}")
        if self.sigma_x <= 0 or self.sigma_y <= 0:
            raise InvalidPrimitiveError(
                f"scales must be positive, got ({self.sigma_x}, {self.sigma_y})"
            )

    @classmethod
    def from_array(cls, row: Sequence[float]) -> "Gaussian2D":
        return cls(*(float(v) for v in row))

    def as_array(self) -> np.ndarray:
        return np.array([self.mu_x, self.mu_y, self.sigma_x, self.sigma_y, self.theta])

    @property
    def mu(self) -> np.ndarray:
        return np.array([self.mu_x, self.mu_y])


def rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def covariance(g: Gaussian2D) -> np.ndarray:
    """Return ``R diag(sigma_x^2, sigma_y^2) R^T``."""
    _check(g)
    r = rotation(g.theta)
    s = np.diag([g.sigma_x, g.sigma_y])
    cov = r @ s @ s.T @ r.T
    # exact symmetry; the two off-diagonal products can differ in the last ulp
    off = 0.5 * (cov[0, 1] + cov[1, 0])
    cov[0, 1] = cov[1, 0] = off
    return cov


def density(g: Gaussian2D, p: Sequence[float]) -> float:
    """Gaussian density at point ``p``, in (0, 1]."""
    cov = covariance(g)
    a, b, c = cov[0, 0], cov[0, 1], cov[1, 1]
    det = a * c - b * b
    dx = float(p[0]) - g.mu_x
    dy = float(p[1]) - g.mu_y
    if not (math.isfinite(dx) and math.isfinite(dy)):
        raise InvalidPrimitiveError(f"non-finite query point {tuple(p)}")
    maha = (c * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det
    expo = -0.5 * maha
    if expo < _LOG_FLUSH:
        return 0.0
    return math.exp(expo)


def density_gradient(g: Gaussian2D, p: Sequence[float]) -> np.ndarray:
    """Partials of :func:`density` w.r.t. (mu_x, mu_y, sigma_x, sigma_y, theta)."""
    _check(g)
    dens, grad = eval_density(
        np.array([g.as_array()]), np.array([float(p[0])]), np.array([float(p[1])]), grad=True
    )
    return grad[0, :, 0]


def canonicalize_theta(g: Gaussian2D) -> Gaussian2D:
    """Wrap theta into [-pi/2, pi/2); the density is pi-periodic in theta."""
    return Gaussian2D(g.mu_x, g.mu_y, g.sigma_x, g.sigma_y, wrap_theta(g.theta))


def wrap_theta(theta):
    """Vectorised pi-periodic wrap into [-pi/2, pi/2)."""
    theta = np.asarray(theta, dtype=float)
    wrapped = np.mod(theta + 0.5 * np.pi, np.pi) - 0.5 * np.pi
    # mod can round up to exactly pi/2 for inputs just below an odd multiple
    wrapped = np.where(wrapped >= 0.5 * np.pi, wrapped - np.pi, wrapped)
    # in-range angles pass through bit-exact
    wrapped = np.where((theta >= -0.5 * np.pi) & (theta < 0.5 * np.pi), theta, wrapped)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


def eval_density(params: np.ndarray, x: np.ndarray, y: np.ndarray, grad: bool = False):
    """Evaluate K Gaussians at P points in principal-axis coordinates.

    ``params`` is (K, 5); ``x`` and ``y`` are broadcastable to (P,) or (K, P).
    Returns densities (K, P) and, when ``grad`` is set, partials (K, 5, P).
    """
    params = np.asarray(params, dtype=float)
    cols = [params[:, i : i + 1] for i in range(5)]
    dens, _, partials = density_terms(*cols, x, y, grad=grad)
    if partials is None:
        return dens, None
    return dens, np.stack(partials, axis=1)


def density_terms(mx, my, sx, sy, th, x, y, grad: bool = False):
    """Broadcasting core: returns (density, squared Mahalanobis distance, partials).

    ``partials`` is a 5-tuple ordered like :data:`PARAM_NAMES`, or None.
    """
    c, s = np.cos(th), np.sin(th)
    dx = x - mx
    dy = y - my
    u = c * dx + s * dy
    v = -s * dx + c * dy
    isx2 = 1.0 / (sx * sx)
    isy2 = 1.0 / (sy * sy)
    maha = u * u * isx2 + v * v * isy2
    expo = -0.5 * maha
    dens = np.where(expo < _LOG_FLUSH, 0.0, np.exp(np.maximum(expo, _LOG_FLUSH)))
    if not grad:
        return dens, maha, None
    a = u * isx2
    b = v * isy2
    partials = (
        dens * (c * a - s * b),
        dens * (s * a + c * b),
        dens * u * a / sx,
        dens * v * b / sy,
        -dens * u * v * (isx2 - isy2),
    )
    return dens, maha, partials


def _check(g: Gaussian2D) -> None:
    if not isinstance(g, Gaussian2D):
        raise InvalidPrimitiveError(f"expected Gaussian2D, got {type(g).__name__}")


def validate_params(params) -> np.ndarray:
    arr = np.array(params, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 5 or arr.shape[0] < 1:
        raise ShapeError(f"Gaussian parameters must be (N, 5), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidPrimitiveError("non-finite Gaussian parameters")
    if np.any(arr[:, 2:4] <= 0):
        raise InvalidPrimitiveError("Gaussian scales must be positive")
    return arr


def one_hot_scores(class_id: ClassId, confidence: float = 1.0) -> np.ndarray:
    scores = np.zeros(NUM_CLASSES)
    scores[int(class_id)] = confidence
    return scores


@dataclass(frozen=True, eq=False)
class MapElement:
    """Ordered sequence of Gaussians with a class label and topology flag.

    Parameters are held as an (N, 5) read-only array in the column order of
    :data:`PARAM_NAMES`.
    """

    params: np.ndarray
    class_id: ClassId
    closed: bool | None = None
    scores: np.ndarray | None = None

    def __post_init__(self):
        params = validate_params(self.params)
        params.setflags(write=False)
        object.__setattr__(self, "params", params)
        cid = ClassId.parse(self.class_id)
        object.__setattr__(self, "class_id", cid)
        if self.closed is None:
            object.__setattr__(self, "closed", cid == ClassId.PED_CROSSING)
        scores = one_hot_scores(cid) if self.scores is None else np.array(self.scores, dtype=float)
        if scores.shape != (NUM_CLASSES,):
            raise ShapeError(f"scores must have {NUM_CLASSES} entries, got {scores.shape}")
        if np.any(scores < 0) or np.any(scores > 1) or scores.sum() > 1 + 1e-9:
            raise ConfigurationError(f"invalid class scores {scores.tolist()}")
        scores.setflags(write=False)
        object.__setattr__(self, "scores", scores)

    @classmethod
    def from_gaussians(cls, gaussians: Iterable[Gaussian2D], class_id, closed=None, scores=None):
        return cls(np.array([g.as_array() for g in gaussians]), class_id, closed, scores)

    @property
    def n(self) -> int:
        return self.params.shape[0]

    @property
    def gaussians(self) -> tuple[Gaussian2D, ...]:
        return tuple(Gaussian2D.from_array(row) for row in self.params)

    @property
    def centers(self) -> np.ndarray:
        return np.array(self.params[:, :2])

    @property
    def score(self) -> float:
        """Confidence for the element's own class."""
        return float(self.scores[int(self.class_id)])

    def replace(self, params=None, **kw) -> "MapElement":
        return MapElement(
            self.params if params is None else params,
            kw.get("class_id", self.class_id),
            kw.get("closed", self.closed),
            kw.get("scores", self.scores),
        )


@dataclass(frozen=True)
class GaussianMap:
    elements: tuple[MapElement, ...] = field(default_factory=tuple)
    max_instances: int = DEFAULT_MAX_INSTANCES

    def __post_init__(self):
        elements = tuple(self.elements)
        object.__setattr__(self, "elements", elements)
        if len(elements) > self.max_instances:
            raise ConfigurationError(
                f"{len(elements)} elements exceed the instance budget of {self.max_instances}"
            )

    def __len__(self) -> int:
        return len(self.elements)

    def __iter__(self):
        return iter(self.elements)

    def __getitem__(self, i) -> MapElement:
        return self.elements[i]
