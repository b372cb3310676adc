"""Gaussian-primitive HD map elements: rasterization, losses, matching, metrics and fitting."""

from .errors import (
    ConfigurationError,
    DegenerateGeometryError,
    DivergenceError,
    GenerationError,
    GSMapError,
    InvalidCostError,
    InvalidPrimitiveError,
    ShapeError,
)
from .gaussian import ClassId, Gaussian2D, GaussianMap, MapElement, covariance, density, density_gradient
from .raster import DensityMask, RasterGrid, render_backward, render_element, render_map, render_oracle
from .vector import Polyline, best_point_ordering, chamfer_distance, resample_uniform, vectorize
from .losses import LossWeights, instance_loss, raster_loss
from .matching import hungarian_assign, map_loss, match_map
from .metrics import EvalConfig, ap_chamfer, ap_raster, evaluate
from .scene import SceneSpec, generate_scene, gt_mask
from .fitting import FitConfig, fit, fit_scene, sweep

__version__ = "0.1.0"
