import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "repo",
    deadline=None,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("repo")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_params(rng, n, extent=(-25.0, 25.0, -12.0, 12.0), sigma=(0.1, 3.0)):
    x0, x1, y0, y1 = extent
    return np.column_stack([
        rng.uniform(x0, x1, n),
        rng.uniform(y0, y1, n),
        rng.uniform(*sigma, n),
        rng.uniform(*sigma, n),
        rng.uniform(-np.pi / 2, np.pi / 2, n),
    ])


def ema(values, alpha=2.0 / 101.0):
    """Exponential moving average with a 100-sample span."""
    out = np.empty(len(values))
    acc = values[0]
    for k, v in enumerate(values):
        acc = alpha * v + (1.0 - alpha) * acc
        out[k] = acc
    return out


@pytest.fixture(scope="session")
def standard_suite():
    """Seeds 0-9 of the default scene recipe, each fitted with default settings."""
    import time

    from gsmap.fitting import FitConfig, fit_many
    from gsmap.scene import SceneSpec, generate_scene

    scenes = [generate_scene(SceneSpec(seed=s)) for s in range(10)]
    t0 = time.perf_counter()
    results = fit_many(scenes, FitConfig())
    return scenes, results, time.perf_counter() - t0
