import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from priorsplat.splat import Gaussian2D, GaussianScene, ViewCamera

settings.register_profile(
    "default", deadline=None, max_examples=25,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("default")


def random_scene(rng, n=5, size=16, pixel_scale=0.1):
    """Random Gaussians well inside a size x size view at the origin."""
    ext = size * pixel_scale
    gs = []
    for _ in range(n):
        gs.append(Gaussian2D(
            mu=tuple(rng.uniform(0.15, 0.85, 2) * ext),
            cov_params=(np.log(rng.uniform(1.5, 4.0) * pixel_scale),
                        np.log(rng.uniform(1.5, 4.0) * pixel_scale), rng.uniform(0, np.pi)),
            opacity_logit=rng.uniform(-2, 2),
            color=tuple(rng.normal(0, 1, 3)),
            depth=rng.uniform(1, 5),
        ))
    return GaussianScene.from_gaussians(gs)


def camera(size=16, pixel_scale=0.1, rotation=0.0, origin=(0.0, 0.0)):
    return ViewCamera(origin, rotation, pixel_scale, size, size)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY = {
    "dataset.width": 48, "dataset.height": 40, "dataset.views": 4, "dataset.path_rows": 1,
    "dataset.world_extent": (4.0, 3.0), "dataset.static_objects": 6,
    "dataset.background_spacing": 1.0, "dataset.transient_size": (0.3, 0.4),
    "init.count": 200,
    "stage1.iterations": 40, "stage1.densify_start": 10, "stage1.densify_end": 30,
    "stage2.iterations": 40, "stage2.densify_start": 10, "stage2.densify_end": 30,
    "stage2.default_densify_start": 10, "stage2.default_densify_end": 30,
    "stage2.t_densify": 20, "stage2.beta_prior": 20, "stage2.beta_robustness": 20,
    "densify.interval": 10,
}


def tiny_config(**overrides):
    """Desk profile scaled down to a few small views and short schedules."""
    from priorsplat.config import RunConfig

    cfg = {**TINY, **overrides}
    # short runs keep their windows inside the schedule
    for stage, keys in (("stage1", ("densify_start", "densify_end")),
                        ("stage2", ("densify_start", "densify_end", "default_densify_start",
                                    "default_densify_end"))):
        n = cfg[f"{stage}.iterations"]
        for k in keys:
            key = f"{stage}.{k}"
            if key not in overrides:
                cfg[key] = min(cfg[key], n)
    return RunConfig.from_profile("desk", cfg)


# acceptance verdicts, printed once at the end of the session
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
