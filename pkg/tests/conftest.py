import numpy as np
import pytest

from zsplat.scene import GaussianCloud, SensorView, init_random


@pytest.fixture
def basic_view():
    """Camera at the origin looking down +z, odd raster so the center
    pixel sits exactly on the optical axis."""
    return SensorView.look_at(
        eye=(0.0, 0.0, 0.0), target=(0.0, 0.0, 1.0),
        fov_deg=60.0, width=17, height=17,
    )


def random_cloud(n, seed, depth_range=(1.5, 2.8), spread=0.5):
    """Random cloud in front of the basic view with varied appearance."""
    rng = np.random.default_rng(seed)
    cloud = init_random(
        n,
        [(-spread, -spread, depth_range[0]), (spread, spread, depth_range[1])],
        seed=seed,
    )
    cloud.colors[:] = rng.normal(0.0, 0.5, cloud.colors.shape)
    cloud.opacity_logits[:] = rng.normal(0.0, 1.2, n)
    cloud.log_scales[:] = rng.uniform(np.log(0.05), np.log(0.25), (n, 3))
    return cloud
