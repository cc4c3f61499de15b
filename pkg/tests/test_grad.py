import warnings

import numpy as np
import pytest

from conftest import random_cloud
from zsplat.dataset import ViewData
from zsplat.grad import (
    CloudGradients,
    backward,
    check_gradients,
    finite_diff_grad,
    fused_loss,
)
from zsplat.losses import LossConfig
from zsplat.render import (
    SonarConfig,
    render_camera,
    render_echosounder,
    render_fls,
)
from zsplat.scene import GaussianCloud, SensorView

CFG = SonarConfig(bins=32, range_min=0.8, range_max=3.5, ray_grid=(24, 24), rows=4)


def measured_scene(seed, n=6, view=None):
    """Random cloud to optimize plus measurements from a different cloud."""
    view = view or SensorView.look_at((0, 0, 0), (0, 0, 1), fov_deg=60,
                                      width=16, height=16)
    cloud = random_cloud(n, seed)
    target = random_cloud(n, seed + 1000)
    vd = ViewData(
        view=view,
        image=render_camera(target, view).pixels,
        echo=render_echosounder(target, view, CFG),
        fls=render_fls(target, view, CFG),
    )
    return cloud, vd


class TestFiniteDiff:
    def test_quadratic(self):
        cloud = random_cloud(3, seed=0)
        center = random_cloud(3, seed=1)

        def objective(c):
            return sum(
                float(((a - b) ** 2).sum())
                for a, b in zip(c.arrays().values(), center.arrays().values())
            )

        grads = finite_diff_grad(objective, cloud, h=1e-5)
        for name in GaussianCloud.FIELDS:
            expected = 2.0 * (getattr(cloud, name) - getattr(center, name))
            assert np.allclose(grads.arrays()[name], expected, atol=1e-6)

    def test_constant(self):
        cloud = random_cloud(2, seed=0)
        grads = finite_diff_grad(lambda c: 3.14, cloud, h=1e-4)
        for arr in grads.arrays().values():
            assert np.all(arr == 0.0)

    def test_bad_step(self):
        with pytest.raises(ValueError):
            finite_diff_grad(lambda c: 0.0, random_cloud(1, 0), h=0.0)

    def test_nonfinite_objective(self):
        with pytest.raises(FloatingPointError):
            finite_diff_grad(lambda c: float("nan"), random_cloud(1, 0), h=1e-4)


class TestBackward:
    def test_zero_gradient_at_exact_fit(self):
        view = SensorView.look_at((0, 0, 0), (0, 0, 1), fov_deg=60,
                                  width=16, height=16)
        cloud = random_cloud(5, seed=3)
        vd = ViewData(
            view=view,
            image=render_camera(cloud, view).pixels,
            echo=render_echosounder(cloud, view, CFG),
        )
        loss, grads = backward(cloud, [vd], LossConfig(w=1.0, sonar_kind="echo"), CFG)
        assert loss == 0.0
        for arr in grads.arrays().values():
            assert np.all(arr == 0.0)

    def test_brighter_target_raises_opacity(self):
        view = SensorView.look_at((0, 0, 0), (0, 0, 1), fov_deg=60,
                                  width=17, height=17)
        cloud = GaussianCloud(
            means=[[0.0, 0.0, 2.0]],
            quats=[[1.0, 0, 0, 0]],
            log_scales=np.log(np.full((1, 3), 0.2)),
            opacity_logits=[0.0],
            colors=np.zeros((1, 3)),
        )
        rendered = render_camera(cloud, view).pixels
        target = np.clip(rendered * 2.0 + 0.05, 0.0, 1.0)
        vd = ViewData(view=view, image=target)
        _, grads = backward(cloud, [vd], LossConfig(w=0.0))
        assert grads.opacity_logits[0] < 0.0
        # finite differences agree on the sign
        fd = finite_diff_grad(
            lambda c: fused_loss(c, [vd], LossConfig(w=0.0)), cloud, h=1e-4
        )
        assert fd.opacity_logits[0] < 0.0

    def test_sonar_only_zero_color_gradients(self):
        cloud, vd = measured_scene(seed=4)
        data = [ViewData(view=vd.view, echo=vd.echo)]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            _, grads = backward(
                cloud, data, LossConfig(w=2.0, sonar_kind="echo"), CFG
            )
        assert np.all(grads.colors == 0.0)
        assert np.any(grads.means != 0.0)

    def test_permutation_equivariance(self):
        cloud, vd = measured_scene(seed=5)
        cfg = LossConfig(w=1.0, sonar_kind="echo")
        _, g = backward(cloud, [vd], cfg, CFG)
        perm = np.random.default_rng(0).permutation(len(cloud))
        permuted = GaussianCloud(**{k: v[perm] for k, v in cloud.arrays().items()})
        _, gp = backward(permuted, [vd], cfg, CFG)
        for name in GaussianCloud.FIELDS:
            assert np.allclose(
                gp.arrays()[name], g.arrays()[name][perm], atol=1e-12
            )

    def test_no_measurements_error(self):
        cloud = random_cloud(2, seed=0)
        view = SensorView.look_at((0, 0, 0), (0, 0, 1), width=8, height=8)
        with pytest.raises(ValueError):
            backward(cloud, [ViewData(view=view)], LossConfig())

    def test_culled_rows_zero(self):
        cloud, vd = measured_scene(seed=6)
        cloud.means[0] = [0.0, 0.0, -5.0]  # behind the camera
        _, grads = backward(cloud, [vd], LossConfig(w=0.0))
        for arr in grads.arrays().values():
            assert np.all(arr[0] == 0.0)


class TestGradCheck:
    @pytest.mark.parametrize("kind,w", [("none", 0.0), ("echo", 1.3), ("fls", 0.7)])
    def test_matches_finite_differences(self, kind, w):
        cloud, vd = measured_scene(seed=17)
        cfg = LossConfig(w=w, sonar_kind=kind)
        report = check_gradients(cloud, [vd], cfg, CFG, h=1e-4)
        assert report.n_checked > 0
        assert report.pass_fraction == 1.0, report.failures[:5]

    def test_alpha_clamp_detected_as_kink(self):
        view = SensorView.look_at((0, 0, 0), (0, 0, 1), fov_deg=60,
                                  width=9, height=9)
        # alpha at the footprint center sits exactly on the 0.99 clamp,
        # so +/-h evaluations disagree about the clamp set
        cloud = GaussianCloud(
            means=[[0.0, 0.0, 2.0]],
            quats=[[1.0, 0, 0, 0]],
            log_scales=np.log(np.full((1, 3), 0.3)),
            opacity_logits=[float(np.log(0.99 / 0.01))],
            colors=np.zeros((1, 3)),
        )
        target = np.full((9, 9, 3), 0.25)
        vd = ViewData(view=view, image=target)
        report = check_gradients(cloud, [vd], LossConfig(w=0.0), h=1e-4)
        assert report.n_kink >= 1
        assert report.pass_fraction == 1.0


class TestCloudGradients:
    def test_zeros_shapes(self):
        g = CloudGradients.zeros(7)
        assert g.means.shape == (7, 3)
        assert g.quats.shape == (7, 4)
        assert g.log_scales.shape == (7, 3)
        assert g.opacity_logits.shape == (7,)
        assert g.colors.shape == (7, 3)
