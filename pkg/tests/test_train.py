import warnings

import numpy as np
import pytest

from zsplat.dataset import Dataset, ViewData
from zsplat.grad import CloudGradients
from zsplat.losses import LossConfig, camera_loss, sonar_loss, total_loss
from zsplat.render import SonarConfig, render_camera, render_echosounder
from zsplat.scene import GaussianCloud, SensorView, init_random, sigmoid
from zsplat.train import (
    AdamState,
    TrainConfig,
    TrainState,
    adam_step,
    densify_and_prune,
    train,
)


class TestCameraLoss:
    def test_identical(self):
        img = np.random.default_rng(0).random((4, 4, 3))
        assert camera_loss(img, img) == 0.0

    def test_ones_vs_zeros(self):
        assert camera_loss(np.ones((3, 3, 3)), np.zeros((3, 3, 3))) == 1.0

    def test_elementwise_oracle(self):
        rng = np.random.default_rng(1)
        a = rng.random((5, 6, 3))
        b = rng.random((5, 6, 3))
        brute = sum(
            abs(a[i, j, c] - b[i, j, c])
            for i in range(5) for j in range(6) for c in range(3)
        ) / (5 * 6 * 3)
        assert abs(camera_loss(a, b) - brute) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            camera_loss(np.zeros((2, 2, 3)), np.zeros((3, 3, 3)))


class TestSonarLoss:
    def test_identical(self):
        v = np.random.default_rng(0).random(16)
        assert sonar_loss(v, v, "echo") == 0.0

    def test_three_four_five(self):
        got = sonar_loss(np.array([3.0, 4.0]), np.zeros(2), "echo")
        assert abs(got - 5.0 / np.sqrt(2.0)) < 1e-12

    def test_frobenius_ones(self):
        got = sonar_loss(np.ones((2, 2)), np.zeros((2, 2)), "fls")
        assert abs(got - 1.0) < 1e-12

    def test_dimensionality_checks(self):
        with pytest.raises(ValueError):
            sonar_loss(np.ones((2, 2)), np.ones((2, 2)), "echo")
        with pytest.raises(ValueError):
            sonar_loss(np.ones(4), np.ones(4), "fls")
        with pytest.raises(ValueError):
            sonar_loss(np.ones(4), np.ones(5), "echo")


class TestTotalLoss:
    def test_zero_weight(self):
        assert total_loss(1.7, 123.0, 0.0) == 1.7

    def test_weighted(self):
        assert total_loss(1.0, 2.0, 0.5) == 2.0

    def test_high_texture_free_weight(self):
        # the recommended top of the weight band for texture-poor scenes
        assert total_loss(1.0, 2.0, 3.0) == 7.0
        LossConfig(w=3.0, sonar_kind="echo")  # no warning at the band edge

    def test_band_warning(self):
        with pytest.warns(UserWarning):
            LossConfig(w=5.0, sonar_kind="echo")
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            LossConfig(w=0.0, sonar_kind="none")  # camera-only never warns

    def test_invalid(self):
        with pytest.raises(ValueError):
            LossConfig(w=-1.0)
        with pytest.raises(ValueError):
            LossConfig(sonar_kind="radar")


def tiny_cloud(n=3, seed=0):
    return init_random(n, [(0, 0, 0), (1, 1, 1)], seed=seed)


RATES = {"means": 0.1, "quats": 0.1, "log_scales": 0.1,
         "opacity_logits": 0.1, "colors": 0.1}


class TestAdam:
    def test_zero_gradient_noop(self):
        cloud = tiny_cloud()
        before = {k: v.copy() for k, v in cloud.arrays().items()}
        state = AdamState.zeros(cloud)
        adam_step(cloud, CloudGradients.zeros(3), state, RATES)
        for name, arr in cloud.arrays().items():
            assert np.array_equal(arr, before[name])

    def test_first_step_closed_form(self):
        cloud = tiny_cloud()
        before = cloud.means[0, 0]
        grads = CloudGradients.zeros(3)
        grads.means[0, 0] = 1.0
        adam_step(cloud, grads, AdamState.zeros(cloud), RATES)
        # first bias-corrected step is lr * g / (|g| + eps)
        assert abs((before - cloud.means[0, 0]) - 0.1) < 1e-10

    def test_deterministic(self):
        results = []
        for _ in range(2):
            cloud = tiny_cloud()
            state = AdamState.zeros(cloud)
            rng = np.random.default_rng(7)
            for _ in range(5):
                grads = CloudGradients.zeros(3)
                grads.means[:] = rng.standard_normal((3, 3))
                adam_step(cloud, grads, state, RATES)
            results.append(cloud.means.copy())
        assert np.array_equal(results[0], results[1])

    def test_nonfinite_gradient_raises(self):
        cloud = tiny_cloud()
        grads = CloudGradients.zeros(3)
        grads.means[0, 0] = np.nan
        with pytest.raises(ValueError):
            adam_step(cloud, grads, AdamState.zeros(cloud), RATES)


class TestDensifyPrune:
    def cfg(self):
        return TrainConfig(
            iterations=10, n_init=4, scene_extent=1.0,
            init_bounds=[(0, 0, 0), (1, 1, 1)],
            densify_grad_threshold=0.1, prune_opacity=0.005,
        ).resolved(None)

    def test_unchanged(self):
        cloud = tiny_cloud(4)
        state = TrainState.zeros(cloud)
        state.grad_count = 1
        out, _ = densify_and_prune(cloud, state, self.cfg(), np.random.default_rng(0))
        for name in GaussianCloud.FIELDS:
            assert np.array_equal(getattr(out, name), getattr(cloud, name))

    def test_prune_transparent(self):
        cloud = tiny_cloud(4)
        cloud.opacity_logits[2] = np.log(0.001 / 0.999)
        state = TrainState.zeros(cloud)
        state.grad_count = 1
        out, new_state = densify_and_prune(
            cloud, state, self.cfg(), np.random.default_rng(0)
        )
        assert len(out) == 3
        assert np.all(sigmoid(out.opacity_logits) >= 0.005)
        assert new_state.adam.m["means"].shape == (3, 3)

    def test_split_large(self):
        cloud = tiny_cloud(4)
        cloud.log_scales[1] = np.log(0.5)  # above 0.01 * extent
        state = TrainState.zeros(cloud)
        state.grad_accum[1] = 1.0
        state.grad_count = 1
        out, _ = densify_and_prune(cloud, state, self.cfg(), np.random.default_rng(0))
        assert len(out) == 5  # one parent replaced by two children
        child_scales = np.exp(out.log_scales[-2:])
        assert np.allclose(child_scales, 0.5 / 1.6)

    def test_clone_small(self):
        cloud = tiny_cloud(4)
        cloud.log_scales[:] = np.log(0.001)
        state = TrainState.zeros(cloud)
        state.grad_accum[0] = 1.0
        state.grad_count = 1
        out, _ = densify_and_prune(cloud, state, self.cfg(), np.random.default_rng(0))
        assert len(out) == 5
        assert np.array_equal(out.means[-1], cloud.means[0])


def smoke_dataset():
    view = SensorView.look_at((0, 0, 0), (0, 0, 1), fov_deg=60,
                              width=17, height=17)
    target = GaussianCloud(
        means=[[0.0, 0.0, 2.0]], quats=[[1.0, 0, 0, 0]],
        log_scales=np.log(np.full((1, 3), 0.2)),
        opacity_logits=[4.0], colors=[[0.5, 0.2, -0.1]],
    )
    img = render_camera(target, view).pixels
    return Dataset(
        views=[ViewData(view=view, image=img)],
        scene_bounds=np.array([[-0.5, -0.5, 1.5], [0.5, 0.5, 2.5]]),
    )


def smoke_start():
    return GaussianCloud(
        means=[[0.05, -0.025, 2.1]], quats=[[1.0, 0, 0, 0]],
        log_scales=np.log(np.full((1, 3), 0.22)),
        opacity_logits=[1.0], colors=[[0.0, 0.0, 0.0]],
    )


def smoke_config(iterations=120):
    return TrainConfig(
        iterations=iterations, n_init=1, densify_start=10 ** 9, seed=0,
        lr_means=0.8e-4, lr_quats=0.5e-3, lr_log_scales=2.5e-3,
        lr_opacity=0.025, lr_colors=1.25e-3,
    )


class TestTrain:
    def test_smoke_loss_decreases_monotonically(self):
        cloud, log = train(
            smoke_dataset(), LossConfig(w=0.0), smoke_config(),
            initial_cloud=smoke_start(),
        )
        losses = np.array([r.loss_camera for r in log])
        window = losses[10:110]
        assert np.all(np.diff(window) < 0.0)
        assert window[-1] < window[0]

    def test_identical_seeds_identical_checkpoints(self, tmp_path):
        ds = smoke_dataset()
        p1, p2 = tmp_path / "a.zspl", tmp_path / "b.zspl"
        for p in (p1, p2):
            train(ds, LossConfig(w=0.0), smoke_config(30), checkpoint_path=p)
        assert p1.read_bytes() == p2.read_bytes()

    def test_zero_weight_ignores_sonar_bitwise(self, tmp_path):
        ds = smoke_dataset()
        cfg = SonarConfig(bins=16, range_min=1.0, range_max=3.0,
                          ray_grid=(8, 8), rows=2)
        view = ds.views[0].view
        noise = render_echosounder(
            init_random(5, [(-1, -1, 1), (1, 1, 3)], seed=9), view, cfg
        )
        with_sonar = Dataset(
            views=[ViewData(view=view, image=ds.views[0].image, echo=noise)],
            sonar=cfg, scene_bounds=ds.scene_bounds,
        )
        p1, p2 = tmp_path / "plain.zspl", tmp_path / "sonar.zspl"
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            train(ds, LossConfig(w=0.0, sonar_kind="echo"),
                  smoke_config(40), checkpoint_path=p1)
            train(with_sonar, LossConfig(w=0.0, sonar_kind="echo"),
                  smoke_config(40), checkpoint_path=p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_loss_finite_in_log(self):
        _, log = train(
            smoke_dataset(), LossConfig(w=0.0), smoke_config(25),
            initial_cloud=smoke_start(),
        )
        assert all(np.isfinite(r.loss_total) for r in log)

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            train(Dataset(), LossConfig(), TrainConfig(iterations=1))

    def test_missing_modalities(self):
        ds = smoke_dataset()
        with pytest.raises(ValueError):
            train(ds, LossConfig(w=1.0, sonar_kind="echo"),
                  smoke_config(5))
        no_images = Dataset(
            views=[ViewData(view=ds.views[0].view)],
            scene_bounds=ds.scene_bounds,
        )
        with pytest.raises(ValueError):
            train(no_images, LossConfig(), smoke_config(5))

    def test_pruning_respects_floor(self):
        # gradient threshold 0 forces densification churn; pruning must
        # still never drop a Gaussian at or above the opacity floor
        ds = smoke_dataset()
        cfg = TrainConfig(
            iterations=60, n_init=8, seed=1,
            init_bounds=[(-0.4, -0.4, 1.6), (0.4, 0.4, 2.4)],
            densify_start=10, densify_interval=20, densify_end=60,
            densify_grad_threshold=1e-9,
        )
        cloud, log = train(ds, LossConfig(w=0.0), cfg)
        assert len(cloud) >= 1
