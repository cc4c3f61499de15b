import numpy as np
import pytest

from conftest import random_cloud
from zsplat.geometry import COV_EPS
from zsplat.render import (
    SonarConfig,
    _composite,
    _native_raster,
    _splat_mass,
    _sonar_raster,
    prepare_splats,
    render_all,
    render_camera,
    render_echosounder,
    render_fls,
)
from zsplat.scene import GaussianCloud, SH_C0, SensorView


def cloud_of(means, scales=0.1, opacity_logit=0.0, rgb=None, quats=None):
    means = np.atleast_2d(np.asarray(means, dtype=float))
    n = len(means)
    scales = np.broadcast_to(np.asarray(scales, dtype=float), (n, 3))
    if quats is None:
        quats = np.tile([1.0, 0, 0, 0], (n, 1))
    colors = np.zeros((n, 3))
    if rgb is not None:
        colors = (np.atleast_2d(rgb) - 0.5) / SH_C0
    return GaussianCloud(
        means=means,
        quats=quats,
        log_scales=np.log(scales),
        opacity_logits=np.full(n, opacity_logit),
        colors=colors,
    )


def logit(p):
    return float(np.log(p / (1.0 - p)))


class TestPrepareSplats:
    def test_empty_cloud(self, basic_view):
        splats = prepare_splats(GaussianCloud(), basic_view)
        assert len(splats) == 0

    def test_depth_sort(self, basic_view):
        cloud = cloud_of([[0, 0, 2.0], [0, 0, 1.0]])
        splats = prepare_splats(cloud, basic_view)
        assert list(splats.indices) == [1, 0]
        assert np.all(np.diff(splats.depths) >= 0)

    def test_behind_camera_culled(self, basic_view):
        cloud = cloud_of([[0, 0, -2.0], [0, 0, 2.0]])
        splats = prepare_splats(cloud, basic_view)
        assert list(splats.indices) == [1]

    def test_offscreen_footprint_culled(self, basic_view):
        cloud = cloud_of([[50.0, 0, 2.0]], scales=0.01)
        splats = prepare_splats(cloud, basic_view)
        assert len(splats) == 1  # in front of the camera
        assert len(splats.native.kept) == 0  # but the footprint misses


class TestRenderCamera:
    def test_empty_black(self, basic_view):
        out = render_camera(GaussianCloud(), basic_view)
        assert np.all(out.pixels == 0.0)
        assert np.all(out.final_transmittance == 1.0)

    def test_single_centered_splat(self, basic_view):
        rgb = np.array([0.8, 0.6, 0.4])
        o = 0.7
        cloud = cloud_of([[0, 0, 2.0]], scales=0.15,
                         opacity_logit=logit(o), rgb=rgb)
        out = render_camera(cloud, basic_view)
        # footprint peak (w=1) lands exactly on the center pixel
        assert np.allclose(out.pixels[8, 8], o * rgb, atol=1e-9)
        assert abs(out.final_transmittance[8, 8] - (1 - o)) < 1e-9

    def test_opacity_clamp(self, basic_view):
        rgb = np.array([1.0, 1.0, 1.0])
        cloud = cloud_of([[0, 0, 2.0]], scales=0.2,
                         opacity_logit=logit(0.999), rgb=rgb)
        out = render_camera(cloud, basic_view)
        assert np.allclose(out.pixels[8, 8], 0.99 * rgb, atol=1e-9)

    def test_two_coincident_splats_blend(self, basic_view):
        c1 = np.array([0.9, 0.1, 0.1])
        c2 = np.array([0.1, 0.9, 0.1])
        a1, a2 = 0.6, 0.5
        cloud = cloud_of(
            [[0, 0, 2.0], [0, 0, 3.0]], scales=[[0.15] * 3, [0.225] * 3],
            rgb=np.stack([c1, c2]),
        )
        cloud.opacity_logits[:] = [logit(a1), logit(a2)]
        out = render_camera(cloud, basic_view)
        expected = a1 * c1 + (1 - a1) * a2 * c2
        assert np.allclose(out.pixels[8, 8], expected, atol=1e-9)

    @pytest.mark.parametrize("seed", range(5))
    def test_value_ranges(self, basic_view, seed):
        cloud = random_cloud(12, seed)
        out = render_camera(cloud, basic_view)
        assert np.all(np.isfinite(out.pixels))
        assert np.all(out.pixels >= 0.0) and np.all(out.pixels <= 1.0)
        assert np.all(out.final_transmittance >= 0.0)
        assert np.all(out.final_transmittance <= 1.0)

    @pytest.mark.parametrize("seed", range(5))
    def test_transmittance_monotone_per_ray(self, basic_view, seed):
        cloud = random_cloud(10, seed)
        splats = prepare_splats(cloud, basic_view)
        binding = splats.binding(_native_raster(basic_view))
        graph = _composite(binding, splats.opacities[binding.kept])
        # within each pixel segment the running transmittance decreases
        t = graph.t_excl
        same_seg = graph.seg_id[1:] == graph.seg_id[:-1]
        assert np.all(t[1:][same_seg] <= t[:-1][same_seg] + 1e-15)
        starts = graph.idx_first
        assert np.allclose(t[starts], 1.0)

    def test_storage_permutation_invariance(self, basic_view):
        cloud = random_cloud(15, seed=3)
        rng = np.random.default_rng(0)
        perm = rng.permutation(15)
        permuted = GaussianCloud(
            **{k: v[perm] for k, v in cloud.arrays().items()}
        )
        a = render_camera(cloud, basic_view)
        b = render_camera(permuted, basic_view)
        assert np.array_equal(a.pixels, b.pixels)


class TestRenderSonar:
    def cfg(self, **kw):
        defaults = dict(bins=64, range_min=1.0, range_max=3.0,
                        ray_grid=(16, 16), rows=4)
        defaults.update(kw)
        return SonarConfig(**defaults)

    def test_empty_zero(self, basic_view):
        hist = render_echosounder(GaussianCloud(), basic_view, self.cfg())
        assert np.all(hist.values == 0.0)
        fls = render_fls(GaussianCloud(), basic_view, self.cfg())
        assert np.all(fls.values == 0.0)

    def test_single_gaussian_closed_form_mass(self, basic_view):
        # one ray (1x1 grid), alpha = 0.5 at its center, wide depth spread
        o = 0.5
        sz = 0.2
        cfg = self.cfg(bins=50, range_min=1.0, range_max=3.0, ray_grid=(1, 1))
        delta = cfg.bin_width  # 0.04, so sqrt(sigma_zz) = 5 * delta
        cloud = cloud_of([[0, 0, 2.0]], scales=[[0.3, 0.3, sz]],
                         opacity_logit=logit(o))
        hist = render_echosounder(cloud, basic_view, cfg)
        expected = o * np.sqrt(2.0 * np.pi) * sz / delta
        assert abs(hist.values.sum() - expected) / expected < 0.01
        # depth 2.0 sits on a bin edge; the peak is one of its neighbors
        peak_center = hist.bin_centers()[np.argmax(hist.values)]
        assert abs(peak_center - 2.0) <= delta

    @pytest.mark.parametrize("seed", range(20))
    def test_fls_rows_marginalize_to_echo(self, basic_view, seed):
        cloud = random_cloud(8, seed)
        cfg = self.cfg()
        echo = render_echosounder(cloud, basic_view, cfg)
        fls = render_fls(cloud, basic_view, cfg)
        row_sum = fls.values.sum(axis=0)
        denom = max(echo.values.max(), 1e-300)
        assert np.max(np.abs(row_sum - echo.values)) / denom <= 1e-6

    def test_single_row_equals_echo(self, basic_view):
        cloud = random_cloud(6, seed=11)
        cfg = self.cfg(rows=1)
        echo = render_echosounder(cloud, basic_view, cfg)
        fls = render_fls(cloud, basic_view, cfg)
        assert np.array_equal(fls.values[0], echo.values)

    def test_single_gaussian_row_locality(self, basic_view):
        cloud = cloud_of([[0, 0.3, 2.0]], scales=[[0.05, 0.05, 0.1]],
                         opacity_logit=logit(0.8))
        cfg = self.cfg(rows=8)
        fls = render_fls(cloud, basic_view, cfg)
        nonzero_rows = np.flatnonzero(fls.values.sum(axis=1))
        assert len(nonzero_rows) == 1
        centers = cfg.bin_centers()
        nz = np.flatnonzero(fls.values[nonzero_rows[0]])
        sigma_z = 0.1 ** 2 + COV_EPS
        assert np.all(np.abs(centers[nz] - 2.0) <= 3 * np.sqrt(sigma_z))

    @pytest.mark.parametrize("seed", range(10))
    def test_mass_identity_vs_per_splat_sums(self, basic_view, seed):
        # total mass x ray count == sum_splats (sum_rays T alpha) *
        # sqrt(2 pi sigma_zz) / bin width, in the wide-Gaussian regime
        rng = np.random.default_rng(seed)
        cfg = self.cfg(bins=64, range_min=0.5, range_max=4.5, ray_grid=(16, 16))
        delta = cfg.bin_width
        n = 6
        cloud = random_cloud(n, seed, depth_range=(1.8, 2.8))
        cloud.log_scales[:] = np.log(
            rng.uniform(2.0 * delta, 4.0 * delta, (n, 3))
        )
        splats = prepare_splats(cloud, basic_view)
        binding = splats.binding(_sonar_raster(basic_view, cfg))
        graph = _composite(binding, splats.opacities[binding.kept])
        mass = _splat_mass(graph)
        sigma_z = splats.sigma_z[binding.kept]
        closed = (mass * np.sqrt(2.0 * np.pi * sigma_z) / delta).sum()
        hist = render_echosounder(cloud, basic_view, cfg, _splats=splats)
        total = hist.values.sum() * 16 * 16
        assert abs(total - closed) / closed < 0.01

    def test_nonnegative(self, basic_view):
        cloud = random_cloud(10, seed=2)
        cfg = self.cfg()
        assert np.all(render_echosounder(cloud, basic_view, cfg).values >= 0)
        assert np.all(render_fls(cloud, basic_view, cfg).values >= 0)

    def test_invalid_cfg(self):
        with pytest.raises(ValueError):
            SonarConfig(bins=0)
        with pytest.raises(ValueError):
            SonarConfig(range_min=2.0, range_max=1.0)


class TestRenderAll:
    def test_camera_only_matches(self, basic_view):
        cloud = random_cloud(9, seed=5)
        bundle = render_all(cloud, basic_view, {"camera"})
        solo = render_camera(cloud, basic_view)
        assert np.array_equal(bundle.camera.pixels, solo.pixels)
        assert bundle.echo is None and bundle.fls is None

    def test_bundle_bitwise_equal(self, basic_view):
        cloud = random_cloud(9, seed=6)
        cfg = SonarConfig(bins=32, range_min=1.0, range_max=3.0,
                          ray_grid=(8, 8), rows=2)
        bundle = render_all(cloud, basic_view, {"camera", "echo", "fls"}, cfg)
        assert np.array_equal(
            bundle.camera.pixels, render_camera(cloud, basic_view).pixels
        )
        assert np.array_equal(
            bundle.echo.values,
            render_echosounder(cloud, basic_view, cfg).values,
        )
        assert np.array_equal(
            bundle.fls.values, render_fls(cloud, basic_view, cfg).values
        )

    def test_empty_modalities_error(self, basic_view):
        with pytest.raises(ValueError):
            render_all(GaussianCloud(), basic_view, set())

    def test_unknown_modality_error(self, basic_view):
        with pytest.raises(ValueError):
            render_all(GaussianCloud(), basic_view, {"lidar"})

    def test_sonar_needs_cfg(self, basic_view):
        with pytest.raises(ValueError):
            render_all(GaussianCloud(), basic_view, {"echo"})
