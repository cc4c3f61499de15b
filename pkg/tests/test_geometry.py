import numpy as np
import pytest

from zsplat.geometry import (
    RaySpaceGaussian,
    build_covariance,
    project,
    quat_to_rot,
    ray_space_jacobian,
    to_camera,
    to_ray_space,
)
from zsplat.scene import SensorView


def rigid_view(rotation, translation):
    return SensorView(
        rotation=rotation, translation=translation,
        fx=10.0, fy=10.0, cx=5.0, cy=5.0, width=10, height=10,
    )


def random_rotation(seed):
    rng = np.random.default_rng(seed)
    q = rng.standard_normal(4)
    return quat_to_rot(q)


class TestQuatToRot:
    def test_identity(self):
        assert np.allclose(quat_to_rot([1, 0, 0, 0]), np.eye(3))

    def test_quarter_turn_about_z(self):
        s = np.sqrt(0.5)
        expected = np.array([[0, -1, 0], [1, 0, 0], [0, 0, 1]], dtype=float)
        assert np.allclose(quat_to_rot([s, 0, 0, s]), expected, atol=1e-15)

    @pytest.mark.parametrize("seed", range(10))
    def test_orthonormal_oracle(self, seed):
        rng = np.random.default_rng(seed)
        r = quat_to_rot(rng.standard_normal(4))
        assert np.allclose(r @ r.T, np.eye(3), atol=1e-12)
        assert abs(np.linalg.det(r) - 1.0) < 1e-12

    def test_unnormalized_input_ok(self):
        q = np.array([2.0, 0.0, 0.0, 0.0])
        assert np.allclose(quat_to_rot(q), np.eye(3))

    def test_zero_quaternion_raises(self):
        with pytest.raises(ValueError):
            quat_to_rot([0.0, 0.0, 0.0, 0.0])

    def test_double_cover(self):
        rng = np.random.default_rng(3)
        q = rng.standard_normal(4)
        assert np.array_equal(quat_to_rot(q), quat_to_rot(-q))

    def test_batched(self):
        rng = np.random.default_rng(4)
        q = rng.standard_normal((7, 4))
        batched = quat_to_rot(q)
        for i in range(7):
            assert np.allclose(batched[i], quat_to_rot(q[i]))


class TestBuildCovariance:
    def test_unit(self):
        assert np.allclose(build_covariance([1, 1, 1], np.eye(3)), np.eye(3))

    def test_axis_scales(self):
        got = build_covariance([2, 1, 1], np.eye(3))
        assert np.allclose(got, np.diag([4.0, 1.0, 1.0]))

    @pytest.mark.parametrize("seed", range(10))
    def test_eigenvalue_oracle(self, seed):
        rng = np.random.default_rng(seed)
        s = rng.uniform(0.1, 3.0, 3)
        r = random_rotation(seed + 100)
        sigma = build_covariance(s, r)
        # independent oracle: eigendecomposition
        eig = np.sort(np.linalg.eigvalsh(sigma))
        assert np.allclose(eig, np.sort(s * s), atol=1e-9)

    @pytest.mark.parametrize("seed", range(10))
    def test_psd(self, seed):
        rng = np.random.default_rng(seed)
        sigma = build_covariance(rng.uniform(0.01, 5, 3), random_rotation(seed))
        assert np.allclose(sigma, sigma.T)
        assert np.linalg.eigvalsh(sigma).min() >= -1e-12

    def test_nonpositive_scale_raises(self):
        with pytest.raises(ValueError):
            build_covariance([1.0, 0.0, 1.0], np.eye(3))


class TestToCamera:
    def test_identity_view(self):
        view = rigid_view(np.eye(3), np.zeros(3))
        mu, sigma = to_camera([1.0, 2.0, 3.0], np.diag([1.0, 2.0, 3.0]), view)
        assert np.allclose(mu, [1, 2, 3])
        assert np.allclose(sigma, np.diag([1.0, 2.0, 3.0]))

    def test_pure_translation(self):
        view = rigid_view(np.eye(3), np.array([0.5, -1.0, 2.0]))
        sigma_in = build_covariance([1, 2, 3], random_rotation(1))
        mu, sigma = to_camera([1.0, 1.0, 1.0], sigma_in, view)
        assert np.allclose(mu, [1.5, 0.0, 3.0])
        assert np.array_equal(sigma, sigma_in)

    @pytest.mark.parametrize("seed", range(8))
    def test_trace_invariant(self, seed):
        rng = np.random.default_rng(seed)
        view = rigid_view(random_rotation(seed + 5), rng.standard_normal(3))
        sigma_in = build_covariance(rng.uniform(0.1, 2, 3), random_rotation(seed))
        _, sigma = to_camera(rng.standard_normal(3), sigma_in, view)
        assert abs(np.trace(sigma) - np.trace(sigma_in)) < 1e-12


class TestToRaySpace:
    def test_on_axis(self):
        rs = to_ray_space(np.array([0.0, 0.0, 2.0]), np.eye(3))
        assert isinstance(rs, RaySpaceGaussian)
        assert np.allclose(rs.mu_prime, [0.0, 0.0, 2.0])
        jac = ray_space_jacobian(np.array([0.0, 0.0, 2.0]))
        assert np.allclose(jac, np.diag([0.5, 0.5, 1.0]))
        assert np.allclose(rs.sigma_prime, np.diag([0.25, 0.25, 1.0]))

    def test_off_axis_plugin_oracle(self):
        mu = np.array([1.0, 0.0, 2.0])
        rs = to_ray_space(mu, np.eye(3))
        assert np.allclose(rs.mu_prime, [0.5, 0.0, np.sqrt(5.0)])
        # independent oracle: write the affine Jacobian by hand
        x, y, z = mu
        l = np.sqrt(5.0)
        j = np.array([
            [1 / z, 0.0, -x / z**2],
            [0.0, 1 / z, -y / z**2],
            [x / l, y / l, z / l],
        ])
        assert np.allclose(rs.sigma_prime, j @ j.T, atol=1e-14)

    @pytest.mark.parametrize("seed", range(10))
    def test_depth_is_euclidean_distance(self, seed):
        rng = np.random.default_rng(seed)
        mu = rng.standard_normal(3)
        mu[2] = abs(mu[2]) + 0.1
        rs = to_ray_space(mu, np.eye(3))
        # bitwise equal to sqrt(x^2 + y^2 + z^2); the scalar BLAS norm can
        # differ in the last ulp, so also compare against it loosely
        assert rs.mu_prime[2] == np.sqrt(np.sum(mu * mu))
        assert np.isclose(rs.mu_prime[2], np.linalg.norm(mu), rtol=1e-15)

    def test_behind_camera_raises(self):
        with pytest.raises(ValueError):
            to_ray_space(np.array([0.0, 0.0, -1.0]), np.eye(3))


class TestProject:
    def test_xy(self):
        assert np.allclose(project(np.eye(3), "xy"), np.eye(2))

    def test_z(self):
        sigma = np.diag([1.0, 2.0, 0.7])
        assert project(sigma, "z") == 0.7

    def test_yz_submatrix(self):
        m = np.array([[1.0, 2, 3], [2, 4.0, 5], [3, 5, 6.0]])
        assert np.allclose(project(m, "yz"), [[4.0, 5.0], [5.0, 6.0]])

    @pytest.mark.parametrize("seed", range(6))
    def test_projection_psd(self, seed):
        rng = np.random.default_rng(seed)
        sigma = build_covariance(rng.uniform(0.1, 2, 3), random_rotation(seed))
        rs = to_ray_space(np.array([0.3, -0.2, 2.0]), sigma)
        for plane in ("xy", "yz"):
            eig = np.linalg.eigvalsh(project(rs.sigma_prime, plane))
            assert eig.min() >= -1e-12

    def test_unknown_plane(self):
        with pytest.raises(ValueError):
            project(np.eye(3), "xz")
