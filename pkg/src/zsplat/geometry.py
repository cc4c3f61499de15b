"""Geometry kernels shared by every renderer.

Conventions used throughout the package:

- Quaternions are Hamilton, scalar-first ``(w, x, y, z)``, stored
  unnormalized and normalized on use.  Column vectors are rotated by
  left-multiplication ``R @ v``.
- ``Mat3``/``SymMat3`` are plain ``(3, 3)`` numpy arrays; symmetric
  matrices are kept as full matrices and symmetrized where it matters.
- The world-to-camera transform is ``x_cam = R @ x_world + t`` with the
  camera looking along +z.
- Ray space is the coordinate system after the per-Gaussian local affine
  approximation of the projective transform: ``(x', y') = (x/z, y/z)``
  and the third coordinate is the Euclidean distance from the camera,
  which is what a time-of-flight sensor measures.

All functions broadcast over a leading batch dimension.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

if TYPE_CHECKING:  # pragma: no cover
    from .scene import SensorView

# Gaussians with camera-space z at or below this are culled from renders.
Z_NEAR = 0.01

# Added to projected covariance diagonals before inversion / division.
COV_EPS = 1e-8


@dataclass
class RaySpaceGaussian:
    """Gaussian after the local affine viewing approximation.

    ``mu_prime`` is ``(x/z, y/z, ||mu||)`` so its third component is the
    Euclidean camera-to-center distance.  Fields hold a single Gaussian
    (``(3,)`` / ``(3, 3)``) or a batch (``(N, 3)`` / ``(N, 3, 3)``).
    """

    mu_prime: np.ndarray
    sigma_prime: np.ndarray


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    """Convert quaternion(s) ``(..., 4)`` to rotation matrices ``(..., 3, 3)``.

    The input is normalized internally; a zero-norm quaternion raises
    ``ValueError``.  ``quat_to_rot(q) == quat_to_rot(-q)``.
    """
    q = np.asarray(q, dtype=float)
    norm = np.linalg.norm(q, axis=-1)
    if np.any(norm == 0.0):
        raise ValueError("zero-norm quaternion cannot be normalized")
    w, x, y, z = np.moveaxis(q / norm[..., None], -1, 0)

    r = np.empty(q.shape[:-1] + (3, 3), dtype=float)
    r[..., 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    r[..., 0, 1] = 2.0 * (x * y - w * z)
    r[..., 0, 2] = 2.0 * (x * z + w * y)
    r[..., 1, 0] = 2.0 * (x * y + w * z)
    r[..., 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    r[..., 1, 2] = 2.0 * (y * z - w * x)
    r[..., 2, 0] = 2.0 * (x * z - w * y)
    r[..., 2, 1] = 2.0 * (y * z + w * x)
    r[..., 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return r


def build_covariance(scale: np.ndarray, rot: np.ndarray) -> np.ndarray:
    """Assemble ``Sigma = R diag(s) diag(s) R^T`` from positive scales.

    The result is symmetric positive semi-definite with eigenvalues
    ``s**2``.  Non-positive scales raise ``ValueError``.
    """
    scale = np.asarray(scale, dtype=float)
    rot = np.asarray(rot, dtype=float)
    if np.any(scale <= 0.0):
        raise ValueError("scales must be strictly positive")
    rs = rot * scale[..., None, :]  # R @ diag(s)
    return rs @ np.swapaxes(rs, -1, -2)


def to_camera(
    mu: np.ndarray, sigma: np.ndarray, view: "SensorView"
) -> tuple[np.ndarray, np.ndarray]:
    """Apply the rigid world-to-camera transform to mean(s) and covariance(s)."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    r = view.rotation
    mu_cam = mu @ r.T + view.translation
    sigma_cam = r @ sigma @ r.T
    return mu_cam, sigma_cam


def ray_space_jacobian(mu_cam: np.ndarray) -> np.ndarray:
    """Jacobian of the local affine viewing approximation at ``mu_cam``.

    Third row is ``mu / ||mu||`` so the output z-axis measures Euclidean
    distance from the camera.
    """
    mu_cam = np.asarray(mu_cam, dtype=float)
    x, y, z = np.moveaxis(mu_cam, -1, 0)
    length = np.linalg.norm(mu_cam, axis=-1)
    j = np.zeros(mu_cam.shape[:-1] + (3, 3), dtype=float)
    j[..., 0, 0] = 1.0 / z
    j[..., 0, 2] = -x / (z * z)
    j[..., 1, 1] = 1.0 / z
    j[..., 1, 2] = -y / (z * z)
    j[..., 2, 0] = x / length
    j[..., 2, 1] = y / length
    j[..., 2, 2] = z / length
    return j


def to_ray_space(mu_cam: np.ndarray, sigma_cam: np.ndarray) -> RaySpaceGaussian:
    """Transform camera-space Gaussian(s) into ray space.

    Requires ``mu_cam[..., 2] > 0``; callers cull against ``Z_NEAR``
    before invoking this.
    """
    mu_cam = np.asarray(mu_cam, dtype=float)
    sigma_cam = np.asarray(sigma_cam, dtype=float)
    z = mu_cam[..., 2]
    if np.any(z <= 0.0):
        raise ValueError("ray-space transform requires camera z > 0")
    length = np.linalg.norm(mu_cam, axis=-1)
    mu_prime = np.stack(
        [mu_cam[..., 0] / z, mu_cam[..., 1] / z, length], axis=-1
    )
    j = ray_space_jacobian(mu_cam)
    sigma_prime = j @ sigma_cam @ np.swapaxes(j, -1, -2)
    return RaySpaceGaussian(mu_prime, sigma_prime)


def project(sigma_prime: np.ndarray, plane: str) -> np.ndarray:
    """Project a ray-space covariance onto a sensor plane.

    ``plane`` selects the marginal: ``"xy"`` keeps the image-plane 2x2
    block (camera footprint), ``"z"`` returns the depth variance
    ``sigma_zz`` (single-beam sonar), ``"yz"`` keeps the rows/cols
    ``{y, z}`` submatrix (imaging sonar).
    """
    sigma_prime = np.asarray(sigma_prime, dtype=float)
    if plane == "xy":
        return sigma_prime[..., :2, :2]
    if plane == "z":
        return sigma_prime[..., 2, 2]
    if plane == "yz":
        return sigma_prime[..., 1:, 1:]
    raise ValueError(f"unknown projection plane {plane!r}")
