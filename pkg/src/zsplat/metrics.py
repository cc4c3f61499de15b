"""Photometric and geometric evaluation metrics.

Point clouds are plain ``(M, 3)`` arrays.  Chamfer distance is the
symmetric mean of nearest-neighbor distances (mean over P of the nearest
Q plus mean over Q of the nearest P, halved); this definition is applied
identically to every method under comparison so ratios are meaningful.
"""

from __future__ import annotations

import numpy as np
from scipy.signal import convolve2d
from scipy.spatial import cKDTree

from .scene import GaussianCloud, sigmoid

PSNR_CAP = 99.0
_MSE_FLOOR = 1e-10

# Luma weights for grayscale conversion.
_LUMA = np.array([0.299, 0.587, 0.114])

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(image: np.ndarray, reference: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for images in [0, 1].

    Capped at 99 dB once the MSE drops below 1e-10.
    """
    image = np.asarray(image, dtype=float)
    reference = np.asarray(reference, dtype=float)
    if image.shape != reference.shape:
        raise ValueError(f"shape mismatch: {image.shape} vs {reference.shape}")
    mse = float(((image - reference) ** 2).mean())
    if mse < _MSE_FLOOR:
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def _to_luma(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=float)
    if image.ndim == 3:
        return image @ _LUMA
    return image


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(image: np.ndarray, reference: np.ndarray) -> float:
    """Mean local structural similarity on the luma channel.

    11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03, dynamic range 1;
    windows are evaluated on the fully-covered interior.
    """
    a = _to_luma(image)
    b = _to_luma(reference)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"images smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    kernel = _gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)

    def filt(x):
        return convolve2d(x, kernel, mode="valid")

    mu_a = filt(a)
    mu_b = filt(b)
    mu_aa = mu_a * mu_a
    mu_bb = mu_b * mu_b
    mu_ab = mu_a * mu_b
    var_a = filt(a * a) - mu_aa
    var_b = filt(b * b) - mu_bb
    cov = filt(a * b) - mu_ab
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    num = (2.0 * mu_ab + c1) * (2.0 * cov + c2)
    den = (mu_aa + mu_bb + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def _check_cloud(points: np.ndarray, name: str) -> np.ndarray:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError(f"{name} point cloud is empty")
    return pts


def chamfer(p: np.ndarray, q: np.ndarray) -> float:
    """Symmetric mean nearest-neighbor distance between two clouds."""
    p = _check_cloud(p, "first")
    q = _check_cloud(q, "second")
    d_pq = cKDTree(q).query(p)[0]
    d_qp = cKDTree(p).query(q)[0]
    return float(0.5 * (d_pq.mean() + d_qp.mean()))


def precision_recall_f1(
    predicted: np.ndarray, truth: np.ndarray, threshold: float
) -> tuple[float, float, float]:
    """Fractions of points within ``threshold`` of the other cloud.

    Precision covers predicted -> truth, recall truth -> predicted, and
    F1 is their harmonic mean (0 when both vanish).
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    p = _check_cloud(predicted, "predicted")
    q = _check_cloud(truth, "truth")
    d_pq = cKDTree(q).query(p)[0]
    d_qp = cKDTree(p).query(q)[0]
    precision = float((d_pq <= threshold).mean())
    recall = float((d_qp <= threshold).mean())
    if precision + recall == 0.0:
        return 0.0, 0.0, 0.0
    f1 = 2.0 * precision * recall / (precision + recall)
    return precision, recall, f1


DEFAULT_OPACITY_FLOOR = 0.1


def cloud_from_gaussians(
    cloud: GaussianCloud, opacity_floor: float = DEFAULT_OPACITY_FLOOR
) -> np.ndarray:
    """Means of Gaussians whose activated opacity reaches the floor.

    Near-transparent Gaussians are excluded so invisible floaters do not
    count as reconstructed geometry.
    """
    opac = sigmoid(cloud.opacity_logits)
    return cloud.means[opac >= opacity_floor].copy()


def apply_rigid(points: np.ndarray, rotation, translation) -> np.ndarray:
    """User-supplied rigid alignment for hardware reconstructions."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    r = np.asarray(rotation, dtype=float).reshape(3, 3)
    t = np.asarray(translation, dtype=float).reshape(3)
    return pts @ r.T + t
