"""Fused camera + sonar loss definitions.

The camera term is a mean absolute error; the sonar term is a Euclidean
norm of the residual (vector norm for echosounder transients, Frobenius
norm for FLS images) divided by the square root of the element count so
its scale does not depend on the bin layout.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

SONAR_KINDS = ("echo", "fls", "none")
MEASUREMENT_SCALES = ("unit_mass", "raw")

# Recommended sonar-weight band; values outside it warn but still run.
W_BAND = (0.1, 3.0)


@dataclass
class LossConfig:
    """Weighting and normalization of the fused objective.

    ``w`` scales the sonar term; ``measurement_scale="unit_mass"``
    normalizes measured and rendered transients by their own total mass
    before comparison, removing the arbitrary gain of hardware data.
    """

    w: float = 1.0
    sonar_kind: str = "none"
    measurement_scale: str = "raw"

    def __post_init__(self):
        if self.w < 0:
            raise ValueError("sonar weight must be nonnegative")
        if self.sonar_kind not in SONAR_KINDS:
            raise ValueError(f"sonar_kind must be one of {SONAR_KINDS}")
        if self.measurement_scale not in MEASUREMENT_SCALES:
            raise ValueError(
                f"measurement_scale must be one of {MEASUREMENT_SCALES}"
            )
        if self.sonar_kind != "none" and not (W_BAND[0] <= self.w <= W_BAND[1]):
            warnings.warn(
                f"sonar weight {self.w} outside the recommended band "
                f"[{W_BAND[0]}, {W_BAND[1]}]",
                stacklevel=2,
            )


def camera_loss(image: np.ndarray, rendered: np.ndarray) -> float:
    """Mean absolute difference over pixels and channels."""
    image = np.asarray(image, dtype=float)
    rendered = np.asarray(rendered, dtype=float)
    if image.shape != rendered.shape:
        raise ValueError(f"shape mismatch: {image.shape} vs {rendered.shape}")
    return float(np.abs(image - rendered).mean())


def sonar_loss(measured: np.ndarray, rendered: np.ndarray, kind: str) -> float:
    """Euclidean norm of the residual, scaled by 1/sqrt(element count)."""
    measured = np.asarray(measured, dtype=float)
    rendered = np.asarray(rendered, dtype=float)
    if measured.shape != rendered.shape:
        raise ValueError(f"shape mismatch: {measured.shape} vs {rendered.shape}")
    if kind == "echo":
        if measured.ndim != 1:
            raise ValueError("echosounder transients are 1-D")
    elif kind == "fls":
        if measured.ndim != 2:
            raise ValueError("FLS images are 2-D")
    else:
        raise ValueError(f"unknown sonar kind {kind!r}")
    return float(np.linalg.norm(measured - rendered) / np.sqrt(measured.size))


def total_loss(loss_camera: float, loss_sonar: float, w: float) -> float:
    """Weighted combination of the camera and sonar terms."""
    return float(loss_camera + w * loss_sonar)
