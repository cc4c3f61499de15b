"""Gaussian splatting with depth-axis sonar rendering and sensor fusion."""

from .geometry import (
    RaySpaceGaussian,
    build_covariance,
    project,
    quat_to_rot,
    to_camera,
    to_ray_space,
)
from .scene import (
    GaussianCloud,
    SensorView,
    activate,
    init_from_transient,
    init_random,
    load_checkpoint,
    save_checkpoint,
)
from .render import (
    FlsImage,
    RenderedImage,
    SonarConfig,
    SplatList,
    TransientHistogram,
    prepare_splats,
    render_all,
    render_camera,
    render_echosounder,
    render_fls,
)
from .grad import (
    CloudGradients,
    backward,
    check_gradients,
    finite_diff_grad,
    fused_loss,
)
from .losses import LossConfig, camera_loss, sonar_loss, total_loss
from .train import TrainConfig, adam_step, densify_and_prune, train
from .metrics import chamfer, cloud_from_gaussians, precision_recall_f1, psnr, ssim

__version__ = "0.1.0"

__all__ = [
    "RaySpaceGaussian", "build_covariance", "project", "quat_to_rot",
    "to_camera", "to_ray_space",
    "GaussianCloud", "SensorView", "activate", "init_from_transient",
    "init_random", "load_checkpoint", "save_checkpoint",
    "FlsImage", "RenderedImage", "SonarConfig", "SplatList",
    "TransientHistogram", "prepare_splats", "render_all", "render_camera",
    "render_echosounder", "render_fls",
    "CloudGradients", "backward", "check_gradients", "finite_diff_grad",
    "fused_loss",
    "LossConfig", "camera_loss", "sonar_loss", "total_loss",
    "TrainConfig", "adam_step", "densify_and_prune", "train",
    "chamfer", "cloud_from_gaussians", "precision_recall_f1", "psnr", "ssim",
]
