"""Fused-loss training: Adam optimization with densification and pruning.

Each iteration samples one view uniformly, renders the modalities the
loss requires, backpropagates analytically and applies per-group Adam
updates.  Periodically, Gaussians whose accumulated positional gradient
exceeds a threshold are cloned (small ones) or split (large ones), and
near-transparent ones are pruned; optimizer state rows are remapped to
match.  Everything is seeded and deterministic.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .dataset import Dataset, ViewData
from .grad import CloudGradients, backward_detailed
from .losses import LossConfig, camera_loss, sonar_loss, total_loss  # noqa: F401
from .scene import GaussianCloud, init_random, save_checkpoint, sigmoid

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-15


class TrainingDiverged(RuntimeError):
    """Raised when the loss stops being finite."""


@dataclass
class TrainConfig:
    """Schedule and optimizer settings.

    ``lr_means`` defaults to 1.6e-4 x scene extent with exponential decay
    to 1.6e-6 x extent; the other groups use fixed rates.  ``init_bounds``
    is the box for random initialization (defaults to a cube around the
    scene bounds with side equal to the scene diagonal, which leaves the
    depth axis genuinely uncertain).
    """

    iterations: int = 7000
    n_init: int = 2000
    init_bounds: np.ndarray | None = None
    scene_extent: float | None = None
    lr_means: float | None = None
    lr_means_final: float | None = None
    lr_quats: float = 1e-3
    lr_log_scales: float = 5e-3
    lr_opacity: float = 0.05
    lr_colors: float = 2.5e-3
    densify_interval: int = 100
    densify_start: int = 500
    densify_end: int = 5000
    densify_grad_threshold: float = 2e-4
    prune_opacity: float = 0.005
    split_scale_frac: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("need at least one iteration")
        for name in ("lr_quats", "lr_log_scales", "lr_opacity", "lr_colors"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def resolved(self, dataset_bounds: np.ndarray | None) -> "TrainConfig":
        """Fill in bounds/extent/rate defaults from the dataset."""
        bounds = self.init_bounds
        if bounds is None:
            if dataset_bounds is None:
                raise ValueError(
                    "no init_bounds configured and the dataset has no scene bounds"
                )
            lo, hi = np.asarray(dataset_bounds, dtype=float)
            center = 0.5 * (lo + hi)
            half = 0.5 * float(np.linalg.norm(hi - lo))
            bounds = np.stack([center - half, center + half])
        else:
            bounds = np.asarray(bounds, dtype=float).reshape(2, 3)
        extent = self.scene_extent
        if extent is None:
            extent = 0.5 * float(np.linalg.norm(bounds[1] - bounds[0]))
        lr_means = self.lr_means if self.lr_means is not None else 1.6e-4 * extent
        lr_final = (
            self.lr_means_final
            if self.lr_means_final is not None
            else 1.6e-6 * extent
        )
        if lr_means <= 0 or lr_final <= 0:
            raise ValueError("mean learning rates must be positive")
        return replace(
            self,
            init_bounds=bounds,
            scene_extent=extent,
            lr_means=lr_means,
            lr_means_final=lr_final,
        )


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """First/second moments per parameter group plus the step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, cloud: GaussianCloud) -> "AdamState":
        return cls(
            m={k: np.zeros_like(a) for k, a in cloud.arrays().items()},
            v={k: np.zeros_like(a) for k, a in cloud.arrays().items()},
        )


def adam_step(
    cloud: GaussianCloud,
    grads: CloudGradients,
    state: AdamState,
    rates: dict[str, float],
) -> None:
    """One in-place Adam update with per-group learning rates."""
    state.step += 1
    bc1 = 1.0 - ADAM_BETA1 ** state.step
    bc2 = 1.0 - ADAM_BETA2 ** state.step
    garrays = grads.arrays()
    for name, param in cloud.arrays().items():
        g = garrays[name]
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient in {name}")
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        step = (rates[name] / bc1) * m / (np.sqrt(v / bc2) + ADAM_EPS)
        param -= step


# ---------------------------------------------------------------------------
# Densify / prune
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    """Optimizer state plus densification accumulators."""

    adam: AdamState
    grad_accum: np.ndarray
    grad_count: int = 0

    @classmethod
    def zeros(cls, cloud: GaussianCloud) -> "TrainState":
        return cls(adam=AdamState.zeros(cloud), grad_accum=np.zeros(len(cloud)))

    def accumulate(self, grads: CloudGradients) -> None:
        self.grad_accum += np.linalg.norm(grads.means, axis=1)
        self.grad_count += 1


def _remap_rows(arr: np.ndarray, keep: np.ndarray, n_new: int) -> np.ndarray:
    """Keep surviving rows, append zeros for newly created Gaussians."""
    tail_shape = (n_new,) + arr.shape[1:]
    return np.concatenate([arr[keep], np.zeros(tail_shape)])


def densify_and_prune(
    cloud: GaussianCloud,
    state: TrainState,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> tuple[GaussianCloud, TrainState]:
    """Clone/split high-gradient Gaussians, prune near-transparent ones.

    Split replaces a large Gaussian by two children sampled inside it
    with scales divided by 1.6; clone duplicates a small one in place.
    Adam moments survive for existing rows and start at zero for new
    ones; densification accumulators reset.
    """
    from .geometry import quat_to_rot

    n = len(cloud)
    denom = max(state.grad_count, 1)
    mean_grad = state.grad_accum / denom
    over = mean_grad > cfg.densify_grad_threshold
    scales = np.exp(cloud.log_scales)
    big = scales.max(axis=1) > cfg.split_scale_frac * float(cfg.scene_extent)
    split = over & big
    clone = over & ~big

    keep = ~split
    clone_idx = np.flatnonzero(clone)
    split_idx = np.flatnonzero(split)

    parts = {name: [arr[keep]] for name, arr in cloud.arrays().items()}
    n_new = 0

    if len(clone_idx):
        for name, arr in cloud.arrays().items():
            parts[name].append(arr[clone_idx])
        n_new += len(clone_idx)

    if len(split_idx):
        rot = quat_to_rot(cloud.quats[split_idx])
        s = scales[split_idx]
        for _ in range(2):
            offs = rng.standard_normal((len(split_idx), 3)) * s
            child_means = cloud.means[split_idx] + np.einsum(
                "kij,kj->ki", rot, offs
            )
            parts["means"].append(child_means)
            parts["quats"].append(cloud.quats[split_idx])
            parts["log_scales"].append(cloud.log_scales[split_idx] - np.log(1.6))
            parts["opacity_logits"].append(cloud.opacity_logits[split_idx])
            parts["colors"].append(cloud.colors[split_idx])
        n_new += 2 * len(split_idx)

    merged = {name: np.concatenate(chunks) for name, chunks in parts.items()}
    new_cloud = GaussianCloud(**merged)

    adam = AdamState(
        m={k: _remap_rows(a, keep, n_new) for k, a in state.adam.m.items()},
        v={k: _remap_rows(a, keep, n_new) for k, a in state.adam.v.items()},
        step=state.adam.step,
    )

    # prune near-transparent Gaussians
    alive = sigmoid(new_cloud.opacity_logits) >= cfg.prune_opacity
    if not alive.all():
        new_cloud = GaussianCloud(
            **{name: arr[alive] for name, arr in new_cloud.arrays().items()}
        )
        adam = AdamState(
            m={k: a[alive] for k, a in adam.m.items()},
            v={k: a[alive] for k, a in adam.v.items()},
            step=adam.step,
        )

    new_state = TrainState(adam=adam, grad_accum=np.zeros(len(new_cloud)))
    return new_cloud, new_state


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class LogRecord:
    iteration: int
    loss_camera: float
    loss_sonar: float
    loss_total: float
    n_gaussians: int


def write_log_csv(path, records: Sequence[LogRecord]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "loss_camera", "loss_sonar", "loss_total", "n"])
        for r in records:
            writer.writerow(
                [r.iteration, f"{r.loss_camera:.9g}", f"{r.loss_sonar:.9g}",
                 f"{r.loss_total:.9g}", r.n_gaussians]
            )


def _means_lr(cfg: TrainConfig, iteration: int) -> float:
    frac = iteration / max(cfg.iterations, 1)
    return float(cfg.lr_means * (cfg.lr_means_final / cfg.lr_means) ** frac)


def train(
    dataset: Dataset,
    loss_cfg: LossConfig,
    train_cfg: TrainConfig,
    checkpoint_path=None,
    initial_cloud: GaussianCloud | None = None,
) -> tuple[GaussianCloud, list[LogRecord]]:
    """Optimize a Gaussian cloud against a measured dataset.

    With ``w == 0`` (or ``sonar_kind == "none"``) the trajectory is
    bitwise independent of any sonar files present.  Raises
    :class:`TrainingDiverged` if the loss stops being finite.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    cfg = train_cfg.resolved(dataset.scene_bounds)
    use_sonar = loss_cfg.sonar_kind != "none" and loss_cfg.w > 0
    if not use_sonar and not any(vd.image is not None for vd in dataset.views):
        raise ValueError("camera-only training needs at least one camera image")
    if use_sonar:
        have = any(
            (vd.echo if loss_cfg.sonar_kind == "echo" else vd.fls) is not None
            for vd in dataset.views
        )
        if not have:
            raise ValueError(
                f"loss requires {loss_cfg.sonar_kind!r} measurements "
                "but the dataset has none"
            )
        if dataset.sonar is None:
            raise ValueError("dataset has no sonar configuration")
    eff_loss = loss_cfg if use_sonar else replace(loss_cfg, sonar_kind="none", w=0.0)

    rng = np.random.default_rng(cfg.seed)
    if initial_cloud is not None:
        cloud = initial_cloud.copy()
    else:
        cloud = init_random(cfg.n_init, cfg.init_bounds, cfg.seed)
    state = TrainState.zeros(cloud)
    log: list[LogRecord] = []

    for it in range(1, cfg.iterations + 1):
        vd = dataset.views[int(rng.integers(0, len(dataset.views)))]
        view_data = ViewData(
            view=vd.view,
            image=vd.image,
            echo=vd.echo if use_sonar and loss_cfg.sonar_kind == "echo" else None,
            fls=vd.fls if use_sonar and loss_cfg.sonar_kind == "fls" else None,
        )
        try:
            total, lc, ls, grads = backward_detailed(
                cloud, [view_data], eff_loss, dataset.sonar
            )
        except FloatingPointError as e:
            raise TrainingDiverged(f"iteration {it}: {e}") from e
        if not np.isfinite(total):
            raise TrainingDiverged(f"iteration {it}: loss {total}")

        state.accumulate(grads)
        rates = {
            "means": _means_lr(cfg, it),
            "quats": cfg.lr_quats,
            "log_scales": cfg.lr_log_scales,
            "opacity_logits": cfg.lr_opacity,
            "colors": cfg.lr_colors,
        }
        adam_step(cloud, grads, state.adam, rates)
        log.append(LogRecord(it, lc, ls, total, len(cloud)))

        if (
            cfg.densify_start <= it <= cfg.densify_end
            and it % cfg.densify_interval == 0
        ):
            cloud, state = densify_and_prune(cloud, state, cfg, rng)

    if checkpoint_path is not None:
        save_checkpoint(cloud, checkpoint_path)
    return cloud, log
