"""Analytic gradients of the fused render-and-loss objective.

The backward pass replays the cached front-to-back compositing to
recover per-splat transmittance, then chains through the footprint
evaluation, the ray-space Jacobian (including its dependence on the
camera-space mean), the rigid view transform and the scale/rotation
covariance factorization, down to the raw cloud parameters.

Correctness is defined operationally: :func:`check_gradients` compares
every coordinate against central finite differences, excluding
coordinates that straddle one of the objective's kinks (alpha clamp,
contribution floor, saturation stop, 3-sigma footprint and bin cutoffs,
color clamp, residual sign flips), which are detected by comparing
decision traces at the two perturbed evaluations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import geometry
from .dataset import ViewData
from .losses import LossConfig
from .render import (
    DecisionTrace,
    SonarConfig,
    _accumulate_image,
    _bin_entries,
    _composite,
    _fls_rows,
    _native_raster,
    _seg_sum_after,
    _sonar_raster,
    _splat_mass,
    prepare_splats,
)
from .scene import SH_C0, GaussianCloud

MASS_FLOOR = 1e-12


@dataclass
class CloudGradients:
    """Gradient arrays matching the raw parameter layout of a cloud."""

    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "CloudGradients":
        return cls(
            means=np.zeros((n, 3)),
            quats=np.zeros((n, 4)),
            log_scales=np.zeros((n, 3)),
            opacity_logits=np.zeros(n),
            colors=np.zeros((n, 3)),
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in GaussianCloud.FIELDS}


# ---------------------------------------------------------------------------
# Loss terms (shared by the forward-only and backward paths)
# ---------------------------------------------------------------------------

def _camera_term(image, rendered, trace):
    resid = rendered - image
    if trace is not None:
        trace.add(10, np.sign(resid).astype(np.int64))
    return float(np.abs(resid).mean()), resid


def _normalized(values):
    mass = float(values.sum())
    return values / max(mass, MASS_FLOOR), mass


def _sonar_term(measured, rendered, loss_cfg: LossConfig, trace):
    """Sonar loss value and its gradient with respect to the rendering."""
    m = np.asarray(measured, dtype=float)
    r = np.asarray(rendered, dtype=float)
    if m.shape != r.shape:
        raise ValueError(f"sonar shape mismatch: {m.shape} vs {r.shape}")
    if loss_cfg.measurement_scale == "unit_mass":
        m_hat, _ = _normalized(m)
        r_hat, r_mass = _normalized(r)
    else:
        m_hat, r_hat, r_mass = m, r, None
    diff = r_hat - m_hat
    nrm = float(np.linalg.norm(diff))
    scale = 1.0 / np.sqrt(diff.size)
    loss = nrm * scale
    if trace is not None:
        trace.add(11, np.asarray([nrm == 0.0], dtype=np.int64))
    if nrm == 0.0:
        dr = np.zeros_like(r)
    else:
        u = diff * (scale / nrm)  # d loss / d r_hat
        if loss_cfg.measurement_scale == "unit_mass":
            denom = max(r_mass, MASS_FLOOR)
            if r_mass > MASS_FLOOR:
                dr = (u - float((u * r_hat).sum())) / denom
            else:
                dr = u / denom
        else:
            dr = u
    return loss, dr


# ---------------------------------------------------------------------------
# Backward building blocks
# ---------------------------------------------------------------------------

def _backprop_alpha(graph, q):
    """d loss / d alpha per entry, given per-entry deposit weights q.

    The composited loss term is sum_e T_e alpha_e q_e; differentiating
    through the transmittance of later entries in the same pixel yields
    the classic forward-value-minus-suffix form.
    """
    u = np.where(graph.contrib, graph.t_excl * graph.alpha * q, 0.0)
    after = _seg_sum_after(u, graph.seg_id, graph.idx_first)
    dalpha = np.where(
        graph.contrib, graph.t_excl * q - after / (1.0 - graph.alpha), 0.0
    )
    return np.where(graph.clamped, 0.0, dalpha)


def _backprop_footprint(graph, dalpha_raw, opac_kept):
    """Push per-entry alpha gradients to per-splat footprint quantities.

    Returns gradients for activated opacity, pixel-space center and the
    packed 2D pixel covariance (as full symmetric 2x2 matrices).
    """
    es, g = graph.es, graph.g
    n = graph.n_kept
    do = np.bincount(es, weights=dalpha_raw * g, minlength=n)
    dg = dalpha_raw * opac_kept[es]
    dpow = dg * g
    ca = graph.binding.conic[es, 0]
    cb = graph.binding.conic[es, 1]
    cc = graph.binding.conic[es, 2]
    dx, dy = graph.dx, graph.dy
    # power = -0.5 (ca dx^2 + cc dy^2) - cb dx dy;  d = pixel - center
    dmu_u = np.bincount(es, weights=dpow * (ca * dx + cb * dy), minlength=n)
    dmu_v = np.bincount(es, weights=dpow * (cb * dx + cc * dy), minlength=n)
    dca = np.bincount(es, weights=dpow * (-0.5 * dx * dx), minlength=n)
    dcb = np.bincount(es, weights=dpow * (-dx * dy), minlength=n)
    dcc = np.bincount(es, weights=dpow * (-0.5 * dy * dy), minlength=n)

    # conic = cov^-1: d cov = -conic @ Gf @ conic with Gf the symmetric
    # full-matrix form of the packed conic gradient.
    gf = np.empty((n, 2, 2))
    gf[:, 0, 0] = dca
    gf[:, 0, 1] = gf[:, 1, 0] = 0.5 * dcb
    gf[:, 1, 1] = dcc
    conic_m = np.empty((n, 2, 2))
    conic_m[:, 0, 0] = graph.binding.conic[:, 0]
    conic_m[:, 0, 1] = conic_m[:, 1, 0] = graph.binding.conic[:, 1]
    conic_m[:, 1, 1] = graph.binding.conic[:, 2]
    dcov = -conic_m @ gf @ conic_m
    return do, np.stack([dmu_u, dmu_v], axis=-1), dcov


def _chain_to_params(
    splats, binding, grads: CloudGradients,
    dmu_pix, dcov2, dmu_z, dsigma_z, dopac, dcolor,
):
    """Chain per-splat footprint/depth gradients down to raw parameters."""
    kept = binding.kept
    if len(kept) == 0:
        return
    fx, fy = binding.raster.fx, binding.raster.fy

    # pixel-space -> ray-space
    dxp = dmu_pix[:, 0] * fx
    dyp = dmu_pix[:, 1] * fy
    ds2 = np.empty_like(dcov2)
    ds2[:, 0, 0] = dcov2[:, 0, 0] * fx * fx
    ds2[:, 0, 1] = dcov2[:, 0, 1] * fx * fy
    ds2[:, 1, 0] = dcov2[:, 1, 0] * fx * fy
    ds2[:, 1, 1] = dcov2[:, 1, 1] * fy * fy

    k = len(kept)
    g3 = np.zeros((k, 3, 3))
    g3[:, :2, :2] = 0.5 * (ds2 + np.swapaxes(ds2, -1, -2))
    g3[:, 2, 2] += dsigma_z

    mu = splats.mu_cam[kept]
    sig_cam = splats.sigma_cam[kept]
    jac = geometry.ray_space_jacobian(mu)
    jt = np.swapaxes(jac, -1, -2)
    dsig_cam = jt @ g3 @ jac
    djac = 2.0 * g3 @ jac @ sig_cam

    x, y, z = mu[:, 0], mu[:, 1], mu[:, 2]
    length = splats.depths[kept]
    z2 = z * z
    z3 = z2 * z
    l3 = length ** 3
    inv_l = 1.0 / length

    dj = djac
    dmu_cam = np.empty((k, 3))
    dmu_cam[:, 0] = (
        dj[:, 0, 2] * (-1.0 / z2)
        + dj[:, 2, 0] * (inv_l - x * x / l3)
        + dj[:, 2, 1] * (-x * y / l3)
        + dj[:, 2, 2] * (-x * z / l3)
    )
    dmu_cam[:, 1] = (
        dj[:, 1, 2] * (-1.0 / z2)
        + dj[:, 2, 0] * (-x * y / l3)
        + dj[:, 2, 1] * (inv_l - y * y / l3)
        + dj[:, 2, 2] * (-y * z / l3)
    )
    dmu_cam[:, 2] = (
        dj[:, 0, 0] * (-1.0 / z2)
        + dj[:, 0, 2] * (2.0 * x / z3)
        + dj[:, 1, 1] * (-1.0 / z2)
        + dj[:, 1, 2] * (2.0 * y / z3)
        + dj[:, 2, 0] * (-x * z / l3)
        + dj[:, 2, 1] * (-y * z / l3)
        + dj[:, 2, 2] * (inv_l - z2 / l3)
    )
    # mean path: (x', y') = (x/z, y/z), depth key = ||mu||
    dmu_cam[:, 0] += dxp / z + dmu_z * x * inv_l
    dmu_cam[:, 1] += dyp / z + dmu_z * y * inv_l
    dmu_cam[:, 2] += -dxp * x / z2 - dyp * y / z2 + dmu_z * z * inv_l

    # rigid view transform
    rw = splats.view.rotation
    dmu_world = dmu_cam @ rw
    gw = rw.T @ dsig_cam @ rw
    gw = 0.5 * (gw + np.swapaxes(gw, -1, -2))

    # covariance factorization: Sigma = R diag(s^2) R^T
    rot = splats.rotations[kept]
    s = splats.act_scales[kept]
    drot = 2.0 * gw @ (rot * (s * s)[:, None, :])
    p = np.swapaxes(rot, -1, -2) @ gw @ rot
    dlog = 2.0 * (s * s) * np.einsum("kii->ki", p)

    # rotation -> normalized quaternion
    qh = splats.q_hat[kept]
    w, qx, qy, qz = qh[:, 0], qh[:, 1], qh[:, 2], qh[:, 3]
    d = drot
    dqh = np.empty((k, 4))
    dqh[:, 0] = 2.0 * (
        qx * (d[:, 2, 1] - d[:, 1, 2])
        + qy * (d[:, 0, 2] - d[:, 2, 0])
        + qz * (d[:, 1, 0] - d[:, 0, 1])
    )
    dqh[:, 1] = 2.0 * (
        qy * (d[:, 0, 1] + d[:, 1, 0])
        + qz * (d[:, 0, 2] + d[:, 2, 0])
        + w * (d[:, 2, 1] - d[:, 1, 2])
        - 2.0 * qx * (d[:, 1, 1] + d[:, 2, 2])
    )
    dqh[:, 2] = 2.0 * (
        qx * (d[:, 0, 1] + d[:, 1, 0])
        + qz * (d[:, 1, 2] + d[:, 2, 1])
        + w * (d[:, 0, 2] - d[:, 2, 0])
        - 2.0 * qy * (d[:, 0, 0] + d[:, 2, 2])
    )
    dqh[:, 3] = 2.0 * (
        qx * (d[:, 0, 2] + d[:, 2, 0])
        + qy * (d[:, 1, 2] + d[:, 2, 1])
        + w * (d[:, 1, 0] - d[:, 0, 1])
        - 2.0 * qz * (d[:, 0, 0] + d[:, 1, 1])
    )
    # normalization: q_hat = q / ||q||
    dq = (dqh - qh * (qh * dqh).sum(axis=1, keepdims=True)) / splats.q_norm[
        kept, None
    ]

    o = splats.opacities[kept]
    dlogit = dopac * o * (1.0 - o)
    dsh = dcolor * SH_C0 * splats.color_open[kept]

    idx = splats.indices[kept]
    np.add.at(grads.means, idx, dmu_world)
    np.add.at(grads.quats, idx, dq)
    np.add.at(grads.log_scales, idx, dlog)
    np.add.at(grads.opacity_logits, idx, dlogit)
    np.add.at(grads.colors, idx, dsh)


# ---------------------------------------------------------------------------
# Per-view passes
# ---------------------------------------------------------------------------

def _camera_pass(splats, vd, scale, grads, trace):
    binding = splats.binding(_native_raster(vd.view))
    opac = splats.opacities[binding.kept]
    colors = splats.colors[binding.kept]
    graph = _composite(binding, opac, trace)
    img = _accumulate_image(graph, colors)
    lc, resid = _camera_term(vd.image, img, trace)
    if grads is None:
        return lc
    npix = img.shape[0] * img.shape[1]
    dimg = (np.sign(resid) * (scale / resid.size)).reshape(npix, 3)
    q = (dimg[graph.pix] * colors[graph.es]).sum(axis=1)
    dalpha_raw = _backprop_alpha(graph, q)
    w = np.where(graph.contrib, graph.t_excl * graph.alpha, 0.0)
    dcolor = np.empty((graph.n_kept, 3))
    for ch in range(3):
        dcolor[:, ch] = np.bincount(
            graph.es, weights=w * dimg[graph.pix, ch], minlength=graph.n_kept
        )
    do, dmu_pix, dcov = _backprop_footprint(graph, dalpha_raw, opac)
    zeros = np.zeros(graph.n_kept)
    _chain_to_params(splats, binding, grads, dmu_pix, dcov, zeros, zeros, do, dcolor)
    return lc


def _sonar_pass(splats, vd, loss_cfg, cfg: SonarConfig, scale, grads, trace):
    measurement = vd.echo if loss_cfg.sonar_kind == "echo" else vd.fls
    binding = splats.binding(_sonar_raster(vd.view, cfg))
    opac = splats.opacities[binding.kept]
    graph = _composite(binding, opac, trace)
    mass = _splat_mass(graph)
    mu_z = splats.depths[binding.kept]
    sigma_z = splats.sigma_z[binding.kept]
    sb, ib, gwgt, dzm = _bin_entries(mu_z, sigma_z, cfg, trace)
    n_rays = binding.raster.width * binding.raster.height
    n_kept = len(binding.kept)

    if loss_cfg.sonar_kind == "echo":
        flat = ib
        size = cfg.bins
    else:
        rows = _fls_rows(binding, cfg)
        if trace is not None:
            trace.add(9, rows)
        flat = rows[sb] * cfg.bins + ib
        size = cfg.rows * cfg.bins
    values = np.bincount(flat, weights=mass[sb] * gwgt, minlength=size) / n_rays
    if loss_cfg.sonar_kind == "fls":
        rendered = values.reshape(cfg.rows, cfg.bins)
    else:
        rendered = values

    ls, dval = _sonar_term(measurement.values, rendered, loss_cfg, trace)
    if grads is None:
        return ls

    dval_e = dval.reshape(-1)[flat] * (scale / n_rays)
    psi = np.bincount(sb, weights=dval_e * gwgt, minlength=n_kept)
    dgw = dval_e * mass[sb]
    dmu_z = np.bincount(
        sb, weights=dgw * gwgt * dzm / sigma_z[sb], minlength=n_kept
    )
    dsigma_z = np.bincount(
        sb,
        weights=dgw * gwgt * dzm * dzm / (2.0 * sigma_z[sb] ** 2),
        minlength=n_kept,
    )
    dalpha_raw = _backprop_alpha(graph, psi[graph.es])
    do, dmu_pix, dcov = _backprop_footprint(graph, dalpha_raw, opac)
    dcolor = np.zeros((n_kept, 3))
    _chain_to_params(
        splats, binding, grads, dmu_pix, dcov, dmu_z, dsigma_z, do, dcolor
    )
    return ls


def _check_measurement(vd, loss_cfg, sonar_cfg):
    if loss_cfg.sonar_kind == "echo" and vd.echo is not None:
        if sonar_cfg is None:
            raise ValueError("echosounder loss requires a SonarConfig")
        if vd.echo.bins != sonar_cfg.bins:
            raise ValueError("measured transient bin count differs from config")
        return True
    if loss_cfg.sonar_kind == "fls" and vd.fls is not None:
        if sonar_cfg is None:
            raise ValueError("FLS loss requires a SonarConfig")
        if vd.fls.values.shape != (sonar_cfg.rows, sonar_cfg.bins):
            raise ValueError("measured FLS shape differs from config")
        return True
    return False


def _run(cloud, data, loss_cfg, sonar_cfg, grads, trace):
    cam_flags = [vd.image is not None for vd in data]
    sonar_flags = [
        loss_cfg.sonar_kind != "none" and _check_measurement(vd, loss_cfg, sonar_cfg)
        for vd in data
    ]
    n_cam = sum(cam_flags)
    n_sonar = sum(sonar_flags)
    if n_cam == 0 and n_sonar == 0:
        raise ValueError("no usable measurements for the configured loss")

    lc_total = 0.0
    ls_total = 0.0
    for vd, wants_cam, wants_sonar in zip(data, cam_flags, sonar_flags):
        if not wants_cam and not wants_sonar:
            continue
        splats = prepare_splats(cloud, vd.view, trace)
        if wants_cam:
            lc_total += _camera_pass(splats, vd, 1.0 / n_cam, grads, trace)
        if wants_sonar:
            ls_total += _sonar_pass(
                splats, vd, loss_cfg, sonar_cfg,
                loss_cfg.w / n_sonar, grads, trace,
            )
    lc = lc_total / n_cam if n_cam else 0.0
    ls = ls_total / n_sonar if n_sonar else 0.0
    total = lc + loss_cfg.w * ls
    return total, lc, ls


def fused_loss(
    cloud: GaussianCloud,
    data: Sequence[ViewData],
    loss_cfg: LossConfig,
    sonar_cfg: SonarConfig | None = None,
    trace: DecisionTrace | None = None,
) -> float:
    """Forward-only fused objective over a batch of measured views."""
    total, _, _ = _run(cloud, data, loss_cfg, sonar_cfg, None, trace)
    return total


def backward_detailed(
    cloud: GaussianCloud,
    data: Sequence[ViewData],
    loss_cfg: LossConfig,
    sonar_cfg: SonarConfig | None = None,
) -> tuple[float, float, float, CloudGradients]:
    """Like :func:`backward` but also reports the loss components."""
    grads = CloudGradients.zeros(len(cloud))
    total, lc, ls = _run(cloud, data, loss_cfg, sonar_cfg, grads, None)
    if not np.isfinite(total):
        raise FloatingPointError(f"non-finite loss {total}")
    return total, lc, ls, grads


def backward(
    cloud: GaussianCloud,
    data: Sequence[ViewData],
    loss_cfg: LossConfig,
    sonar_cfg: SonarConfig | None = None,
) -> tuple[float, CloudGradients]:
    """Fused loss and its analytic gradients for all raw parameters.

    Sonar terms contribute no color gradient and culled Gaussians receive
    exact zeros.  Raises on a non-finite loss.
    """
    total, _, _, grads = backward_detailed(cloud, data, loss_cfg, sonar_cfg)
    return total, grads


def loss_components(
    cloud, data, loss_cfg, sonar_cfg=None
) -> tuple[float, float, float]:
    """(total, camera, sonar) loss values without gradients."""
    return _run(cloud, data, loss_cfg, sonar_cfg, None, None)


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------

def finite_diff_grad(
    objective: Callable[[GaussianCloud], float],
    cloud: GaussianCloud,
    h: float,
) -> CloudGradients:
    """Central finite differences of a scalar objective per raw coordinate."""
    if h <= 0:
        raise ValueError("step size must be positive")
    work = cloud.copy()
    grads = CloudGradients.zeros(len(cloud))
    for name in GaussianCloud.FIELDS:
        flat = getattr(work, name).reshape(-1)
        gflat = grads.arrays()[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = objective(work)
            flat[i] = orig - h
            fm = objective(work)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError("non-finite objective in finite differences")
            gflat[i] = (fp - fm) / (2.0 * h)
    return grads


@dataclass
class GradCheckReport:
    """Outcome of an analytic-vs-numeric gradient comparison."""

    n_total: int = 0
    n_kink: int = 0
    n_pass: int = 0
    max_err: float = 0.0
    failures: list = field(default_factory=list)

    @property
    def n_checked(self) -> int:
        return self.n_total - self.n_kink

    @property
    def pass_fraction(self) -> float:
        return self.n_pass / self.n_checked if self.n_checked else 1.0


def check_gradients(
    cloud: GaussianCloud,
    data: Sequence[ViewData],
    loss_cfg: LossConfig,
    sonar_cfg: SonarConfig | None = None,
    h: float = 1e-4,
    rtol: float = 1e-3,
    atol: float = 1e-7,
) -> GradCheckReport:
    """Compare backward() against central differences, coordinate by
    coordinate, excluding coordinates whose +/-h evaluations disagree on
    any discrete rendering decision (straddled kinks)."""
    _, analytic = backward(cloud, data, loss_cfg, sonar_cfg)
    report = GradCheckReport()
    work = cloud.copy()

    def traced(c):
        t = DecisionTrace()
        val = fused_loss(c, data, loss_cfg, sonar_cfg, trace=t)
        return val, t.digest()

    for name in GaussianCloud.FIELDS:
        flat = getattr(work, name).reshape(-1)
        aflat = analytic.arrays()[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp, sig_p = traced(work)
            flat[i] = orig - h
            fm, sig_m = traced(work)
            flat[i] = orig
            report.n_total += 1
            if sig_p != sig_m:
                report.n_kink += 1
                continue
            num = (fp - fm) / (2.0 * h)
            err = abs(num - aflat[i])
            tol = max(atol, rtol * max(abs(num), abs(aflat[i])))
            report.max_err = max(report.max_err, err)
            if err <= tol:
                report.n_pass += 1
            else:
                report.failures.append((name, i, float(aflat[i]), float(num)))
    return report
