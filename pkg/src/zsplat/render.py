"""Forward splatting of three sensor modalities from a Gaussian cloud.

The camera render composites 2D footprints front-to-back per pixel.  The
sonar renders reuse the same per-ray compositing on a coarse ray grid and
deposit each splat's visibility-weighted mass into range bins along the
depth axis (one histogram for a single-beam echosounder, one histogram
per azimuth row for a forward-looking sonar).

All heavy lifting happens on flat "entry" arrays, one entry per
(splat, covered pixel) pair, so renders and their gradients are plain
vectorized numpy with deterministic reductions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .geometry import COV_EPS, Z_NEAR
from .scene import GaussianCloud, SensorView, SH_C0, sigmoid

# Compositing constants (alpha clamp, contribution floor, stop threshold).
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_STOP = 1e-4
_LOG_T_STOP = math.log(T_STOP)


# ---------------------------------------------------------------------------
# Data containers
# ---------------------------------------------------------------------------

@dataclass
class RenderedImage:
    """Camera render: RGB in [0, 1] plus per-pixel final transmittance."""

    pixels: np.ndarray
    final_transmittance: np.ndarray


@dataclass
class TransientHistogram:
    """Intensity versus range, in ``bins`` equal bins over [range_min, range_max]."""

    values: np.ndarray
    range_min: float
    range_max: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(-1)
        if self.range_max <= self.range_min:
            raise ValueError("range_max must exceed range_min")
        if self.range_min < 0:
            raise ValueError("range_min must be nonnegative")
        if np.any(self.values < 0):
            raise ValueError("histogram values must be nonnegative")

    @property
    def bins(self) -> int:
        return len(self.values)

    @property
    def bin_width(self) -> float:
        return (self.range_max - self.range_min) / self.bins

    def bin_centers(self) -> np.ndarray:
        return self.range_min + (np.arange(self.bins) + 0.5) * self.bin_width


@dataclass
class FlsImage:
    """Forward-looking sonar image: intensity over (azimuth row, range bin)."""

    values: np.ndarray
    range_min: float
    range_max: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise ValueError("FLS values must be 2-D (rows x bins)")
        if self.range_max <= self.range_min:
            raise ValueError("range_max must exceed range_min")
        if np.any(self.values < 0):
            raise ValueError("FLS values must be nonnegative")

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def bins(self) -> int:
        return self.values.shape[1]

    @property
    def bin_width(self) -> float:
        return (self.range_max - self.range_min) / self.bins


@dataclass
class SonarConfig:
    """Range binning and ray-grid settings shared by both sonar models."""

    bins: int = 128
    range_min: float = 0.5
    range_max: float = 4.0
    ray_grid: tuple[int, int] = (64, 64)  # (height, width)
    rows: int = 32  # azimuth rows, FLS only

    def __post_init__(self):
        if self.bins < 1:
            raise ValueError("need at least one range bin")
        if self.range_max <= self.range_min:
            raise ValueError("range_max must exceed range_min")
        h, w = self.ray_grid
        if h < 1 or w < 1:
            raise ValueError("ray grid must be at least 1x1")
        if self.rows < 1:
            raise ValueError("need at least one azimuth row")

    @property
    def bin_width(self) -> float:
        return (self.range_max - self.range_min) / self.bins

    def bin_centers(self) -> np.ndarray:
        return self.range_min + (np.arange(self.bins) + 0.5) * self.bin_width

    def to_dict(self) -> dict:
        return {
            "bins": self.bins,
            "range_min": self.range_min,
            "range_max": self.range_max,
            "ray_grid": list(self.ray_grid),
            "rows": self.rows,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SonarConfig":
        return cls(
            bins=int(d["bins"]),
            range_min=float(d["range_min"]),
            range_max=float(d["range_max"]),
            ray_grid=(int(d["ray_grid"][0]), int(d["ray_grid"][1])),
            rows=int(d["rows"]),
        )


@dataclass
class Raster:
    """Target raster: resolution plus pinhole intrinsics in its pixel units."""

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float

    def key(self) -> tuple:
        return (self.width, self.height, self.fx, self.fy, self.cx, self.cy)


def _native_raster(view: SensorView) -> Raster:
    return Raster(view.width, view.height, view.fx, view.fy, view.cx, view.cy)


def _sonar_raster(view: SensorView, cfg: SonarConfig) -> Raster:
    h, w = cfg.ray_grid
    v = view.resized(w, h)
    return Raster(w, h, v.fx, v.fy, v.cx, v.cy)


# ---------------------------------------------------------------------------
# Decision trace: order-sensitive hash of every discrete branch taken while
# rendering, used by the finite-difference oracle to detect straddled kinks.
# ---------------------------------------------------------------------------

_MIX1 = np.uint64(0x9E3779B97F4A7C15)
_MIX2 = np.uint64(0xBF58476D1CE4E5B9)
_MIX3 = np.uint64(0x94D049BB133111EB)


class DecisionTrace:
    """Accumulates a hash of discrete rendering decisions.

    Two renders of the same pipeline produce equal digests iff every
    discrete choice (culling, sort order, skip/clamp/stop sets, bin
    windows, row assignments, sign patterns) agreed.
    """

    def __init__(self):
        self._h = np.uint64(0)
        self._calls = 0

    def add(self, tag: int, values: np.ndarray) -> None:
        v = np.asarray(values)
        if v.dtype != np.uint64:
            v = v.astype(np.int64).astype(np.uint64)
        v = v.ravel()
        with np.errstate(over="ignore"):
            x = v * _MIX1
            x += np.arange(v.size, dtype=np.uint64) * _MIX2
            x += np.uint64(tag * 0x2545F491 + self._calls * 0x9E3779B9)
            x ^= x >> np.uint64(30)
            x *= _MIX2
            x ^= x >> np.uint64(27)
            x *= _MIX3
            x ^= x >> np.uint64(31)
            self._h += x.sum(dtype=np.uint64) + np.uint64(v.size + 1)
        self._calls += 1

    def digest(self) -> int:
        return int(self._h) ^ (self._calls << 1)


# ---------------------------------------------------------------------------
# Splat preparation
# ---------------------------------------------------------------------------

@dataclass
class _Binding:
    """Splat footprints bound to one raster (means/covs in its pixel units)."""

    raster: Raster
    kept: np.ndarray      # indices into the SplatList order
    u: np.ndarray         # (K,) pixel x of splat centers
    v: np.ndarray         # (K,) pixel y
    cov: np.ndarray       # (K, 3) packed 2D covariance (a, b, c)
    conic: np.ndarray     # (K, 3) packed inverse covariance
    x0: np.ndarray        # (K,) bbox column range [x0, x1)
    x1: np.ndarray
    y0: np.ndarray        # (K,) bbox row range [y0, y1)
    y1: np.ndarray


@dataclass
class SplatList:
    """Depth-sorted, culled splats for one view.

    Entries behind the near plane are absent; ``indices`` maps each splat
    back to its source Gaussian.  Ray-space quantities are raster
    independent; footprints for the view's native raster are exposed as
    ``pixel_means`` / ``conics`` and footprints for other rasters (the
    sonar ray grid) are derived on demand.
    """

    view: SensorView
    indices: np.ndarray       # (K,) source Gaussian index, ascending depth
    depths: np.ndarray        # (K,) Euclidean camera distance (sort key)
    mu_cam: np.ndarray        # (K, 3)
    sigma_cam: np.ndarray     # (K, 3, 3)
    mu_prime: np.ndarray      # (K, 3) ray-space means
    sigma_prime: np.ndarray   # (K, 3, 3)
    sigma_z: np.ndarray       # (K,) depth variance (regularized)
    opacities: np.ndarray     # (K,) activated
    colors: np.ndarray        # (K, 3) activated RGB
    # activation intermediates, kept for the analytic backward pass
    act_scales: np.ndarray    # (K, 3)
    rotations: np.ndarray     # (K, 3, 3)
    q_hat: np.ndarray         # (K, 4) normalized quaternions
    q_norm: np.ndarray        # (K,) raw quaternion norms
    color_open: np.ndarray    # (K, 3) True where the RGB clamp is inactive
    _bindings: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.indices)

    def binding(self, raster: Raster) -> _Binding:
        key = raster.key()
        b = self._bindings.get(key)
        if b is None:
            b = _bind(self, raster)
            self._bindings[key] = b
        return b

    # Convenience views of the native-raster binding (the spec surface).
    @property
    def native(self) -> _Binding:
        return self.binding(_native_raster(self.view))

    @property
    def pixel_means(self) -> np.ndarray:
        b = self.native
        return np.stack([b.u, b.v], axis=-1)

    @property
    def conics(self) -> np.ndarray:
        return self.native.conic


def prepare_splats(
    cloud: GaussianCloud, view: SensorView, trace: DecisionTrace | None = None
) -> SplatList:
    """Activate, transform to ray space and depth-sort a cloud for one view."""
    n = len(cloud)
    if n:
        rot = geometry.quat_to_rot(cloud.quats)
        q_norm = np.linalg.norm(cloud.quats, axis=1)
        q_hat = cloud.quats / q_norm[:, None]
        scales = np.exp(cloud.log_scales)
        opac = sigmoid(cloud.opacity_logits)
        rgb_raw = SH_C0 * cloud.colors + 0.5
        rgb = np.clip(rgb_raw, 0.0, 1.0)
        color_open = (rgb_raw > 0.0) & (rgb_raw < 1.0)
        sigma_w = geometry.build_covariance(scales, rot)
        mu_cam, sigma_cam = geometry.to_camera(cloud.means, sigma_w, view)
        visible = mu_cam[:, 2] > Z_NEAR
    else:
        visible = np.zeros(0, dtype=bool)
    if trace is not None:
        trace.add(1, visible)

    idx = np.flatnonzero(visible)
    if len(idx) == 0:
        empty3 = np.zeros((0, 3))
        return SplatList(
            view=view,
            indices=idx,
            depths=np.zeros(0),
            mu_cam=empty3,
            sigma_cam=np.zeros((0, 3, 3)),
            mu_prime=empty3,
            sigma_prime=np.zeros((0, 3, 3)),
            sigma_z=np.zeros(0),
            opacities=np.zeros(0),
            colors=empty3.copy(),
            act_scales=empty3.copy(),
            rotations=np.zeros((0, 3, 3)),
            q_hat=np.zeros((0, 4)),
            q_norm=np.zeros(0),
            color_open=np.zeros((0, 3), dtype=bool),
        )

    depths = np.linalg.norm(mu_cam[idx], axis=1)
    order = np.argsort(depths, kind="stable")
    idx = idx[order]
    depths = depths[order]
    if trace is not None:
        trace.add(2, idx)

    rs = geometry.to_ray_space(mu_cam[idx], sigma_cam[idx])
    return SplatList(
        view=view,
        indices=idx,
        depths=depths,
        mu_cam=mu_cam[idx],
        sigma_cam=sigma_cam[idx],
        mu_prime=rs.mu_prime,
        sigma_prime=rs.sigma_prime,
        sigma_z=rs.sigma_prime[:, 2, 2] + COV_EPS,
        opacities=opac[idx],
        colors=rgb[idx],
        act_scales=scales[idx],
        rotations=rot[idx],
        q_hat=q_hat[idx],
        q_norm=q_norm[idx],
        color_open=color_open[idx],
    )


def _bind(splats: SplatList, raster: Raster) -> _Binding:
    """Convert ray-space splats to one raster's pixel units and cull
    footprints whose 3-sigma box misses the image."""
    k = len(splats)
    fx, fy = raster.fx, raster.fy
    u = fx * splats.mu_prime[:, 0] + raster.cx
    v = fy * splats.mu_prime[:, 1] + raster.cy
    a = fx * fx * splats.sigma_prime[:, 0, 0] + COV_EPS
    b = fx * fy * splats.sigma_prime[:, 0, 1]
    c = fy * fy * splats.sigma_prime[:, 1, 1] + COV_EPS

    rx = 3.0 * np.sqrt(a)
    ry = 3.0 * np.sqrt(c)
    # Pixel (i, j) has its center at (j + 0.5, i + 0.5).
    x0 = np.ceil(u - rx - 0.5).astype(np.int64)
    x1 = np.floor(u + rx - 0.5).astype(np.int64) + 1
    y0 = np.ceil(v - ry - 0.5).astype(np.int64)
    y1 = np.floor(v + ry - 0.5).astype(np.int64) + 1
    np.clip(x0, 0, raster.width, out=x0)
    np.clip(x1, 0, raster.width, out=x1)
    np.clip(y0, 0, raster.height, out=y0)
    np.clip(y1, 0, raster.height, out=y1)
    kept = np.flatnonzero((x1 > x0) & (y1 > y0))

    a, b, c = a[kept], b[kept], c[kept]
    det = a * c - b * b
    conic = np.stack([c / det, -b / det, a / det], axis=-1)
    return _Binding(
        raster=raster,
        kept=kept,
        u=u[kept],
        v=v[kept],
        cov=np.stack([a, b, c], axis=-1),
        conic=conic,
        x0=x0[kept],
        x1=x1[kept],
        y0=y0[kept],
        y1=y1[kept],
    )


# ---------------------------------------------------------------------------
# Entry-based front-to-back compositing
# ---------------------------------------------------------------------------

@dataclass
class _Graph:
    """Forward compositing cache: one entry per surviving (splat, pixel)."""

    binding: _Binding
    n_kept: int
    pix: np.ndarray        # (E,) flat pixel id, ascending; depth order within pixel
    es: np.ndarray         # (E,) kept-splat index
    dx: np.ndarray         # (E,) pixel center minus splat center
    dy: np.ndarray
    g: np.ndarray          # (E,) unnormalized footprint value
    alpha: np.ndarray      # (E,) clamped alpha
    clamped: np.ndarray    # (E,) bool
    t_excl: np.ndarray     # (E,) transmittance in front of each entry
    contrib: np.ndarray    # (E,) bool, False once the ray is saturated
    seg_id: np.ndarray     # (E,) pixel-segment index
    idx_first: np.ndarray  # (S,) first entry of each segment
    final_t: np.ndarray    # (H*W,) transmittance after compositing


def _segment_structure(pix: np.ndarray):
    e = len(pix)
    first = np.ones(e, dtype=bool)
    if e:
        first[1:] = pix[1:] != pix[:-1]
    idx_first = np.flatnonzero(first)
    seg_id = np.cumsum(first) - 1
    return seg_id, idx_first


def _seg_cumsum(values, seg_id, idx_first):
    """Per-segment inclusive cumulative sum."""
    cs = np.cumsum(values)
    base = np.zeros(len(idx_first))
    if len(idx_first) > 1:
        base[1:] = cs[idx_first[1:] - 1]
    return cs - base[seg_id]


def _seg_sum_after(values, seg_id, idx_first):
    """Per-segment sum of entries strictly after each entry."""
    incl = _seg_cumsum(values, seg_id, idx_first)
    totals = np.add.reduceat(values, idx_first) if len(idx_first) else np.zeros(0)
    return totals[seg_id] - incl


def _composite(
    binding: _Binding,
    opacities_kept: np.ndarray,
    trace: DecisionTrace | None = None,
) -> _Graph:
    """Front-to-back compositing of all bound footprints.

    Alphas below 1/255 are skipped, alphas clamp at 0.99, and a ray stops
    accepting contributions once its transmittance would drop below 1e-4.
    """
    r = binding.raster
    n_kept = len(binding.kept)
    if trace is not None:
        trace.add(3, binding.kept)
        trace.add(4, np.stack([binding.x0, binding.x1, binding.y0, binding.y1]))

    npix = r.width * r.height
    widths = binding.x1 - binding.x0
    areas = widths * (binding.y1 - binding.y0)
    total = int(areas.sum())
    if total == 0:
        empty = np.zeros(0)
        return _Graph(
            binding=binding, n_kept=n_kept,
            pix=np.zeros(0, dtype=np.int64), es=np.zeros(0, dtype=np.int64),
            dx=empty, dy=empty.copy(), g=empty.copy(), alpha=empty.copy(),
            clamped=np.zeros(0, dtype=bool), t_excl=empty.copy(),
            contrib=np.zeros(0, dtype=bool),
            seg_id=np.zeros(0, dtype=np.int64),
            idx_first=np.zeros(0, dtype=np.int64),
            final_t=np.ones(npix),
        )

    starts = np.zeros(len(areas), dtype=np.int64)
    np.cumsum(areas[:-1], out=starts[1:])
    es = np.repeat(np.arange(n_kept, dtype=np.int64), areas)
    off = np.arange(total, dtype=np.int64) - starts[es]
    w_s = widths[es]
    col = binding.x0[es] + off % w_s
    row = binding.y0[es] + off // w_s

    dx = col + 0.5 - binding.u[es]
    dy = row + 0.5 - binding.v[es]
    ca = binding.conic[es, 0]
    cb = binding.conic[es, 1]
    cc = binding.conic[es, 2]
    power = -0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy
    g = np.exp(power)
    alpha_raw = opacities_kept[es] * g
    clamped = alpha_raw > ALPHA_MAX
    alpha = np.where(clamped, ALPHA_MAX, alpha_raw)
    keep = alpha >= ALPHA_MIN
    if trace is not None:
        trace.add(5, keep)

    es, col, row = es[keep], col[keep], row[keep]
    dx, dy, g = dx[keep], dy[keep], g[keep]
    alpha, clamped = alpha[keep], clamped[keep]

    pix = row * r.width + col
    order = np.argsort(pix, kind="stable")  # keeps depth order within pixel
    pix, es = pix[order], es[order]
    dx, dy, g = dx[order], dy[order], g[order]
    alpha, clamped = alpha[order], clamped[order]

    seg_id, idx_first = _segment_structure(pix)
    l1m = np.log1p(-alpha)
    incl = _seg_cumsum(l1m, seg_id, idx_first)
    dead = incl < _LOG_T_STOP
    contrib = ~dead
    t_excl = np.exp(incl - l1m)
    if trace is not None:
        trace.add(6, clamped)
        trace.add(7, dead)

    final_t = np.ones(npix)
    if len(pix):
        acc = np.bincount(pix[contrib], weights=l1m[contrib], minlength=npix)
        final_t = np.exp(acc)

    return _Graph(
        binding=binding, n_kept=n_kept, pix=pix, es=es, dx=dx, dy=dy, g=g,
        alpha=alpha, clamped=clamped, t_excl=t_excl, contrib=contrib,
        seg_id=seg_id, idx_first=idx_first, final_t=final_t,
    )


def _accumulate_image(graph: _Graph, colors_kept: np.ndarray) -> np.ndarray:
    r = graph.binding.raster
    npix = r.width * r.height
    w = np.where(graph.contrib, graph.t_excl * graph.alpha, 0.0)
    img = np.zeros((npix, 3))
    for ch in range(3):
        img[:, ch] = np.bincount(
            graph.pix, weights=w * colors_kept[graph.es, ch], minlength=npix
        )
    return img.reshape(r.height, r.width, 3)


def _splat_mass(graph: _Graph) -> np.ndarray:
    """Sum of T*alpha over all rays, per kept splat (sonar visibility mass)."""
    w = np.where(graph.contrib, graph.t_excl * graph.alpha, 0.0)
    return np.bincount(graph.es, weights=w, minlength=graph.n_kept)


def _bin_windows(mu_z, sigma_z, cfg: SonarConfig):
    """Half-open bin index windows covering mu_z +/- 3 sqrt(sigma_z)."""
    delta = cfg.bin_width
    rad = 3.0 * np.sqrt(sigma_z)
    lo = np.ceil((mu_z - rad - cfg.range_min) / delta - 0.5).astype(np.int64)
    hi = np.floor((mu_z + rad - cfg.range_min) / delta - 0.5).astype(np.int64) + 1
    np.clip(lo, 0, cfg.bins, out=lo)
    np.clip(hi, 0, cfg.bins, out=hi)
    hi = np.maximum(hi, lo)
    return lo, hi


def _bin_entries(mu_z, sigma_z, cfg: SonarConfig, trace: DecisionTrace | None):
    """Flat (splat, bin) entries with Gaussian depth weights."""
    lo, hi = _bin_windows(mu_z, sigma_z, cfg)
    if trace is not None:
        trace.add(8, np.stack([lo, hi]))
    counts = hi - lo
    total = int(counts.sum())
    starts = np.zeros(len(counts), dtype=np.int64)
    if len(counts):
        np.cumsum(counts[:-1], out=starts[1:])
    sb = np.repeat(np.arange(len(counts), dtype=np.int64), counts)
    ib = lo[sb] + (np.arange(total, dtype=np.int64) - starts[sb])
    z = cfg.range_min + (ib + 0.5) * cfg.bin_width
    dzm = z - mu_z[sb]
    gw = np.exp(-(dzm * dzm) / (2.0 * sigma_z[sb]))
    return sb, ib, gw, dzm


def _fls_rows(binding: _Binding, cfg: SonarConfig) -> np.ndarray:
    """Azimuth row holding each splat's projected pixel-y center."""
    h = binding.raster.height
    j = np.floor(binding.v * cfg.rows / h).astype(np.int64)
    return np.clip(j, 0, cfg.rows - 1)


# ---------------------------------------------------------------------------
# Public renderers
# ---------------------------------------------------------------------------

def render_camera(
    cloud: GaussianCloud, view: SensorView, _splats: SplatList | None = None
) -> RenderedImage:
    """Composite the cloud into an RGB image over a black background."""
    splats = _splats if _splats is not None else prepare_splats(cloud, view)
    binding = splats.binding(_native_raster(view))
    graph = _composite(binding, splats.opacities[binding.kept])
    img = _accumulate_image(graph, splats.colors[binding.kept])
    ft = graph.final_t.reshape(view.height, view.width)
    return RenderedImage(pixels=img, final_transmittance=ft)


def _sonar_graph(splats: SplatList, cfg: SonarConfig, trace=None):
    binding = splats.binding(_sonar_raster(splats.view, cfg))
    graph = _composite(binding, splats.opacities[binding.kept], trace)
    return binding, graph


def _echo_values(splats: SplatList, binding, graph, cfg, trace=None) -> np.ndarray:
    mass = _splat_mass(graph)
    mu_z = splats.depths[binding.kept]
    sigma_z = splats.sigma_z[binding.kept]
    sb, ib, gw, _ = _bin_entries(mu_z, sigma_z, cfg, trace)
    n_rays = binding.raster.width * binding.raster.height
    return np.bincount(ib, weights=mass[sb] * gw, minlength=cfg.bins) / n_rays


def _fls_values(splats: SplatList, binding, graph, cfg, trace=None) -> np.ndarray:
    mass = _splat_mass(graph)
    mu_z = splats.depths[binding.kept]
    sigma_z = splats.sigma_z[binding.kept]
    sb, ib, gw, _ = _bin_entries(mu_z, sigma_z, cfg, trace)
    rows = _fls_rows(binding, cfg)
    if trace is not None:
        trace.add(9, rows)
    flat = rows[sb] * cfg.bins + ib
    n_rays = binding.raster.width * binding.raster.height
    out = np.bincount(flat, weights=mass[sb] * gw, minlength=cfg.rows * cfg.bins)
    return out.reshape(cfg.rows, cfg.bins) / n_rays


def render_echosounder(
    cloud: GaussianCloud,
    view: SensorView,
    cfg: SonarConfig,
    _splats: SplatList | None = None,
) -> TransientHistogram:
    """Render the depth-axis transient seen by a collocated echosounder.

    Visibility (T, alpha) is computed per ray of the configured grid
    exactly as in the camera render; each splat then spreads T*alpha over
    the range bins within three depth standard deviations of its center.
    The result is divided by the ray count so it is grid invariant.
    """
    splats = _splats if _splats is not None else prepare_splats(cloud, view)
    binding, graph = _sonar_graph(splats, cfg)
    values = _echo_values(splats, binding, graph, cfg)
    return TransientHistogram(values, cfg.range_min, cfg.range_max)


def render_fls(
    cloud: GaussianCloud,
    view: SensorView,
    cfg: SonarConfig,
    _splats: SplatList | None = None,
) -> FlsImage:
    """Render a forward-looking sonar image (azimuth rows x range bins).

    Identical traversal to the echosounder; each splat deposits into the
    azimuth row containing its projected pixel-y center.
    """
    splats = _splats if _splats is not None else prepare_splats(cloud, view)
    binding, graph = _sonar_graph(splats, cfg)
    values = _fls_values(splats, binding, graph, cfg)
    return FlsImage(values, cfg.range_min, cfg.range_max)


@dataclass
class RenderBundle:
    camera: RenderedImage | None = None
    echo: TransientHistogram | None = None
    fls: FlsImage | None = None


MODALITIES = ("camera", "echo", "fls")


def render_all(
    cloud: GaussianCloud,
    view: SensorView,
    modalities,
    cfg: SonarConfig | None = None,
) -> RenderBundle:
    """Render several modalities from one shared splat preparation."""
    modalities = set(modalities)
    if not modalities:
        raise ValueError("modality set must not be empty")
    unknown = modalities - set(MODALITIES)
    if unknown:
        raise ValueError(f"unknown modalities: {sorted(unknown)}")
    if modalities & {"echo", "fls"} and cfg is None:
        raise ValueError("sonar modalities require a SonarConfig")

    splats = prepare_splats(cloud, view)
    bundle = RenderBundle()
    if "camera" in modalities:
        bundle.camera = render_camera(cloud, view, _splats=splats)
    if modalities & {"echo", "fls"}:
        binding, graph = _sonar_graph(splats, cfg)
        if "echo" in modalities:
            values = _echo_values(splats, binding, graph, cfg)
            bundle.echo = TransientHistogram(values, cfg.range_min, cfg.range_max)
        if "fls" in modalities:
            values = _fls_values(splats, binding, graph, cfg)
            bundle.fls = FlsImage(values, cfg.range_min, cfg.range_max)
    return bundle
