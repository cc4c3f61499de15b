"""Optimizable Gaussian scene parameters: storage, activation, initialization.

Raw parameters are kept in unconstrained form and activated on use:
``scale = exp(log_scale)``, ``opacity = logistic(logit)``,
``rgb = clamp(SH_C0 * color + 0.5, 0, 1)`` (degree-0 spherical harmonics).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .geometry import quat_to_rot

if TYPE_CHECKING:  # pragma: no cover
    from .render import TransientHistogram

# Degree-0 spherical harmonics basis constant.
SH_C0 = 0.28209479177387814

CHECKPOINT_MAGIC = b"ZSPL"
CHECKPOINT_VERSION = 1


@dataclass
class SensorView:
    """Pinhole camera pose and intrinsics, shared by the collocated sonar.

    ``rotation`` / ``translation`` define the world-to-camera transform
    ``x_cam = R @ x_world + t``; ``fx, fy, cx, cy`` are in pixels.
    """

    rotation: np.ndarray
    translation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    def camera_center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def resized(self, width: int, height: int) -> "SensorView":
        """Same pose and field of view at a different raster resolution."""
        sx = width / self.width
        sy = height / self.height
        return SensorView(
            rotation=self.rotation.copy(),
            translation=self.translation.copy(),
            fx=self.fx * sx,
            fy=self.fy * sy,
            cx=self.cx * sx,
            cy=self.cy * sy,
            width=width,
            height=height,
        )

    @classmethod
    def look_at(
        cls,
        eye: Sequence[float],
        target: Sequence[float],
        up: Sequence[float] = (0.0, 1.0, 0.0),
        fov_deg: float = 50.0,
        width: int = 64,
        height: int = 64,
    ) -> "SensorView":
        """Camera at ``eye`` looking toward ``target``.

        ``fov_deg`` is the horizontal field of view.  Image row index
        increases along the camera y axis (aligned with ``up``).
        """
        eye = np.asarray(eye, dtype=float)
        fwd = np.asarray(target, dtype=float) - eye
        n = np.linalg.norm(fwd)
        if n == 0:
            raise ValueError("eye and target coincide")
        z = fwd / n
        up = np.asarray(up, dtype=float)
        x = np.cross(up, z)
        nx = np.linalg.norm(x)
        if nx < 1e-12:
            raise ValueError("up vector parallel to viewing direction")
        x = x / nx
        y = np.cross(z, x)
        rot = np.stack([x, y, z])  # rows = camera axes in world coords
        trans = -rot @ eye
        fx = 0.5 * width / np.tan(np.radians(fov_deg) / 2.0)
        return cls(
            rotation=rot,
            translation=trans,
            fx=fx,
            fy=fx,
            cx=width / 2.0,
            cy=height / 2.0,
            width=width,
            height=height,
        )

    def to_dict(self) -> dict:
        return {
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SensorView":
        return cls(
            rotation=np.array(d["rotation"], dtype=float),
            translation=np.array(d["translation"], dtype=float),
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            width=int(d["width"]),
            height=int(d["height"]),
        )


@dataclass
class GaussianCloud:
    """Raw optimizable parameters of N anisotropic 3D Gaussians."""

    means: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    quats: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    log_scales: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    opacity_logits: np.ndarray = field(default_factory=lambda: np.zeros(0))
    colors: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=float).reshape(-1, 3)
        self.quats = np.asarray(self.quats, dtype=float).reshape(-1, 4)
        self.log_scales = np.asarray(self.log_scales, dtype=float).reshape(-1, 3)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=float).reshape(-1)
        self.colors = np.asarray(self.colors, dtype=float).reshape(-1, 3)
        n = len(self.means)
        for arr in (self.quats, self.log_scales, self.opacity_logits, self.colors):
            if len(arr) != n:
                raise ValueError("all parameter arrays must share length N")

    def __len__(self) -> int:
        return len(self.means)

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            self.means.copy(),
            self.quats.copy(),
            self.log_scales.copy(),
            self.opacity_logits.copy(),
            self.colors.copy(),
        )

    # Array-of-fields view used by the optimizer and gradient code.
    FIELDS = ("means", "quats", "log_scales", "opacity_logits", "colors")

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.FIELDS}


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=float)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def activate(cloud: GaussianCloud, index: int):
    """Activated parameters of one Gaussian.

    Returns ``(mean, rotation, scale, opacity, rgb)`` with ``rotation`` a
    3x3 matrix, ``scale > 0`` per axis, ``opacity`` in (0, 1) and ``rgb``
    clamped to [0, 1].
    """
    if index >= len(cloud):
        raise IndexError(index)
    mean = cloud.means[index].copy()
    rotation = quat_to_rot(cloud.quats[index])
    scale = np.exp(cloud.log_scales[index])
    opacity = float(sigmoid(np.asarray(cloud.opacity_logits[index])))
    rgb = np.clip(SH_C0 * cloud.colors[index] + 0.5, 0.0, 1.0)
    return mean, rotation, scale, opacity, rgb


def deactivate(mean, rotation, scale, opacity, rgb):
    """Inverse of :func:`activate` on valid open ranges.

    ``opacity`` and ``rgb`` must lie strictly inside (0, 1); ``scale``
    must be positive; ``rotation`` must be a proper rotation.  The
    returned quaternion is the canonical (w >= 0) representative.
    """
    mean = np.asarray(mean, dtype=float)
    scale = np.asarray(scale, dtype=float)
    rgb = np.asarray(rgb, dtype=float)
    if np.any(scale <= 0):
        raise ValueError("scale must be positive")
    if not (0.0 < opacity < 1.0):
        raise ValueError("opacity must be in (0, 1)")
    if np.any(rgb <= 0.0) or np.any(rgb >= 1.0):
        raise ValueError("rgb must be strictly inside (0, 1)")
    quat = rotation_to_quat(np.asarray(rotation, dtype=float))
    log_scale = np.log(scale)
    logit = float(np.log(opacity / (1.0 - opacity)))
    sh = (rgb - 0.5) / SH_C0
    return mean, quat, log_scale, logit, sh


def rotation_to_quat(rot: np.ndarray) -> np.ndarray:
    """Extract the canonical (w >= 0) unit quaternion from a rotation matrix."""
    m = np.asarray(rot, dtype=float)
    tr = np.trace(m)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2.0
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s,
             (m[1, 0] - m[0, 1]) / s]
        )
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
        q = np.array(
            [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s,
             (m[0, 2] + m[2, 0]) / s]
        )
    elif m[1, 1] > m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
        q = np.array(
            [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s,
             (m[1, 2] + m[2, 1]) / s]
        )
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
        q = np.array(
            [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s,
             (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        )
    q = q / np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    return q


def _random_unit_quats(rng: np.random.Generator, n: int) -> np.ndarray:
    q = rng.standard_normal((n, 4))
    norms = np.linalg.norm(q, axis=1, keepdims=True)
    # Degenerate draws are essentially impossible; guard anyway.
    bad = norms[:, 0] < 1e-12
    q[bad] = (1.0, 0.0, 0.0, 0.0)
    norms[bad] = 1.0
    return q / norms


DEFAULT_OPACITY = 0.1


def init_random(n: int, bounds, seed: int) -> GaussianCloud:
    """Seeded random cloud: uniform means in an axis-aligned box.

    Quaternions are uniform on the unit sphere, scales isotropic at
    roughly (box diagonal) / n^(1/3) / 3, opacities start at 0.1 and
    colors at mid-gray.
    """
    if n < 1:
        raise ValueError("need at least one Gaussian")
    lo, hi = np.asarray(bounds, dtype=float).reshape(2, 3)
    if np.any(hi <= lo):
        raise ValueError("degenerate bounding box")
    rng = np.random.default_rng(seed)
    means = rng.uniform(lo, hi, size=(n, 3))
    quats = _random_unit_quats(rng, n)
    diag = float(np.linalg.norm(hi - lo))
    sigma = diag / (n ** (1.0 / 3.0)) / 3.0
    log_scales = np.full((n, 3), np.log(sigma))
    logit = float(np.log(DEFAULT_OPACITY / (1.0 - DEFAULT_OPACITY)))
    opacity_logits = np.full(n, logit)
    colors = np.zeros((n, 3))
    return GaussianCloud(means, quats, log_scales, opacity_logits, colors)


def init_from_transient(
    base: GaussianCloud,
    transients: Sequence[tuple[SensorView, "TransientHistogram"]],
    n_extra: int,
    seed: int,
) -> GaussianCloud:
    """Append Gaussians seeded where transient measurements carry energy.

    Each new Gaussian samples a view uniformly, a range bin with
    probability proportional to the histogram value, and an image-plane
    position uniformly inside the view's frustum cross-section; the mean
    is placed at the bin-center range along the sampled ray.
    """
    if n_extra == 0:
        return base.copy()
    if not transients:
        raise ValueError("no transient measurements supplied")
    rng = np.random.default_rng(seed)
    probs = []
    for _, hist in transients:
        v = np.asarray(hist.values, dtype=float)
        if np.any(v < 0):
            raise ValueError("transient histogram has negative entries")
        total = v.sum()
        if total <= 0:
            raise ValueError("transient histogram has zero total mass")
        probs.append(v / total)

    view_ids = rng.integers(0, len(transients), size=n_extra)
    means = np.empty((n_extra, 3))
    bin_widths = np.empty(n_extra)
    for k in range(n_extra):
        view, hist = transients[view_ids[k]]
        b = rng.choice(len(probs[view_ids[k]]), p=probs[view_ids[k]])
        delta = hist.bin_width
        r = hist.range_min + (b + 0.5) * delta
        u = rng.uniform(0.0, view.width)
        v = rng.uniform(0.0, view.height)
        d = np.array([(u - view.cx) / view.fx, (v - view.cy) / view.fy, 1.0])
        d /= np.linalg.norm(d)
        cam = r * d
        means[k] = view.rotation.T @ (cam - view.translation)
        bin_widths[k] = delta

    quats = _random_unit_quats(rng, n_extra)
    lo = means.min(axis=0)
    hi = means.max(axis=0)
    diag = float(np.linalg.norm(hi - lo))
    sigma = diag / (n_extra ** (1.0 / 3.0)) / 3.0
    if not np.isfinite(sigma) or sigma < 1e-9:
        sigma = float(bin_widths.mean())
    log_scales = np.full((n_extra, 3), np.log(sigma))
    logit = float(np.log(DEFAULT_OPACITY / (1.0 - DEFAULT_OPACITY)))
    return GaussianCloud(
        np.concatenate([base.means, means]),
        np.concatenate([base.quats, quats]),
        np.concatenate([base.log_scales, log_scales]),
        np.concatenate([base.opacity_logits, np.full(n_extra, logit)]),
        np.concatenate([base.colors, np.zeros((n_extra, 3))]),
    )


# ---------------------------------------------------------------------------
# Checkpoint and point-cloud I/O
# ---------------------------------------------------------------------------

def save_checkpoint(cloud: GaussianCloud, path) -> None:
    """Binary little-endian checkpoint: magic, version, N, then the five
    parameter arrays in declaration order as float32."""
    n = len(cloud)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", n))
        for name in GaussianCloud.FIELDS:
            f.write(np.ascontiguousarray(getattr(cloud, name), dtype="<f4").tobytes())


def load_checkpoint(path) -> GaussianCloud:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a cloud checkpoint: bad magic {magic!r}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (n,) = struct.unpack("<Q", f.read(8))
        shapes = {"means": (n, 3), "quats": (n, 4), "log_scales": (n, 3),
                  "opacity_logits": (n,), "colors": (n, 3)}
        arrays = {}
        for name in GaussianCloud.FIELDS:
            count = int(np.prod(shapes[name]))
            buf = f.read(4 * count)
            if len(buf) != 4 * count:
                raise ValueError("truncated checkpoint")
            arrays[name] = np.frombuffer(buf, dtype="<f4").astype(float).reshape(
                shapes[name]
            )
    return GaussianCloud(**arrays)


def save_ply(path, points: np.ndarray, colors: np.ndarray | None = None) -> None:
    """Write an ASCII PLY point cloud (positions, optional uint8 colors)."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    lines = ["ply", "format ascii 1.0", f"element vertex {len(points)}",
             "property float x", "property float y", "property float z"]
    if colors is not None:
        colors = np.clip(np.asarray(colors, dtype=float).reshape(-1, 3), 0, 1)
        lines += ["property uchar red", "property uchar green", "property uchar blue"]
    lines.append("end_header")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
        for i, p in enumerate(points):
            row = f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g}"
            if colors is not None:
                c = (colors[i] * 255.0 + 0.5).astype(int)
                row += f" {c[0]} {c[1]} {c[2]}"
            f.write(row + "\n")


def load_ply(path) -> np.ndarray:
    """Read vertex positions from an ASCII PLY file."""
    with open(path) as f:
        header = []
        line = f.readline().strip()
        if line != "ply":
            raise ValueError("not a PLY file")
        n = None
        while True:
            line = f.readline()
            if not line:
                raise ValueError("truncated PLY header")
            line = line.strip()
            header.append(line)
            if line.startswith("element vertex"):
                n = int(line.split()[-1])
            if line == "end_header":
                break
        if n is None:
            raise ValueError("PLY file has no vertex element")
        pts = np.empty((n, 3))
        for i in range(n):
            parts = f.readline().split()
            pts[i] = [float(parts[0]), float(parts[1]), float(parts[2])]
    return pts


def export_cloud_ply(cloud: GaussianCloud, path) -> None:
    """Export Gaussian means and activated colors as an ASCII PLY cloud."""
    rgb = np.clip(SH_C0 * cloud.colors + 0.5, 0.0, 1.0)
    save_ply(path, cloud.means, rgb)
