"""Ground-truth data generator: procedural scenes, ray-traced RGB and depth,
and sonar synthesis by depth histogramming.

Depth maps hold the Euclidean camera-to-hit distance (what a
time-of-flight sensor measures), not the camera-z coordinate; misses are
marked with ``inf``.  Echosounder ground truth is the histogram of all
valid depths divided by the pixel count; FLS ground truth histograms
depth per group of image rows so one row represents one azimuth angle.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import runtime
from .dataset import (
    Dataset,
    ViewData,
    save_fls_csv,
    save_image_png,
    save_transient_csv,
    view_filename,
    write_manifest,
)
from .render import FlsImage, SonarConfig, TransientHistogram
from .scene import SensorView, save_ply

_EPS = 1e-9


@dataclass
class TriScene:
    """Triangle soup with per-triangle albedo."""

    triangles: np.ndarray  # (M, 3, 3) vertices
    albedo: np.ndarray     # (M, 3) in [0, 1]

    def __post_init__(self):
        self.triangles = np.asarray(self.triangles, dtype=float).reshape(-1, 3, 3)
        self.albedo = np.asarray(self.albedo, dtype=float).reshape(-1, 3)
        if len(self.triangles) == 0:
            raise ValueError("scene has no triangles")
        if len(self.albedo) != len(self.triangles):
            raise ValueError("one albedo per triangle required")
        if not np.all(np.isfinite(self.triangles)):
            raise ValueError("non-finite vertex")

    def __len__(self) -> int:
        return len(self.triangles)

    def merged(self, other: "TriScene") -> "TriScene":
        return TriScene(
            np.concatenate([self.triangles, other.triangles]),
            np.concatenate([self.albedo, other.albedo]),
        )

    def bounds(self) -> np.ndarray:
        pts = self.triangles.reshape(-1, 3)
        return np.stack([pts.min(axis=0), pts.max(axis=0)])

    def normals(self) -> np.ndarray:
        e1 = self.triangles[:, 1] - self.triangles[:, 0]
        e2 = self.triangles[:, 2] - self.triangles[:, 0]
        n = np.cross(e1, e2)
        lens = np.linalg.norm(n, axis=1, keepdims=True)
        lens[lens == 0] = 1.0
        return n / lens

    def tessellate(self, max_edge: float) -> np.ndarray:
        """Subdivide until every edge is at most ``max_edge``; return the
        unique vertices (the geometric ground-truth point cloud)."""
        tris = list(self.triangles)
        out = []
        while tris:
            t = tris.pop()
            e = np.linalg.norm(np.roll(t, -1, axis=0) - t, axis=1)
            if e.max() <= max_edge:
                out.append(t)
                continue
            m01 = 0.5 * (t[0] + t[1])
            m12 = 0.5 * (t[1] + t[2])
            m20 = 0.5 * (t[2] + t[0])
            tris.extend([
                np.stack([t[0], m01, m20]),
                np.stack([m01, t[1], m12]),
                np.stack([m20, m12, t[2]]),
                np.stack([m01, m12, m20]),
            ])
        pts = np.concatenate(out).reshape(-1, 3)
        return np.unique(np.round(pts, 9), axis=0)


# ---------------------------------------------------------------------------
# Procedural geometry
# ---------------------------------------------------------------------------

def make_plate(center, width, height, albedo=(0.9, 0.9, 0.9)) -> TriScene:
    """Axis-aligned rectangular plate in the plane z = center.z."""
    cx, cy, cz = np.asarray(center, dtype=float)
    hw, hh = width / 2.0, height / 2.0
    v = np.array([
        [cx - hw, cy - hh, cz], [cx + hw, cy - hh, cz],
        [cx + hw, cy + hh, cz], [cx - hw, cy + hh, cz],
    ])
    tris = np.stack([np.stack([v[0], v[1], v[2]]), np.stack([v[0], v[2], v[3]])])
    return TriScene(tris, np.tile(np.asarray(albedo, dtype=float), (2, 1)))


def make_box(lo, hi, albedo=(0.8, 0.8, 0.8)) -> TriScene:
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    x0, y0, z0 = lo
    x1, y1, z1 = hi
    c = np.array([
        [x0, y0, z0], [x1, y0, z0], [x1, y1, z0], [x0, y1, z0],
        [x0, y0, z1], [x1, y0, z1], [x1, y1, z1], [x0, y1, z1],
    ])
    quads = [
        (0, 1, 2, 3), (4, 6, 5, 7)[:4], (0, 4, 5, 1),
        (2, 6, 7, 3), (0, 3, 7, 4), (1, 5, 6, 2),
    ]
    quads[1] = (4, 7, 6, 5)
    tris = []
    for a, b, d, e in quads:
        tris.append(np.stack([c[a], c[b], c[d]]))
        tris.append(np.stack([c[a], c[d], c[e]]))
    tris = np.stack(tris)
    return TriScene(tris, np.tile(np.asarray(albedo, dtype=float), (12, 1)))


def make_sphere(center, radius, albedo=(0.8, 0.8, 0.8), subdivisions=2) -> TriScene:
    """Icosphere by midpoint subdivision."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=float)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    tris = [np.stack([verts[a], verts[b], verts[c]]) for a, b, c in faces]
    for _ in range(subdivisions):
        nxt = []
        for t in tris:
            m01 = t[0] + t[1]
            m12 = t[1] + t[2]
            m20 = t[2] + t[0]
            m01 /= np.linalg.norm(m01)
            m12 /= np.linalg.norm(m12)
            m20 /= np.linalg.norm(m20)
            nxt.extend([
                np.stack([t[0], m01, m20]), np.stack([m01, t[1], m12]),
                np.stack([m20, m12, t[2]]), np.stack([m01, m12, m20]),
            ])
        tris = nxt
    tris = np.stack(tris) * radius + np.asarray(center, dtype=float)
    return TriScene(tris, np.tile(np.asarray(albedo, dtype=float), (len(tris), 1)))


def make_cornell(center=(0.0, 0.0, 3.0), size=2.0) -> TriScene:
    """Open textureless box with colored side walls and an inner block."""
    cx, cy, cz = np.asarray(center, dtype=float)
    h = size / 2.0
    white = (0.85, 0.85, 0.85)
    scene = make_plate((cx, cy, cz + h), size, size, white)  # back wall
    # side walls as thin plates rotated via explicit vertices
    def wall(p0, p1, p2, p3, albedo):
        tris = np.stack([
            np.stack([p0, p1, p2]), np.stack([p0, p2, p3]),
        ])
        return TriScene(tris, np.tile(np.asarray(albedo, dtype=float), (2, 1)))

    zf, zb = cz - h, cz + h
    scene = scene.merged(wall(
        np.array([cx - h, cy - h, zf]), np.array([cx - h, cy - h, zb]),
        np.array([cx - h, cy + h, zb]), np.array([cx - h, cy + h, zf]),
        (0.8, 0.2, 0.2)))
    scene = scene.merged(wall(
        np.array([cx + h, cy - h, zf]), np.array([cx + h, cy + h, zf]),
        np.array([cx + h, cy + h, zb]), np.array([cx + h, cy - h, zb]),
        (0.2, 0.8, 0.2)))
    scene = scene.merged(wall(
        np.array([cx - h, cy - h, zf]), np.array([cx + h, cy - h, zf]),
        np.array([cx + h, cy - h, zb]), np.array([cx - h, cy - h, zb]),
        white))
    scene = scene.merged(wall(
        np.array([cx - h, cy + h, zf]), np.array([cx - h, cy + h, zb]),
        np.array([cx + h, cy + h, zb]), np.array([cx + h, cy + h, zf]),
        white))
    block = make_box(
        (cx - 0.25 * size, cy - 0.1 * size, cz - 0.05 * size),
        (cx + 0.05 * size, cy + 0.35 * size, cz + 0.3 * size),
        white,
    )
    return scene.merged(block)


def load_obj(path, albedo=(0.8, 0.8, 0.8)) -> TriScene:
    """Minimal OBJ import: v and (triangulated) f records."""
    verts = []
    faces = []
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
                for k in range(1, len(idx) - 1):
                    faces.append((idx[0], idx[k], idx[k + 1]))
    verts = np.asarray(verts, dtype=float)
    tris = np.stack([verts[list(face)] for face in faces])
    return TriScene(tris, np.tile(np.asarray(albedo, dtype=float), (len(tris), 1)))


NAMED_SCENES = {
    "plate": lambda: make_plate((0.0, 0.0, 3.0), 1.6, 1.2),
    "sphere": lambda: make_sphere((0.0, 0.0, 3.0), 0.6),
    "box": lambda: make_box((-0.5, -0.4, 2.6), (0.5, 0.4, 3.4)),
    "cornell": lambda: make_cornell(),
    "plate_box": lambda: make_plate((0.0, 0.0, 3.2), 2.0, 1.6).merged(
        make_box((-0.2, -0.3, 2.5), (0.35, 0.25, 2.9), (0.75, 0.75, 0.75))
    ),
}


def make_scene(name: str) -> TriScene:
    try:
        return NAMED_SCENES[name]()
    except KeyError:
        raise ValueError(
            f"unknown scene {name!r}; choose from {sorted(NAMED_SCENES)}"
        ) from None


# ---------------------------------------------------------------------------
# Ray tracing
# ---------------------------------------------------------------------------

def _pixel_rays(view: SensorView) -> np.ndarray:
    """Unit ray directions through all pixel centers, camera frame ->
    world frame, flattened row-major."""
    jj, ii = np.meshgrid(np.arange(view.width), np.arange(view.height))
    x = (jj.ravel() + 0.5 - view.cx) / view.fx
    y = (ii.ravel() + 0.5 - view.cy) / view.fy
    d = np.stack([x, y, np.ones_like(x)], axis=1)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d @ view.rotation  # rows: R^T @ d

def _trace_block(origin, dirs, scene: TriScene):
    """Nearest-hit distances and triangle ids for a block of rays."""
    p = len(dirs)
    best_t = np.full(p, np.inf)
    best_id = np.full(p, -1, dtype=np.int64)
    for m in range(len(scene)):
        v0, v1, v2 = scene.triangles[m]
        e1 = v1 - v0
        e2 = v2 - v0
        pvec = np.cross(dirs, e2)
        det = pvec @ e1
        ok = np.abs(det) > _EPS
        if not ok.any():
            continue
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        tvec = origin - v0
        u = (pvec @ tvec) * inv
        qvec = np.cross(tvec, e1)
        v = (dirs @ qvec) * inv
        t = (e2 @ qvec) * inv
        hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1.0) & (t > _EPS) & (t < best_t)
        best_t[hit] = t[hit]
        best_id[hit] = m
    return best_t, best_id


def _trace(view: SensorView, scene: TriScene, threads: int | None = None):
    dirs = _pixel_rays(view)
    origin = view.camera_center()
    n_threads = runtime.get_threads() if threads is None else threads
    p = len(dirs)
    if n_threads <= 1 or p < 4096:
        t, tid = _trace_block(origin, dirs, scene)
    else:
        blocks = np.array_split(np.arange(p), n_threads)
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            results = list(
                pool.map(lambda b: _trace_block(origin, dirs[b], scene), blocks)
            )
        t = np.concatenate([r[0] for r in results])
        tid = np.concatenate([r[1] for r in results])
    shape = (view.height, view.width)
    return t.reshape(shape), tid.reshape(shape)


def trace_depth(
    view: SensorView, scene: TriScene, threads: int | None = None
) -> np.ndarray:
    """Euclidean camera-to-hit distance per pixel; ``inf`` marks misses."""
    t, _ = _trace(view, scene, threads)
    return t


AMBIENT = 0.1


def shade_rgb(
    view: SensorView,
    scene: TriScene,
    light=(0.3, -0.6, -0.75),
    threads: int | None = None,
) -> np.ndarray:
    """Lambertian shading ``albedo * (max(0, n.l) + 0.1)`` over black.

    ``light`` points from the surface toward the light source; normals
    are flipped toward the camera so geometry is double sided.
    """
    t, tid = _trace(view, scene, threads)
    img = np.zeros((view.height, view.width, 3))
    hit = np.isfinite(t)
    if not hit.any():
        return img
    l = np.asarray(light, dtype=float)
    l = l / np.linalg.norm(l)
    normals = scene.normals()
    dirs = _pixel_rays(view).reshape(view.height, view.width, 3)
    n = normals[tid[hit]]
    facing = (n * dirs[hit]).sum(axis=1) > 0
    n[facing] = -n[facing]
    diffuse = np.maximum(0.0, n @ l)
    img[hit] = np.clip(
        scene.albedo[tid[hit]] * (diffuse + AMBIENT)[:, None], 0.0, 1.0
    )
    return img


# ---------------------------------------------------------------------------
# Sonar ground truth from depth maps
# ---------------------------------------------------------------------------

def make_echo_gt(depth: np.ndarray, cfg: SonarConfig) -> TransientHistogram:
    """Histogram of valid depths divided by the total pixel count."""
    depth = np.asarray(depth, dtype=float)
    total = depth.size
    valid = depth[np.isfinite(depth)]
    counts, _ = np.histogram(
        valid, bins=cfg.bins, range=(cfg.range_min, cfg.range_max)
    )
    return TransientHistogram(counts / total, cfg.range_min, cfg.range_max)


def make_fls_gt(depth: np.ndarray, cfg: SonarConfig) -> FlsImage:
    """Per-row-group depth histograms; rows must divide the image height."""
    depth = np.asarray(depth, dtype=float)
    h = depth.shape[0]
    if h % cfg.rows != 0:
        raise ValueError(f"{cfg.rows} azimuth rows do not divide {h} image rows")
    group = h // cfg.rows
    total = depth.size
    out = np.zeros((cfg.rows, cfg.bins))
    for j in range(cfg.rows):
        block = depth[j * group: (j + 1) * group]
        valid = block[np.isfinite(block)]
        counts, _ = np.histogram(
            valid, bins=cfg.bins, range=(cfg.range_min, cfg.range_max)
        )
        out[j] = counts / total
    return FlsImage(out, cfg.range_min, cfg.range_max)


# ---------------------------------------------------------------------------
# Trajectories and dataset assembly
# ---------------------------------------------------------------------------

@dataclass
class Trajectory:
    views: list[SensorView]
    kind: str
    extent: float


def gen_trajectory(
    kind: str,
    extent: float,
    n: int,
    base_view: SensorView,
    center=(0.0, 0.0, 0.0),
) -> Trajectory:
    """Restricted-baseline pose sets.

    ``arc``: cameras on a circle around ``center`` spanning ``extent``
    degrees at equal increments, all aimed at the center (the rotation
    axis is the base camera's row axis).  ``line``: translations along
    the base camera's x axis spanning ``extent`` scene units.
    """
    if n < 2:
        raise ValueError("a trajectory needs at least two views")
    center = np.asarray(center, dtype=float)
    eye0 = base_view.camera_center()
    cam_x = base_view.rotation[0]
    cam_y = base_view.rotation[1]
    views = []
    if kind == "arc":
        radius_vec = eye0 - center
        axis = cam_y / np.linalg.norm(cam_y)
        angles = np.radians(np.linspace(-extent / 2.0, extent / 2.0, n))
        for theta in angles:
            k = axis
            v = radius_vec
            # Rodrigues rotation of the radius vector about the row axis
            rot_v = (
                v * np.cos(theta)
                + np.cross(k, v) * np.sin(theta)
                + k * (k @ v) * (1.0 - np.cos(theta))
            )
            eye = center + rot_v
            views.append(
                SensorView.look_at(
                    eye, center, up=axis,
                    fov_deg=np.degrees(
                        2.0 * np.arctan(0.5 * base_view.width / base_view.fx)
                    ),
                    width=base_view.width, height=base_view.height,
                )
            )
    elif kind == "line":
        offsets = np.linspace(-extent / 2.0, extent / 2.0, n)
        for off in offsets:
            eye = eye0 + off * cam_x
            rot = base_view.rotation.copy()
            views.append(
                SensorView(
                    rotation=rot,
                    translation=-rot @ eye,
                    fx=base_view.fx, fy=base_view.fy,
                    cx=base_view.cx, cy=base_view.cy,
                    width=base_view.width, height=base_view.height,
                )
            )
    else:
        raise ValueError(f"unknown trajectory kind {kind!r}")
    return Trajectory(views=views, kind=kind, extent=extent)


def suggest_sonar_config(
    scene: TriScene,
    trajectory: Trajectory,
    bins: int = 128,
    ray_grid: tuple[int, int] = (64, 64),
    rows: int = 32,
) -> SonarConfig:
    """Default range binning: [0.5, 1.5] x the span of scene depths."""
    lo, hi = scene.bounds()
    corners = np.array([
        [x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1])
        for z in (lo[2], hi[2])
    ])
    dists = []
    for v in trajectory.views:
        eye = v.camera_center()
        dists.extend(np.linalg.norm(corners - eye, axis=1))
    dmin, dmax = min(dists), max(dists)
    return SonarConfig(
        bins=bins,
        range_min=max(0.0, 0.5 * dmin),
        range_max=1.5 * dmax,
        ray_grid=ray_grid,
        rows=rows,
    )


def build_dataset(
    scene: TriScene,
    trajectory: Trajectory,
    modalities,
    cfg: SonarConfig | None,
    out_dir,
    light=(0.3, -0.6, -0.75),
    gt_edge: float | None = None,
    threads: int | None = None,
) -> Dataset:
    """Render and write a dataset directory; returns the in-memory copy."""
    modalities = sorted(set(modalities))
    unknown = set(modalities) - {"camera", "echo", "fls"}
    if unknown:
        raise ValueError(f"unknown modalities: {sorted(unknown)}")
    if not modalities:
        raise ValueError("need at least one modality")
    needs_sonar = bool(set(modalities) & {"echo", "fls"})
    if needs_sonar and cfg is None:
        cfg = suggest_sonar_config(scene, trajectory)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if "camera" in modalities:
        (out / "images").mkdir(exist_ok=True)
    if "echo" in modalities:
        (out / "echo").mkdir(exist_ok=True)
    if "fls" in modalities:
        (out / "fls").mkdir(exist_ok=True)

    views_data = []
    for i, view in enumerate(trajectory.views):
        vd = ViewData(view=view)
        depth = None
        if needs_sonar:
            depth = trace_depth(view, scene, threads)
        if "camera" in modalities:
            vd.image = shade_rgb(view, scene, light, threads)
            save_image_png(out / "images" / view_filename(i, "png"), vd.image)
        if "echo" in modalities:
            vd.echo = make_echo_gt(depth, cfg)
            save_transient_csv(out / "echo" / view_filename(i, "csv"), vd.echo)
        if "fls" in modalities:
            vd.fls = make_fls_gt(depth, cfg)
            save_fls_csv(out / "fls" / view_filename(i, "csv"), vd.fls)
        views_data.append(vd)

    with open(out / "cameras.json", "w") as f:
        json.dump([v.to_dict() for v in trajectory.views], f, indent=2)
        f.write("\n")

    bounds = scene.bounds()
    if gt_edge is None:
        gt_edge = 0.05 * float(np.linalg.norm(bounds[1] - bounds[0]))
    gt_points = scene.tessellate(gt_edge)
    save_ply(out / "gt_points.ply", gt_points)

    manifest = {
        "version": 1,
        "modalities": modalities,
        "sonar": cfg.to_dict() if needs_sonar else None,
        "scene_bounds": bounds.tolist(),
        "n_views": len(trajectory.views),
        "image_size": [trajectory.views[0].width, trajectory.views[0].height],
        "trajectory": {"kind": trajectory.kind, "extent": trajectory.extent},
    }
    write_manifest(out / "manifest.json", manifest)
    return Dataset(
        views=views_data,
        sonar=cfg if needs_sonar else None,
        scene_bounds=bounds,
        gt_points=gt_points,
        path=out,
    )
