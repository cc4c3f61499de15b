"""Dataset container and the on-disk formats shared across the pipeline.

A dataset directory holds::

    manifest.json            modalities, sonar config, scene bounds
    cameras.json             per-view pose + intrinsics
    images/view_%04d.png     8-bit RGB camera measurements
    echo/view_%04d.csv       echosounder transients (1 row x bins)
    fls/view_%04d.csv        FLS images (one row per azimuth)
    gt_points.ply            ground-truth point cloud (tessellated vertices)

Transient CSVs use a repr-exact float format so reloads are lossless.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .render import FlsImage, SonarConfig, TransientHistogram
from .scene import SensorView, load_ply

MANIFEST_VERSION = 1


@dataclass
class ViewData:
    """One pose with whatever measurements exist for it."""

    view: SensorView
    image: np.ndarray | None = None
    echo: TransientHistogram | None = None
    fls: FlsImage | None = None


@dataclass
class Dataset:
    views: list[ViewData] = field(default_factory=list)
    sonar: SonarConfig | None = None
    scene_bounds: np.ndarray | None = None  # (2, 3) AABB
    gt_points: np.ndarray | None = None
    path: Path | None = None

    def __len__(self) -> int:
        return len(self.views)

    @property
    def modalities(self) -> set[str]:
        mods = set()
        for vd in self.views:
            if vd.image is not None:
                mods.add("camera")
            if vd.echo is not None:
                mods.add("echo")
            if vd.fls is not None:
                mods.add("fls")
        return mods


# ---------------------------------------------------------------------------
# Individual file formats
# ---------------------------------------------------------------------------

def save_image_png(path, image: np.ndarray) -> None:
    """Write an HxWx3 float image in [0, 1] as 8-bit RGB PNG."""
    arr = np.clip(np.asarray(image, dtype=float), 0.0, 1.0)
    data = (arr * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


def load_image_png(path) -> np.ndarray:
    """Read a PNG into an HxWx3 float array in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=float)
    return arr / 255.0


def save_array_f32(path, array: np.ndarray) -> None:
    """Dump an array as 32-bit floats (.npy container)."""
    np.save(path, np.asarray(array, dtype=np.float32))


def save_matrix_csv(path, values: np.ndarray) -> None:
    values = np.atleast_2d(np.asarray(values, dtype=float))
    with open(path, "w") as f:
        for row in values:
            f.write(",".join(f"{x:.17g}" for x in row) + "\n")


def load_matrix_csv(path) -> np.ndarray:
    rows = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                rows.append([float(x) for x in line.split(",")])
    return np.asarray(rows, dtype=float)


def save_transient_csv(path, hist: TransientHistogram) -> None:
    save_matrix_csv(path, hist.values[None, :])


def load_transient_csv(path, range_min: float, range_max: float) -> TransientHistogram:
    values = load_matrix_csv(path)
    if values.shape[0] != 1:
        raise ValueError("echosounder transient CSV must have exactly one row")
    return TransientHistogram(values[0], range_min, range_max)


def save_fls_csv(path, fls: FlsImage) -> None:
    save_matrix_csv(path, fls.values)


def load_fls_csv(path, range_min: float, range_max: float) -> FlsImage:
    return FlsImage(load_matrix_csv(path), range_min, range_max)


def view_filename(index: int, ext: str) -> str:
    return f"view_{index:04d}.{ext}"


# ---------------------------------------------------------------------------
# Whole-dataset I/O
# ---------------------------------------------------------------------------

def write_manifest(path, manifest: dict) -> None:
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json in {root}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    with open(root / "cameras.json") as f:
        cameras = json.load(f)

    sonar = None
    if manifest.get("sonar"):
        sonar = SonarConfig.from_dict(manifest["sonar"])
    modalities = set(manifest.get("modalities", []))

    views: list[ViewData] = []
    for i, cam in enumerate(cameras):
        vd = ViewData(view=SensorView.from_dict(cam))
        img_path = root / "images" / view_filename(i, "png")
        if "camera" in modalities and img_path.exists():
            vd.image = load_image_png(img_path)
        echo_path = root / "echo" / view_filename(i, "csv")
        if "echo" in modalities and echo_path.exists():
            vd.echo = load_transient_csv(echo_path, sonar.range_min, sonar.range_max)
        fls_path = root / "fls" / view_filename(i, "csv")
        if "fls" in modalities and fls_path.exists():
            vd.fls = load_fls_csv(fls_path, sonar.range_min, sonar.range_max)
        views.append(vd)

    bounds = None
    if manifest.get("scene_bounds"):
        bounds = np.asarray(manifest["scene_bounds"], dtype=float)
    gt = None
    gt_path = root / "gt_points.ply"
    if gt_path.exists():
        gt = load_ply(gt_path)
    return Dataset(
        views=views, sonar=sonar, scene_bounds=bounds, gt_points=gt, path=root
    )
