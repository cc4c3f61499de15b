"""Command-line pipeline: simulate -> train -> render -> eval, plus dsp.

Every command is deterministic given its inputs and seed, exits 0 only
when all outputs were fully written, and removes partial outputs on
failure.
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
import warnings
from dataclasses import fields as dc_fields
from pathlib import Path

import numpy as np

from . import runtime
from .dataset import (
    load_dataset,
    save_array_f32,
    save_fls_csv,
    save_image_png,
    save_transient_csv,
    write_manifest,
)
from .losses import LossConfig
from .metrics import (
    apply_rigid,
    chamfer,
    cloud_from_gaussians,
    precision_recall_f1,
    psnr,
    ssim,
)
from .render import SonarConfig, render_all
from .scene import SensorView, load_checkpoint, load_ply
from .simulate import (
    build_dataset,
    gen_trajectory,
    load_obj,
    make_scene,
    suggest_sonar_config,
    NAMED_SCENES,
)
from .sonar_dsp import Waveform, echo_to_histogram, load_wav, synth_chirp
from .train import TrainConfig, train, write_log_csv


class CliError(RuntimeError):
    pass


class OutputTracker:
    """Records written paths so a failed command can clean up after itself."""

    def __init__(self):
        self.files: list[Path] = []
        self.dirs: list[Path] = []

    def file(self, p) -> Path:
        p = Path(p)
        self.files.append(p)
        return p

    def cleanup(self) -> None:
        for p in self.files:
            try:
                p.unlink(missing_ok=True)
            except OSError:
                pass
        for d in reversed(self.dirs):
            try:
                d.rmdir()
            except OSError:
                pass


# ---------------------------------------------------------------------------
# Run configuration (JSON with strict keys)
# ---------------------------------------------------------------------------

_TRAIN_KEYS = {f.name for f in dc_fields(TrainConfig)}
_LOSS_KEYS = {"w", "sonar_kind", "measurement_scale"}
_SONAR_KEYS = {"bins", "range_min", "range_max", "ray_grid", "rows"}
_TOP_KEYS = {"loss", "train", "sonar", "dataset", "out", "seed"}


def _reject_unknown(d: dict, allowed: set, where: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise CliError(f"unknown {where} config keys: {sorted(unknown)}")


def load_run_config(path) -> dict:
    with open(path) as f:
        cfg = json.load(f)
    if not isinstance(cfg, dict):
        raise CliError("run config must be a JSON object")
    _reject_unknown(cfg, _TOP_KEYS, "top-level")
    if "loss" in cfg:
        _reject_unknown(cfg["loss"], _LOSS_KEYS, "loss")
    if "train" in cfg:
        _reject_unknown(cfg["train"], _TRAIN_KEYS, "train")
    if "sonar" in cfg and cfg["sonar"] is not None:
        _reject_unknown(cfg["sonar"], _SONAR_KEYS, "sonar")
    return cfg


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    if args.views < 2:
        raise CliError("need at least two views")
    if args.obj:
        scene = load_obj(args.obj)
    else:
        scene = make_scene(args.scene)

    lo, hi = scene.bounds()
    center = 0.5 * (lo + hi)
    distance = args.distance
    if distance is None:
        distance = float(np.linalg.norm(hi - lo)) * 1.8
    eye = center - np.array([0.0, 0.0, distance])
    base = SensorView.look_at(
        eye, center, fov_deg=args.fov, width=args.image_size, height=args.image_size
    )
    kind = "line" if args.line is not None else "arc"
    extent = args.line if args.line is not None else args.arc
    traj = gen_trajectory(kind, extent, args.views, base, center=center)

    modalities = [m.strip() for m in args.modalities.split(",") if m.strip()]
    cfg = None
    if set(modalities) & {"echo", "fls"}:
        cfg = suggest_sonar_config(
            scene, traj, bins=args.bins,
            ray_grid=(args.ray_grid, args.ray_grid), rows=args.rows,
        )
        if args.range_min is not None:
            cfg.range_min = args.range_min
        if args.range_max is not None:
            cfg.range_max = args.range_max

    out = Path(args.out)
    if out.exists():
        if not (out / "manifest.json").exists() and any(out.iterdir()):
            raise CliError(
                f"{out} exists and does not look like a dataset; refusing to overwrite"
            )
        shutil.rmtree(out)
    tmp = out.parent / (out.name + ".partial")
    if tmp.exists():
        shutil.rmtree(tmp)
    try:
        ds = build_dataset(scene, traj, modalities, cfg, tmp)
        tmp.replace(out)
    except BaseException:
        if tmp.exists():
            shutil.rmtree(tmp, ignore_errors=True)
        raise
    print(f"wrote dataset with {len(ds)} views to {out}")
    print(f"  modalities: {','.join(sorted(ds.modalities))}")
    if ds.sonar is not None:
        print(
            f"  sonar: {ds.sonar.bins} bins over "
            f"[{ds.sonar.range_min:.3g}, {ds.sonar.range_max:.3g}] m"
        )
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _loss_picture(path, records) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    it = [r.iteration for r in records]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(it, [r.loss_total for r in records], label="total", lw=0.8)
    ax.plot(it, [r.loss_camera for r in records], label="camera", lw=0.8)
    ax.plot(it, [r.loss_sonar for r in records], label="sonar", lw=0.8)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def cmd_train(args) -> int:
    cfg = load_run_config(args.config) if args.config else {}
    dataset_dir = args.dataset or cfg.get("dataset")
    if not dataset_dir:
        raise CliError("no dataset directory given")
    ds = load_dataset(dataset_dir)

    loss_kwargs = dict(cfg.get("loss", {}))
    if args.w is not None:
        loss_kwargs["w"] = args.w
    if args.sonar_kind is not None:
        loss_kwargs["sonar_kind"] = args.sonar_kind
    loss_cfg = LossConfig(**loss_kwargs)

    train_kwargs = dict(cfg.get("train", {}))
    if args.iterations is not None:
        train_kwargs["iterations"] = args.iterations
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    train_kwargs["seed"] = train_kwargs.get("seed", seed)
    train_cfg = TrainConfig(**train_kwargs)

    if loss_cfg.sonar_kind == "echo" and "echo" not in ds.modalities:
        raise CliError("sonar_kind=echo but the dataset has no echo transients")
    if loss_cfg.sonar_kind == "fls" and "fls" not in ds.modalities:
        raise CliError("sonar_kind=fls but the dataset has no FLS images")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tracker = OutputTracker()
    try:
        ckpt = tracker.file(out / "cloud.zspl")
        cloud, records = train(ds, loss_cfg, train_cfg, checkpoint_path=ckpt)
        write_log_csv(tracker.file(out / "log.csv"), records)
        _loss_picture(tracker.file(out / "loss_curve.png"), records)
        resolved = {
            "dataset": str(dataset_dir),
            "out": str(out),
            "seed": train_cfg.seed,
            "loss": {
                "w": loss_cfg.w,
                "sonar_kind": loss_cfg.sonar_kind,
                "measurement_scale": loss_cfg.measurement_scale,
            },
            "train": {"iterations": train_cfg.iterations, "n_init": train_cfg.n_init},
            "sonar": ds.sonar.to_dict() if ds.sonar else None,
        }
        with open(tracker.file(out / "config.json"), "w") as f:
            json.dump(resolved, f, indent=2, sort_keys=True)
            f.write("\n")
    except BaseException:
        tracker.cleanup()
        raise
    final = records[-1]
    print(
        f"trained {final.n_gaussians} Gaussians for {final.iteration} iterations; "
        f"final loss {final.loss_total:.6g} "
        f"(camera {final.loss_camera:.6g}, sonar {final.loss_sonar:.6g})"
    )
    print(f"checkpoint: {out / 'cloud.zspl'}")
    return 0


# ---------------------------------------------------------------------------
# render
# ---------------------------------------------------------------------------

def _resolve_view_and_sonar(args):
    if args.dataset:
        ds = load_dataset(args.dataset)
        if not (0 <= args.view_index < len(ds)):
            raise CliError(f"view index {args.view_index} out of range")
        return ds.views[args.view_index].view, ds.sonar
    if args.camera:
        with open(args.camera) as f:
            view = SensorView.from_dict(json.load(f))
        sonar = None
        if args.bins is not None:
            sonar = SonarConfig(
                bins=args.bins,
                range_min=args.range_min,
                range_max=args.range_max,
                ray_grid=(args.ray_grid, args.ray_grid),
                rows=args.rows,
            )
        return view, sonar
    raise CliError("give either --dataset or --camera")


def cmd_render(args) -> int:
    cloud = load_checkpoint(args.checkpoint)
    view, sonar = _resolve_view_and_sonar(args)
    modalities = (
        {"camera", "echo", "fls"} if args.modality == "all" else {args.modality}
    )
    if modalities & {"echo", "fls"} and sonar is None:
        raise CliError("sonar rendering needs a dataset manifest or --bins/--range-*")

    bundle = render_all(cloud, view, modalities, sonar)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tracker = OutputTracker()
    try:
        if bundle.camera is not None:
            save_image_png(tracker.file(out / "camera.png"), bundle.camera.pixels)
            save_array_f32(tracker.file(out / "camera.npy"), bundle.camera.pixels)
            save_array_f32(
                tracker.file(out / "transmittance.npy"),
                bundle.camera.final_transmittance,
            )
        if bundle.echo is not None:
            save_transient_csv(tracker.file(out / "echo.csv"), bundle.echo)
            save_array_f32(tracker.file(out / "echo.npy"), bundle.echo.values)
        if bundle.fls is not None:
            save_fls_csv(tracker.file(out / "fls.csv"), bundle.fls)
            save_array_f32(tracker.file(out / "fls.npy"), bundle.fls.values)
    except BaseException:
        tracker.cleanup()
        raise
    print(f"rendered {len(cloud)} Gaussians -> {out}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(args) -> int:
    cloud = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.dataset)

    photometric = None
    per_view = []
    for i, vd in enumerate(ds.views):
        if vd.image is None:
            continue
        rendered = render_all(cloud, vd.view, {"camera"}).camera.pixels
        per_view.append(
            {"view": i, "psnr": psnr(rendered, vd.image),
             "ssim": ssim(rendered, vd.image)}
        )
    if per_view:
        photometric = {
            "psnr_mean": float(np.mean([v["psnr"] for v in per_view])),
            "ssim_mean": float(np.mean([v["ssim"] for v in per_view])),
            "per_view": per_view,
        }

    geometric = None
    gt = None
    if args.gt:
        gt = load_ply(args.gt)
    elif ds.gt_points is not None:
        gt = ds.gt_points
    if gt is not None:
        pred = cloud_from_gaussians(cloud, args.opacity_floor)
        if args.align:
            with open(args.align) as f:
                al = json.load(f)
            pred = apply_rigid(pred, al["rotation"], al["translation"])
        if len(pred) == 0:
            geometric = {"error": "no Gaussians above the opacity floor"}
        else:
            p, r, f1 = precision_recall_f1(pred, gt, args.threshold)
            geometric = {
                "chamfer": chamfer(pred, gt),
                "precision": p,
                "recall": r,
                "f1": f1,
                "threshold": args.threshold,
                "n_predicted": int(len(pred)),
                "n_truth": int(len(gt)),
            }

    report = {
        "checkpoint": str(args.checkpoint),
        "dataset": str(args.dataset),
        "n_gaussians": len(cloud),
        "photometric": photometric,
        "geometric": geometric,
    }
    tracker = OutputTracker()
    try:
        with open(tracker.file(args.out), "w") as f:
            json.dump(report, f, indent=2, sort_keys=True)
            f.write("\n")
    except BaseException:
        tracker.cleanup()
        raise
    if photometric:
        print(
            f"photometric: PSNR {photometric['psnr_mean']:.2f} dB, "
            f"SSIM {photometric['ssim_mean']:.4f} over {len(per_view)} views"
        )
    if geometric and "chamfer" in geometric:
        print(
            f"geometric: chamfer {geometric['chamfer']:.5g} m, "
            f"P {geometric['precision']:.3f} R {geometric['recall']:.3f} "
            f"F1 {geometric['f1']:.3f}"
        )
    print(f"report: {args.out}")
    return 0


# ---------------------------------------------------------------------------
# dsp
# ---------------------------------------------------------------------------

def cmd_dsp(args) -> int:
    rx = load_wav(args.wav)
    bg = None
    if args.background:
        bg = load_wav(args.background)
    else:
        warnings.warn("no background capture given; skipping subtraction")
    template = synth_chirp(args.f0, args.f1, args.duration, rx.fs)
    cfg = SonarConfig(
        bins=args.bins,
        range_min=args.range_min,
        range_max=args.range_max,
    )
    hist = echo_to_histogram(
        rx, bg, template, c_sound=args.c_sound,
        group_delay=args.group_delay, cfg=cfg,
    )
    tracker = OutputTracker()
    try:
        save_transient_csv(tracker.file(args.out), hist)
    except BaseException:
        tracker.cleanup()
        raise
    peak = int(np.argmax(hist.values))
    print(
        f"wrote transient ({cfg.bins} bins); peak at bin {peak} "
        f"(~{hist.bin_centers()[peak]:.3f} m)"
    )
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="zsplat",
        description="Gaussian splatting with camera-sonar fusion",
    )
    parser.add_argument(
        "--threads", type=int, default=None,
        help="worker pool bound (default: ZSPLAT_THREADS or all cores)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a ground-truth dataset")
    p.add_argument("--scene", default="plate", choices=sorted(NAMED_SCENES))
    p.add_argument("--obj", default=None, help="OBJ mesh instead of a named scene")
    p.add_argument("--views", type=int, required=True)
    p.add_argument("--arc", type=float, default=2.3,
                   help="arc extent in degrees (default 2.3)")
    p.add_argument("--line", type=float, default=None,
                   help="straight baseline extent in meters (overrides --arc)")
    p.add_argument("--distance", type=float, default=None)
    p.add_argument("--fov", type=float, default=50.0)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--modalities", default="camera,echo")
    p.add_argument("--bins", type=int, default=128)
    p.add_argument("--range-min", type=float, default=None)
    p.add_argument("--range-max", type=float, default=None)
    p.add_argument("--ray-grid", type=int, default=64)
    p.add_argument("--rows", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="fit a Gaussian cloud to a dataset")
    p.add_argument("--dataset", default=None)
    p.add_argument("--config", default=None, help="run-config JSON")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--w", type=float, default=None, help="sonar loss weight")
    p.add_argument("--sonar-kind", choices=["echo", "fls", "none"], default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", default=None)
    p.add_argument("--view-index", type=int, default=0)
    p.add_argument("--camera", default=None, help="JSON file with one view")
    p.add_argument("--modality", choices=["camera", "echo", "fls", "all"],
                   default="camera")
    p.add_argument("--bins", type=int, default=None)
    p.add_argument("--range-min", type=float, default=0.5)
    p.add_argument("--range-max", type=float, default=4.0)
    p.add_argument("--ray-grid", type=int, default=64)
    p.add_argument("--rows", type=int, default=32)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="evaluate a checkpoint against a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--gt", default=None, help="PLY ground-truth point cloud")
    p.add_argument("--threshold", type=float, default=0.05)
    p.add_argument("--opacity-floor", type=float, default=0.1)
    p.add_argument("--align", default=None,
                   help="JSON {rotation, translation} rigid pre-alignment")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("dsp", help="process a chirp capture into a transient")
    p.add_argument("--wav", required=True)
    p.add_argument("--background", default=None)
    p.add_argument("--f0", type=float, default=10e3)
    p.add_argument("--f1", type=float, default=30e3)
    p.add_argument("--duration", type=float, default=1e-3)
    p.add_argument("--c-sound", type=float, default=343.0)
    p.add_argument("--group-delay", type=float, default=0.0)
    p.add_argument("--bins", type=int, default=128)
    p.add_argument("--range-min", type=float, default=0.0)
    p.add_argument("--range-max", type=float, default=2.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dsp)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    runtime.set_threads(args.threads)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
