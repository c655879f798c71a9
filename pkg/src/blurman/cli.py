"""Command-line entry point: ``blurman <command> --config FILE [options]``."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np
from PIL import Image

from . import plotting
from .body import CapsuleBody
from .config import Config, ConfigError
from .datagen import _to_png, ground_truth_field, load_dataset, scene_from_config, synthesize, write_dataset
from .metrics import EvalReport, evaluate, write_report
from .render import Camera, render_image
from .threads import worker_count
from .trainer import ABLATION_ROWS, TrainConfig, load_checkpoint, pose_at, render_midpoints, train
from .velocity import VelocityConfig, VelocityMap, write_velocity_map

log = logging.getLogger("blurman")

COMMANDS = ("synth", "train", "render", "eval", "dump-velocity", "ablate")
INCOMPLETE = "INCOMPLETE"


def _load_config(args) -> Config:
    if not args.config:
        raise ConfigError("--config is required")
    path = Path(args.config)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    cfg = Config.load(path)
    cfg.apply_overrides(args.override or [])
    if args.seed is not None:
        cfg.set("seed", args.seed)
    return cfg


@contextmanager
def _output_dir(path):
    """Create ``path``; leave an INCOMPLETE marker inside if the command fails."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    marker = out / INCOMPLETE
    marker.write_text("command did not finish; outputs in this directory are partial\n")
    yield out
    marker.unlink()


def _data_dir(args, cfg) -> Path:
    d = args.data or cfg.get_str("data", "")
    if not d:
        raise ConfigError("dataset directory needed: pass --data or set 'data' in the config")
    return Path(d)


def _ckpt_dir(args, cfg) -> Path:
    d = args.checkpoint or cfg.get_str("checkpoint", "")
    if not d:
        raise ConfigError("checkpoint directory needed: pass --checkpoint or set 'checkpoint' in the config")
    return Path(d)


def _n_samples(cfg) -> int:
    return cfg.get_int("render.samples", cfg.get_int("train.samples", 32))


def _orbit(camera: Camera, degrees: float) -> Camera:
    """Rotate the camera about the world y axis through the origin."""
    a = np.radians(degrees)
    Ry = np.array([[np.cos(a), 0, np.sin(a)], [0, 1, 0], [-np.sin(a), 0, np.cos(a)]])
    R = camera.rotation @ Ry.T
    return Camera(camera.fx, camera.fy, camera.cx, camera.cy, R, camera.translation, camera.width, camera.height)


# --------------------------------------------------------------------------

def cmd_synth(args, cfg):
    scene = scene_from_config(cfg)
    ds = synthesize(scene)
    with _output_dir(args.out or cfg.get_str("data", "data")) as out:
        write_dataset(ds, out)
        plotting.frame_comparison({"blurry": ds.blurry, "sharp (held out)": ds.sharp}, out / "preview.png")
    print(f"wrote {ds.n_frames} frames and {len(ds.events)} events to {out}")


def cmd_train(args, cfg):
    ds = load_dataset(_data_dir(args, cfg))
    tcfg = TrainConfig.from_config(cfg)
    with _output_dir(args.out or cfg.get_str("checkpoint", "checkpoint")) as out:
        res = train(ds, tcfg, out)
        if res.log:
            plotting.loss_curves(res.log, out / "loss.png")
    print(f"trained {tcfg.iterations} iterations; checkpoint in {out}")


def cmd_render(args, cfg):
    ds = load_dataset(_data_dir(args, cfg))
    fld, net = load_checkpoint(_ckpt_dir(args, cfg))
    body = CapsuleBody(ds.skeleton)
    cam = _orbit(ds.camera, args.orbit) if args.orbit else ds.camera
    times = [float(t) for t in args.times.split(",")] if args.times else list(ds.midpoints)
    with _output_dir(args.out or "renders") as out:
        with open(out / "frames.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "time_s", "file"])
            for k, t in enumerate(times):
                rgb, a, _ = render_image(fld, body, pose_at(net, t), cam, _n_samples(cfg), background=ds.background)
                name = f"frame_{k:04d}.png"
                _to_png(rgb, out / name)
                _to_png(a, out / f"alpha_{k:04d}.png")
                w.writerow([k, repr(t), name])
    print(f"rendered {len(times)} frames to {out}")


def _read_png(path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=float) / 255.0


def cmd_eval(args, cfg):
    data = _data_dir(args, cfg)
    ds = load_dataset(data)
    if args.renders:
        # compare PNG against PNG so identical files score exactly
        rd = Path(args.renders)
        n = ds.n_frames
        pred = np.stack([_read_png(rd / f"frame_{k:04d}.png") for k in range(n)])
        pa = [rd / f"alpha_{k:04d}.png" for k in range(n)]
        pred_a = np.stack([_read_png(p) for p in pa]) if all(p.is_file() for p in pa) else None
        gt = np.stack([_read_png(data / "frames" / f"sharp_{k:04d}.png") for k in range(n)])
        gt_a = np.stack([_read_png(data / "masks" / f"sharp_{k:04d}.png") for k in range(n)])
    else:
        fld, net = load_checkpoint(_ckpt_dir(args, cfg))
        pred, pred_a = render_midpoints(fld, net, ds, _n_samples(cfg))
        gt, gt_a = ds.sharp, ds.sharp_alpha
    report = evaluate(pred, gt, gt_a, pred_a)
    with _output_dir(args.out or "eval") as out:
        write_report(report, out)
        plotting.frame_comparison({"blurry input": ds.blurry, "rendered": pred, "sharp GT": gt},
                                  out / "comparison.png")
    print(report.summary())


def cmd_dump_velocity(args, cfg):
    vcfg = VelocityConfig(dt=cfg.get_float("train.velocity_dt", VelocityConfig.dt),
                          v0=cfg.get_float("train.velocity_v0", VelocityConfig.v0))
    if args.ground_truth:
        scene = scene_from_config(cfg)
        body = scene.body()
        fld = ground_truth_field(body, scene.field_resolution, scene.texture_period)
        camera = scene.camera()
        pose_fn = scene.pose_at
        default_times = scene.exposure_intervals().mean(axis=1)
        bg = scene.background
    else:
        ds = load_dataset(_data_dir(args, cfg))
        fld, net = load_checkpoint(_ckpt_dir(args, cfg))
        body = CapsuleBody(ds.skeleton)
        camera = ds.camera
        pose_fn = lambda t: pose_at(net, t)  # noqa: E731
        default_times = ds.midpoints
        bg = ds.background
    times = [float(t) for t in args.times.split(",")] if args.times else list(default_times)
    with _output_dir(args.out or "velocity") as out:
        with open(out / "velocity.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "time_s", "mean_v", "max_v", "file"])
            for k, t in enumerate(times):
                _, _, v = render_image(fld, body, pose_fn(t), camera, _n_samples(cfg),
                                       pose_next=pose_fn(t + vcfg.dt), vcfg=vcfg, background=bg)
                name = f"velocity_{k:04d}.vmap"
                write_velocity_map(VelocityMap(v, t), out / name)
                plotting.velocity_map(v, out / f"velocity_{k:04d}.png", f"t = {t:.3f} s")
                w.writerow([k, repr(t), f"{v.mean():.6f}", f"{v.max():.6f}", name])
    print(f"wrote {len(times)} velocity maps to {out}")


def cmd_ablate(args, cfg):
    ds = load_dataset(_data_dir(args, cfg))
    base = TrainConfig.from_config(cfg)
    rows = []
    with _output_dir(args.out or "ablation") as out:
        for name, flags in ABLATION_ROWS.items():
            tcfg = TrainConfig(**{**base.__dict__, **flags})
            res = train(ds, tcfg, out / name)
            pred, pred_a = render_midpoints(res.field, res.net, ds, _n_samples(cfg))
            rep: EvalReport = evaluate(pred, ds.sharp, ds.sharp_alpha, pred_a)
            write_report(rep, out / name)
            rows.append({"variant": name, "va_pl": int(flags["va_pl"]), "vr_el": int(flags["vr_el"]),
                         "psnr_db": f"{rep.mean_psnr:.4f}", "ssim": f"{rep.mean_ssim:.4f}"})
            print(f"{name:>9}: PSNR {rep.mean_psnr:.2f} dB  SSIM {rep.mean_ssim:.4f}", flush=True)
        with open(out / "ablation.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
        plotting.ablation_bars(rows, out / "ablation.png")


HANDLERS = {"synth": cmd_synth, "train": cmd_train, "render": cmd_render, "eval": cmd_eval,
            "dump-velocity": cmd_dump_velocity, "ablate": cmd_ablate}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="blurman", description="Blur-aware articulated avatar reconstruction "
                                "from blurry frames and events.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    helps = {
        "synth": "synthesize a blurry-frame + event dataset",
        "train": "fit the field and pose network to a dataset",
        "render": "render sharp frames from a checkpoint",
        "eval": "score renders against held-out sharp frames",
        "dump-velocity": "write rendered velocity maps",
        "ablate": "train the four loss-ablation variants and compare",
    }
    for name in COMMANDS:
        sp = sub.add_parser(name, help=helps[name])
        sp.add_argument("--config", required=True, help="key = value config file")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--override", action="append", metavar="KEY=VALUE", help="dotted config override")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name != "synth":
            sp.add_argument("--data", help="dataset directory")
        if name in ("render", "eval", "dump-velocity"):
            sp.add_argument("--checkpoint", help="checkpoint directory")
        if name in ("render", "dump-velocity"):
            sp.add_argument("--times", help="comma-separated timestamps (s); default: exposure midpoints")
        if name == "render":
            sp.add_argument("--orbit", type=float, default=0.0, help="novel view: camera yaw in degrees")
        if name == "eval":
            sp.add_argument("--renders", help="evaluate frame_%%04d.png files from this directory")
        if name == "dump-velocity":
            sp.add_argument("--ground-truth", action="store_true",
                            help="use the scene's ground-truth field and motion script")
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        worker_count()
        cfg = _load_config(args)
        HANDLERS[args.command](args, cfg)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"blurman {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
