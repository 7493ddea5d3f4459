"""Command line: synth, train, render, eval."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import config as config_mod
from . import metrics, scenegen, training
from .config import ConfigError
from .motionmodel import write_trajectory_csv

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class DataError(Exception):
    pass


def config_keys_help() -> str:
    lines = ["config keys (file lines 'key = value', or key=value on the command line):"]
    for key, value in config_mod.defaults().items():
        lines.append(f"  {key} = {config_mod._format(value)}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    p = argparse.ArgumentParser(prog="splatdeblur", description="Motion-deblurring Gaussian splatting.",
                                epilog=config_keys_help(), formatter_class=fmt)
    p.add_argument("--threads", type=int, default=0, help="cap on BLAS worker threads (0: all cores)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic blurred dataset")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--gaussians", type=int, default=500)
    s.add_argument("--cameras", type=int, default=8)
    s.add_argument("--size", type=int, default=config_mod.Config.image_size, help="image width and height")
    s.add_argument("--magnitude", default="moderate",
                   help="none, moderate, extreme or a peak angle in radians")
    s.add_argument("--dense", type=int, default=scenegen.DENSE_FRAMES, help="renders averaged per blur")
    s.add_argument("--out", required=True)

    t = sub.add_parser("train", help="fit a dataset", epilog=config_keys_help(), formatter_class=fmt)
    t.add_argument("--data", required=True)
    t.add_argument("--config", action="append", default=[],
                   help="config file or key=value override; repeatable, later wins")
    t.add_argument("--out", required=True)
    t.add_argument("--no-resume", action="store_true", help="ignore checkpoints already in --out")
    t.add_argument("--quiet", action="store_true")
    t.add_argument("overrides", nargs="*", metavar="key=value")

    r = sub.add_parser("render", help="render from a checkpoint")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--camera", type=int, default=0)
    r.add_argument("--mode", choices=("sharp", "blur", "trajectory"), default="sharp")
    r.add_argument("--out", required=True, help="PNG or .npy path, or a directory for trajectory mode")

    e = sub.add_parser("eval", help="score a checkpoint against ground truth")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True)
    return p


def parse_overrides(items) -> dict:
    pairs = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"expected key=value, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v
    return pairs


def resolve_config(sources, overrides) -> config_mod.Config:
    cfg = config_mod.Config()
    for src in sources:
        if "=" in src and not Path(src).exists():
            cfg = config_mod.parse_pairs(parse_overrides([src]), cfg)
        else:
            try:
                text = Path(src).read_text()
            except OSError as exc:
                raise ConfigError(f"cannot read config {src}: {exc}") from None
            cfg = config_mod.parse_text(text, cfg)
    return config_mod.parse_pairs(parse_overrides(overrides), cfg)


def load_data(path, require_sharp=False):
    if not Path(path).is_dir():
        raise DataError(f"dataset directory not found: {path}")
    try:
        return scenegen.load_dataset(path, require_sharp=require_sharp)
    except scenegen.MissingFilesError as exc:
        raise DataError(str(exc)) from None


def load_model(path):
    try:
        model, _, _ = training.load_checkpoint(path)
    except (FileNotFoundError, ValueError) as exc:
        raise DataError(f"bad checkpoint: {exc}") from None
    return model


def cmd_synth(args):
    mag = args.magnitude
    if mag not in scenegen.MAGNITUDES:
        try:
            mag = float(mag)
        except ValueError:
            raise ConfigError(f"bad magnitude {args.magnitude!r}") from None
    try:
        scene = scenegen.make_scene(args.seed, args.gaussians, args.cameras, args.size)
        ds = scenegen.make_blur_dataset(scene, args.dense, mag)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    try:
        scenegen.save_dataset(ds, args.out)
    except OSError as exc:
        raise DataError(f"cannot write {args.out}: {exc}") from None
    print(f"wrote {len(ds)} cameras to {args.out}")


def cmd_train(args):
    cfg = resolve_config(args.config, args.overrides)
    data = load_data(args.data)

    def log(it, phase, terms, total):
        if not args.quiet and (it % 100 == 0 or it == cfg.total_iters - 1):
            print(f"iter {it:5d}  phase {phase}  L1 {terms[0]:.5f}  total {total:.5f}", flush=True)

    from threadpoolctl import threadpool_limits

    # the --threads flag wins over the config key
    with threadpool_limits(limits=(args.threads or cfg.threads) or None):
        training.train(data, cfg, out=args.out, resume=not args.no_resume, log=log)
    print(f"done; outputs in {args.out}")


def save_image(path, img):
    """PNG, or the raw float array when the path ends in .npy."""
    if str(path).endswith(".npy"):
        np.save(path, img)
    else:
        scenegen.save_png(path, img)


def cmd_render(args):
    model = load_model(args.checkpoint)
    k = args.camera
    if not 0 <= k < len(model.cameras):
        raise DataError(f"camera {k} out of range [0, {len(model.cameras)})")
    with ad.no_grad():
        if args.mode == "sharp":
            save_image(args.out, training.render_sharp(model, k))
        elif args.mode == "blur":
            save_image(args.out, training.forward(model, k, 3).image.data)
        else:
            frames, traj = training.render_frames(model, k)
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            for j, frame in enumerate(frames.data):
                scenegen.save_png(out / f"frame_{j:02d}.png", frame)
            write_trajectory_csv(out / "poses.csv", [(k, float(t), p) for t, p in zip(traj.taus, traj.poses())])
    print(f"wrote {args.out}")


def evaluate(model, data) -> tuple[list[dict], bool]:
    has_gt = bool(data.scene.motions) or bool(data.gt_poses)
    rows = []
    with ad.no_grad():
        for k in range(len(data)):
            pred = training.render_sharp(model, k)
            row = {"image_index": k,
                   "psnr_blurin": metrics.psnr(data.blurred[k], data.sharp[k]),
                   "psnr_deblurred": metrics.psnr(pred, data.sharp[k]),
                   "ssim_deblurred": metrics.ssim(pred, data.sharp[k])}
            if has_gt:
                traj = model.trajectory(k)
                gt = [data.gt_pose(k, t) for t in traj.taus]
                err = metrics.trajectory_error(traj.poses(), gt, allow_reversal=True)
                row["traj_rot_mean"] = err.rot_mean
                row["traj_trans_mean"] = err.trans_mean
            rows.append(row)
    return rows, has_gt


def cmd_eval(args):
    model = load_model(args.checkpoint)
    data = load_data(args.data, require_sharp=True)
    if len(data) != len(model.cameras):
        raise DataError(f"dataset has {len(data)} cameras, checkpoint has {len(model.cameras)}")
    rows, has_gt = evaluate(model, data)
    if not has_gt:
        print("warning: no ground-truth trajectory (traj_gt.csv); trajectory columns omitted")
    metrics.write_report(args.report, rows, with_trajectory=has_gt)
    fields = metrics.REPORT_FIELDS[1:] if has_gt else metrics.REPORT_FIELDS[1:4]
    for f in fields:
        print(f"{f}: {np.mean([r[f] for r in rows]):.6g}")


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "render": cmd_render, "eval": cmd_eval}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=args.threads or None):
            COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except training.NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
