"""Command-line entry points: dataset synthesis, training, rendering,
animation, evaluation and PLY export.

Exit codes: 0 success, 1 runtime failure (one JSON error line on stderr),
2 usage errors (argparse). --seed and --deterministic are global; without
--deterministic the seed is drawn from the OS entropy pool.
"""

from __future__ import annotations

import argparse
import csv
import json
import secrets
import sys
from pathlib import Path

import numpy as np

from . import images, plyio, synth, trainer
from .config import TrainConfig, load_config, save_config
from .dataset import load_dataset
from .errors import MeshSplatError
from .synth import SyntheticRigSpec


def build_parser():
    p = argparse.ArgumentParser(prog="meshsplat",
                                description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=None,
                   help="seed for every stochastic choice")
    p.add_argument("--deterministic", action="store_true",
                   help="fixed seeding; reruns reproduce outputs byte for byte")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic rigged dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--spec", help="SyntheticRigSpec JSON file")
    sp.add_argument("--segments", type=int)
    sp.add_argument("--image-size", type=int)
    sp.add_argument("--train-poses", type=int)
    sp.add_argument("--test-poses", type=int)
    sp.add_argument("--bend", type=float, help="bend amplitude, radians")
    sp.add_argument("--bulge", type=float, help="pose-driven bulge, meters")
    sp.add_argument("--turntable-turns", type=float)
    sp.add_argument("--sh-degree", type=int)

    tp = sub.add_parser("train", help="optimize splats against a dataset")
    tp.add_argument("--data", required=True, help="manifest.json path")
    tp.add_argument("--out", required=True)
    tp.add_argument("--config", help="TrainConfig JSON file")
    tp.add_argument("--iters", type=int, help="override total_iters")
    tp.add_argument("--no-rectifier", action="store_true",
                    help="ablation: drop the rectification network")

    rp = sub.add_parser("render", help="render one dataset frame from a checkpoint")
    rp.add_argument("--checkpoint", required=True)
    rp.add_argument("--data", required=True)
    rp.add_argument("--frame", type=int, required=True)
    rp.add_argument("--out", required=True)
    rp.add_argument("--raw", help="also dump float32 raw image here")

    ap = sub.add_parser("animate", help="render an image sequence from a checkpoint")
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--data", required=True)
    ap.add_argument("--split", default="all", choices=["train", "test", "all"])
    ap.add_argument("--out", required=True)

    ep = sub.add_parser("eval", help="PSNR/SSIM table for a dataset split")
    ep.add_argument("--checkpoint", required=True)
    ep.add_argument("--data", required=True)
    ep.add_argument("--split", default="test", choices=["train", "test", "all"])
    ep.add_argument("--out", help="CSV output path (default stdout)")

    xp = sub.add_parser("export-ply", help="export posed splats as a point cloud")
    xp.add_argument("--checkpoint", required=True)
    xp.add_argument("--data", required=True)
    xp.add_argument("--frame", type=int, required=True)
    xp.add_argument("--out", required=True)
    xp.add_argument("--ascii", action="store_true")
    return p


def _resolve_seed(args):
    if args.seed is not None:
        return args.seed
    return 0 if args.deterministic else secrets.randbelow(2 ** 31)


def _frame_or_die(data, index):
    if not 0 <= index < len(data.frames):
        raise MeshSplatError(
            f"frame index {index} out of range [0, {len(data.frames)})")
    return data.frames[index]


def cmd_synth(args):
    spec = SyntheticRigSpec.from_dict(json.load(open(args.spec))) if args.spec \
        else SyntheticRigSpec()
    overrides = {
        "segments": args.segments, "image_size": args.image_size,
        "n_train_poses": args.train_poses, "n_test_poses": args.test_poses,
        "bend_amplitude": args.bend, "bulge_amplitude": args.bulge,
        "turntable_turns": args.turntable_turns, "sh_degree": args.sh_degree,
    }
    for key, value in overrides.items():
        if value is not None:
            setattr(spec, key, value)
    if args.seed is not None:
        spec.texture_seed = args.seed
    manifest = synth.synth_generate(spec, args.out)
    print(manifest)
    return 0


def cmd_train(args):
    cfg = load_config(args.config) if args.config else TrainConfig()
    cfg.seed = _resolve_seed(args)
    cfg.deterministic = bool(args.deterministic)
    if args.iters is not None:
        cfg.total_iters = args.iters
    if args.no_rectifier:
        cfg.use_rectifier = False
    data = load_dataset(args.data)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out_dir / "config.json")

    def progress(step, report, n_splats):
        print(f"iter {step:6d}  loss {report.total:.5f}  splats {n_splats}",
              flush=True)

    state = trainer.train(data.mesh, data.frames, cfg, out_dir,
                          progress=progress)
    print(out_dir / "checkpoint_final.rmav")
    return 0


def cmd_render(args):
    state = trainer.load_checkpoint(args.checkpoint)
    data = load_dataset(args.data)
    frame = _frame_or_die(data, args.frame)
    out = trainer.render_state_frame(state, data.mesh, frame)
    images.save_png(args.out, out.color)
    if args.raw:
        images.save_raw(args.raw, out.color)
    print(args.out)
    return 0


def cmd_animate(args):
    state = trainer.load_checkpoint(args.checkpoint)
    data = load_dataset(args.data)
    frames = data.split(args.split)
    if not frames:
        raise MeshSplatError(f"no frames in split {args.split!r}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(frames):
        out = trainer.render_state_frame(state, data.mesh, frame)
        images.save_png(out_dir / f"anim_{i:04d}.png", out.color)
    print(out_dir)
    return 0


def cmd_eval(args):
    state = trainer.load_checkpoint(args.checkpoint)
    data = load_dataset(args.data)
    frames = data.split(args.split)
    if not frames:
        raise MeshSplatError(f"no frames in split {args.split!r}")
    rows, mean_psnr, mean_ssim = trainer.evaluate(state, data.mesh, frames)
    sink = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(sink)
        w.writerow(["frame", "psnr", "ssim"])
        for idx, p, s in rows:
            w.writerow([idx, repr(p), repr(s)])
        w.writerow(["mean", repr(mean_psnr), repr(mean_ssim)])
    finally:
        if args.out:
            sink.close()
    return 0


def cmd_export_ply(args):
    state = trainer.load_checkpoint(args.checkpoint)
    data = load_dataset(args.data)
    frame = _frame_or_die(data, args.frame)
    rows = plyio.splat_rows_at_pose(state.splats, data.mesh, frame.pose,
                                    rect_params=state.rect_params)
    plyio.export_ply(args.out, rows, binary=not args.ascii)
    print(args.out)
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "render": cmd_render,
    "animate": cmd_animate,
    "eval": cmd_eval,
    "export-ply": cmd_export_ply,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (MeshSplatError, OSError) as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
