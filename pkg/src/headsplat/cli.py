"""Command-line entry point: ``headsplat <command> [options]``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import kernels
from .geometry import camera_from_orbit, save_mesh
from .image import load_image, save_png
from .metrics import fid, kid, load_features, load_score_records, perceptual_aggregate, psnr, ssim
from .pipeline import (
    STAGES,
    SceneConfig,
    load_checkpoint,
    load_config,
    load_subject,
    render_avatar,
    run_loop,
    save_checkpoint,
    stage_schedule,
    subject_to_dict,
)
from .scene import make_subject

log = logging.getLogger("headsplat")

SCENE_TEMPLATE = """\
# Bundled synthetic subject written by `headsplat make-scene`.
seed = 0
rounds = 1

[scene]
mesh = "head.obj"
blendshapes = "head_blendshapes.txt"
subject = "subject.json"

[cameras]
count = 16
span = 120.0
profile = "desk"
"""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(2)


def _common(p: argparse.ArgumentParser, out_help: str):
    p.add_argument("--config", help="scene TOML file (bundled defaults when omitted)")
    p.add_argument("--seed", type=int, help="override the configured random seed")
    p.add_argument("--out", help=out_help)
    p.add_argument("--threads", type=int, default=1, help="rasteriser threads (1 gives bitwise reproducibility)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="headsplat", description="Head avatars with pseudo-supervised back views.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("make-scene", help="write the bundled synthetic subject and a scene config")
    _common(p, "output directory")

    p = sub.add_parser("fit", help="frontal-only avatar fit")
    _common(p, "output directory")

    for name, help_text in (("invert", "render novel views and invert the generator"),
                            ("synthesize", "sample back cameras for pseudo views"),
                            ("align", "alignment against real and pseudo views")):
        p = sub.add_parser(name, help=help_text)
        _common(p, "output directory")
        p.add_argument("--checkpoint", required=True, help="checkpoint to continue from")

    p = sub.add_parser("loop", help="run the full pipeline")
    _common(p, "output directory")
    p.add_argument("--resume", help="continue from a stage checkpoint")

    p = sub.add_parser("render", help="render the avatar (or the ground truth) from one camera")
    _common(p, "output PNG path")
    p.add_argument("--checkpoint", help="avatar checkpoint; renders the ground-truth subject when omitted")
    p.add_argument("--camera-azimuth", type=float, default=0.0)
    p.add_argument("--camera-elevation", type=float, default=0.0)
    p.add_argument("--pseudo", action="store_true", help="render at the pseudo-view resolution")

    p = sub.add_parser("eval", help="image, distribution or perceptual-score metrics")
    _common(p, "CSV output path (stdout when omitted)")
    p.add_argument("--metric", required=True, choices=["psnr", "ssim", "l1", "fid", "kid", "perceptual"])
    p.add_argument("--pred-dir")
    p.add_argument("--ref-dir")
    p.add_argument("--features-a")
    p.add_argument("--features-b")
    p.add_argument("--scores", help="JSON-lines score records")
    return parser


def _config(args) -> SceneConfig:
    cfg = load_config(args.config) if args.config else SceneConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _require_out(args):
    if not args.out:
        raise ValueError("--out is required for this command")
    return Path(args.out)


def cmd_make_scene(args) -> int:
    out = _require_out(args)
    out.mkdir(parents=True, exist_ok=True)
    subject = make_subject()
    save_mesh(subject.mesh, out / "head.obj", out / "head_blendshapes.txt")
    (out / "subject.json").write_text(json.dumps(subject_to_dict(subject)))
    (out / "scene.toml").write_text(SCENE_TEMPLATE)
    print(out / "scene.toml")
    return 0


def _continue(args, target_stage: str) -> int:
    cfg = _config(args)
    ckpt = load_checkpoint(args.checkpoint)
    schedule = stage_schedule(max(cfg.rounds, ckpt.round_index + 2))
    here = schedule.index((ckpt.round_index, ckpt.stage))
    target = next(((r, s) for r, s in schedule[here + 1:] if s == target_stage), None)
    cfg.rounds = max(cfg.rounds, target[0] + 1)
    result = run_loop(cfg, _require_out(args), resume=ckpt, stop_after=target)
    _print_report(result.report)
    return 0


def _print_report(rows):
    writer = csv.writer(sys.stdout)
    writer.writerow(["stage", "metric", "value"])
    for row in rows:
        writer.writerow([row[0], row[1], repr(float(row[2]))])


def cmd_fit(args) -> int:
    result = run_loop(_config(args), _require_out(args), stop_after=(0, "fit"))
    _print_report(result.report)
    return 0


def cmd_loop(args) -> int:
    cfg = _config(args)
    resume = load_checkpoint(args.resume) if args.resume else None
    result = run_loop(cfg, _require_out(args), resume=resume)
    _print_report(result.report)
    return 0


def cmd_render(args) -> int:
    cfg = _config(args)
    subject = load_subject(cfg)
    res = cfg.cameras.pseudo_resolution if args.pseudo else cfg.cameras.real_resolution
    cam = camera_from_orbit(args.camera_azimuth % 360.0, args.camera_elevation, cfg.cameras.radius,
                            focal=cfg.cameras.focal, resolution=res)
    if args.checkpoint:
        img = render_avatar(load_checkpoint(args.checkpoint), subject, cam)
    else:
        img = subject.render_truth(cam)
    out = _require_out(args)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_png(img, out)
    return 0


def _image_rows(args):
    if not (args.pred_dir and args.ref_dir):
        raise ValueError(f"--pred-dir and --ref-dir are required for {args.metric}")
    pred, ref = Path(args.pred_dir), Path(args.ref_dir)
    names = sorted(p.name for p in pred.iterdir() if p.suffix.lower() in (".png", ".ppm"))
    if not names:
        raise ValueError(f"no images found in {pred}")
    rows = []
    for name in names:
        if not (ref / name).exists():
            raise ValueError(f"{name} has no counterpart in {ref}")
        a, b = load_image(pred / name), load_image(ref / name)
        if args.metric == "psnr":
            value = psnr(a, b)
        elif args.metric == "ssim":
            value = ssim(a, b)
        else:
            value = float(np.mean(np.abs(a.rgb - b.rgb)))
        rows.append((name, value))
    rows.append(("mean", float(np.mean([v for _, v in rows]))))
    return rows


def cmd_eval(args) -> int:
    if args.metric in ("psnr", "ssim", "l1"):
        rows = _image_rows(args)
    elif args.metric in ("fid", "kid"):
        if not (args.features_a and args.features_b):
            raise ValueError(f"--features-a and --features-b are required for {args.metric}")
        a, b = load_features(args.features_a), load_features(args.features_b)
        rows = [(args.metric, fid(a, b) if args.metric == "fid" else kid(a, b))]
    else:
        if not args.scores:
            raise ValueError("--scores is required for perceptual")
        means, overall = perceptual_aggregate(load_score_records(args.scores))
        rows = list(means.items()) + [("overall", overall)]
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        writer = csv.writer(fh)
        writer.writerow(["item", args.metric])
        for name, value in rows:
            writer.writerow([name, repr(float(value))])
    finally:
        if args.out:
            fh.close()
    return 0


COMMANDS = {
    "make-scene": cmd_make_scene,
    "fit": cmd_fit,
    "invert": lambda a: _continue(a, "invert"),
    "synthesize": lambda a: _continue(a, "synthesize"),
    "align": lambda a: _continue(a, "align"),
    "loop": cmd_loop,
    "render": cmd_render,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.threads < 1:
            raise ValueError("--threads must be >= 1")
        kernels.set_threads(args.threads)
        return COMMANDS[args.command](args)
    except Exception as exc:  # runtime failures map to exit status 1
        print(f"headsplat {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
