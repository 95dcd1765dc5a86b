"""Command-line entry point: prepare, train, eval, infer, ablate, flops.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 training diverged.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import config as C
from . import data as D
from .model import ABLATIONS, DSMC
from .u3drdn import u3drdn_flops

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3
SEED_ENV = "DSMC_SEED"

log = logging.getLogger("dsmc")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _keys_epilog() -> str:
    lines = ["configuration keys (file sections, or --set section.key=value):"]
    for section, items in C.all_keys().items():
        lines.append(f"  [{section}]")
        for k, v in items:
            lines.append(f"    {k} = {C.format_value(v)}")
    lines.append(f"environment: {SEED_ENV} overrides the configured seeds; --seed overrides both")
    return "\n".join(lines)


def build_config(args) -> C.Config:
    base = C.Config.desk() if getattr(args, "desk", False) else C.Config()
    cfg = C.load(args.config, base) if getattr(args, "config", None) else base
    sets = list(getattr(args, "set", None) or [])
    if sets:
        by_section = {}
        for item in sets:
            key, eq, val = item.partition("=")
            section, dot, name = key.strip().partition(".")
            if not eq or not dot:
                raise C.ConfigError(f"--set expects section.key=value, got {item!r}")
            by_section.setdefault(section, []).append(f"{name} = {val}")
        text = "\n".join(f"[{s}]\n" + "\n".join(v) for s, v in by_section.items())
        cfg = C.parse(text, cfg)
    overrides = []
    for flag, key in (("scale", "model.scale"), ("displacement", "data.displacement"),
                      ("frames", "data.frames"), ("size", "data.size"), ("clips", "data.clips"),
                      ("pattern", "data.pattern"), ("format", "data.format")):
        if getattr(args, flag, None) is not None:
            section, name = key.split(".")
            overrides.append(f"[{section}]\n{name} = {getattr(args, flag)}")
    if overrides:
        cfg = C.parse("\n".join(overrides), cfg)
    seed = os.environ.get(SEED_ENV)
    if seed is not None:
        try:
            seed = int(seed)
        except ValueError:
            raise C.ConfigError(f"{SEED_ENV} must be an integer, got {seed!r}") from None
    if getattr(args, "seed", None) is not None:
        seed = args.seed
    if seed is not None:
        cfg = C.parse(f"[train]\nseed = {seed}\n[model]\nseed = {seed}\n[data]\nseed = {seed}\n", cfg)
    return cfg


def _hr_root(root) -> Path:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"data directory {root} does not exist")
    return root / "hr" if (root / "hr").is_dir() else root


def _read_clips(root):
    try:
        clips = D.read_clips(root)
    except (OSError, ValueError) as exc:
        raise DataError(str(exc)) from None
    if not clips:
        raise DataError(f"no clip directories under {root}")
    return clips


# ----------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------

def _prepare_synth(args, cfg, root):
    dc = cfg.data
    scale = cfg.model.scale
    for split, count, offset in (("train", dc.clips, 0), ("test", args.test_clips, 1000)):
        for i in range(count):
            spec = D.MotionSpec(dc.displacement, dc.pattern, seed=dc.seed + offset + i, angle=37.0 * i)
            clip = D.synth_video(spec, dc.frames, dc.size, f"{split}_{i:03d}")
            lr = D.make_lr(clip, scale)
            D.write_clip(lr.meta.get("hr_cropped", clip), root / split / "hr" / clip.clip_id, dc.format)
            D.write_clip(lr, root / split / "lr" / clip.clip_id, dc.format)
    D.write_manifest(root / "manifest.txt", {
        "source": "synthetic", "seed": dc.seed, "displacement": dc.displacement,
        "displacement_lr": dc.displacement / scale, "pattern": dc.pattern, "clips": dc.clips,
        "test_clips": args.test_clips, "frames": dc.frames, "size": dc.size, "scale": scale,
        "format": dc.format,
    })
    print(f"wrote {dc.clips} train and {args.test_clips} test clips to {root}")


def _prepare_dir(args, cfg, root):
    src = Path(args.hr_dir)
    if not src.is_dir():
        raise DataError(f"HR directory {src} does not exist")
    scale = cfg.model.scale
    clips, errors = [], []
    for d in sorted(p for p in src.iterdir() if p.is_dir()):
        frames = []
        for path in D.list_frames(d):
            try:
                frames.append(D.read_frame(path))
            except (OSError, ValueError) as exc:
                errors.append(f"{path}: {exc}")
        if frames:
            try:
                clips.append(D.VideoClip(frames, d.name))
            except ValueError as exc:
                errors.append(str(exc))
    if errors:
        raise DataError("unreadable frames:\n  " + "\n  ".join(errors))
    if not clips:
        raise DataError(f"no clip directories with frames under {src}")
    for clip in clips:
        lr = D.make_lr(clip, scale)
        D.write_clip(lr.meta.get("hr_cropped", clip), root / "hr" / clip.clip_id, cfg.data.format)
        D.write_clip(lr, root / "lr" / clip.clip_id, cfg.data.format)
    D.write_manifest(root / "manifest.txt", {"source": str(src), "clips": len(clips), "scale": scale,
                                             "format": cfg.data.format})
    print(f"wrote {len(clips)} clips to {root}")


def cmd_prepare(args, cfg):
    root = Path(args.out_dir or cfg.data.root)
    if args.hr_dir:
        _prepare_dir(args, cfg, root)
    elif args.synth:
        _prepare_synth(args, cfg, root)
    else:
        raise UsageError("prepare needs --hr-dir DIR or --synth")
    return EXIT_OK


def cmd_train(args, cfg):
    from .training import ClipDataset, DivergenceError, Trainer, load_checkpoint, truncate_loss_csv

    root = Path(args.data or cfg.data.root)
    clips = _read_clips(_hr_root(root / "train" if (root / "train").is_dir() else root))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    C.save(cfg, out / "config.txt")
    model = DSMC(cfg.model, cfg.train.ablations)
    try:
        dataset = ClipDataset(clips, cfg.model.scale, cfg.model.window // 2)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    trainer = Trainer(model, dataset, cfg.train)
    if args.resume:
        try:
            ckpt = load_checkpoint(args.resume)
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot read checkpoint {args.resume}: {exc}") from None
        trainer.resume(ckpt)
        truncate_loss_csv(out / "loss.csv", trainer.iteration)
        log.info("resumed at iteration %d", trainer.iteration)
    try:
        trainer.run(cfg.train.iterations, out / "loss.csv", out / "checkpoint.ckpt",
                    {"config": C.serialize(cfg)})
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"trained to iteration {trainer.iteration}; checkpoint at {out / 'checkpoint.ckpt'}")
    return EXIT_OK


def _load_model(path):
    from .training import load_checkpoint, model_from_checkpoint, restore

    try:
        ckpt = load_checkpoint(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None
    model = model_from_checkpoint(ckpt)
    restore(ckpt, model)
    return model


def cmd_eval(args, cfg):
    from .training import evaluate

    root = Path(args.data or cfg.data.root)
    clips = _read_clips(_hr_root(root / "test" if (root / "test").is_dir() else root))
    if args.bicubic:
        model, scale = None, cfg.model.scale
    else:
        if not args.ckpt:
            raise UsageError("eval needs --ckpt (or --bicubic for the baseline)")
        model = _load_model(args.ckpt)
        scale = model.cfg.scale
    rep = evaluate(model, clips, scale)
    if args.report:
        rep.to_csv(args.report)
    for clip, (p, s) in rep.clip_means().items():
        print(f"{clip}\t{p:.4f} dB\t{s:.4f}")
    p, s = rep.mean()
    print(f"mean\t{p:.4f} dB\t{s:.4f}")
    return EXIT_OK


def cmd_infer(args, cfg):
    from .training import upscale_clip

    model = _load_model(args.ckpt)
    try:
        lr = D.read_clip(args.clip)
    except (OSError, ValueError) as exc:
        raise DataError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    srs = upscale_clip(model, lr)
    for i, sr in enumerate(srs):
        for fmt in ("png", "ppm"):
            D.write_frame(out / D.FRAME_PATTERN.format(i, fmt), sr)
    print(f"wrote {len(srs)} frames at {sr.shape[-2]}x{sr.shape[-1]} to {out}")
    return EXIT_OK


def cmd_ablate(args, cfg):
    from .training import ablate

    root = Path(args.data or cfg.data.root)
    train = _read_clips(_hr_root(root / "train" if (root / "train").is_dir() else root))
    test = _read_clips(_hr_root(root / "test" if (root / "test").is_dir() else root))
    variants = [()]
    for v in args.flags:
        flags = tuple(f for f in v.split("+") if f)
        bad = [f for f in flags if f not in ABLATIONS]
        if bad:
            raise UsageError(f"unknown ablation {bad}; choose from {', '.join(ABLATIONS)}")
        variants.append(flags)
    rows = ablate(variants, cfg.model, cfg.train, train, test, args.out)
    for name, p, s, dp, ds in rows:
        print(f"{name}\t{p:.4f} dB\t{s:.4f}\t{dp:+.4f}\t{ds:+.4f}")
    return EXIT_OK


def cmd_flops(args, cfg):
    shape = tuple(int(v) for v in args.shape.split(","))
    if len(shape) != 5:
        raise UsageError("--shape expects N,C,D,H,W")
    ucfg = cfg.model.u3drdn_config()
    res = u3drdn_flops(ucfg, shape)
    print(f"input {shape}")
    print(f"u3drdn_gflops\t{res['u3drdn_flops'] / 1e9:.3f}")
    print(f"flat_gflops\t{res['flat_flops'] / 1e9:.3f}")
    print(f"ratio\t{res['ratio']:.3f}")
    print(f"reduction\t{res['reduction']:.3f}")
    print(f"u3drdn_params\t{res['u3drdn_params']}")
    print(f"flat_params\t{res['flat_params']}")
    for k, v in DSMC(cfg.model).param_report().items():
        print(f"params.{k}\t{v}")
    return EXIT_OK


def build_parser() -> Parser:
    p = Parser(prog="dsmc", description="Video super-resolution with deformable, U-shaped "
               "3D dense and multi-stage upsampling blocks.",
               epilog=_keys_epilog(), formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    def common(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one key")
        sp.add_argument("--desk", action="store_true", help="start from the small CPU configuration")
        sp.add_argument("--seed", type=int, help="overrides train.seed and model.seed")
        sp.formatter_class = argparse.RawDescriptionHelpFormatter
        sp.epilog = _keys_epilog()

    sp = sub.add_parser("prepare", help="derive LR clips from HR frames, or generate synthetic clips")
    common(sp)
    sp.add_argument("--hr-dir", help="directory of <clip_id>/frame_XXXXXXXX.(png|ppm) HR clips")
    sp.add_argument("--out-dir")
    sp.add_argument("--scale", type=int)
    sp.add_argument("--synth", action="store_true", help="generate synthetic moving-texture clips")
    sp.add_argument("--displacement", type=float, help="HR pixels per frame")
    sp.add_argument("--frames", type=int)
    sp.add_argument("--size", type=int)
    sp.add_argument("--clips", type=int)
    sp.add_argument("--test-clips", type=int, default=3)
    sp.add_argument("--pattern", choices=D.PATTERNS)
    sp.add_argument("--format", choices=("png", "ppm"))
    sp.set_defaults(fn=cmd_prepare)

    sp = sub.add_parser("train", help="train a model")
    common(sp)
    sp.add_argument("--data")
    sp.add_argument("--out", required=True, help="run directory (checkpoint, loss.csv, config.txt)")
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="PSNR/SSIM on HR clips")
    common(sp)
    sp.add_argument("--data")
    sp.add_argument("--ckpt")
    sp.add_argument("--bicubic", action="store_true", help="score bicubic upscaling instead")
    sp.add_argument("--report", help="per-frame CSV")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("infer", help="upscale an LR clip directory")
    common(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--clip", required=True, help="LR clip directory")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_infer)

    sp = sub.add_parser("ablate", help="train and score ablation variants against the baseline")
    common(sp)
    sp.add_argument("--data")
    sp.add_argument("--flags", nargs="*", default=[],
                    help="variants to compare, '+'-joined for combinations (none: baseline only)")
    sp.add_argument("--out", help="CSV of variant, psnr, ssim and deltas")
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("flops", help="parameter and FLOP counts")
    common(sp)
    sp.add_argument("--shape", default="1,64,5,64,64", help="U3D-RDN input N,C,D,H,W")
    sp.set_defaults(fn=cmd_flops)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(args)
        return args.fn(args, cfg)
    except (C.ConfigError, UsageError) as exc:
        print(f"dsmc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"dsmc: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
