"""Command-line entry point: ``marknerf <subcommand> ...``.

Exit codes: 0 ok / accept, 1 error, 2 verification rejected, 3 tamper detected.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import torch
from filelock import FileLock, Timeout

from .errors import MarkNerfError, TamperError

EXIT_OK, EXIT_ERROR, EXIT_REJECT, EXIT_TAMPER = 0, 1, 2, 3

log = logging.getLogger("marknerf")


def _config(args):
    from .pipeline.config import load_config

    overrides = list(args.set or [])
    if getattr(args, "out", None):
        overrides.append(f"run.output_dir={args.out}")
    if getattr(args, "scene", None):
        overrides.append(f"scene.root={args.scene}")
    if getattr(args, "downscale", None):
        overrides.append(f"scene.downscale={args.downscale}")
    for flag, key in (("n_coarse", "nerf.n_coarse"), ("n_fine", "nerf.n_fine")):
        if getattr(args, flag, None) is not None:
            overrides.append(f"{key}={getattr(args, flag)}")
    if getattr(args, "steps", None) is not None:
        section = {"train-joint": "joint", "train-nerf": "nerf", "attack-suite": "nerf",
                   "finetune-extractor": "extractor"}[args.command]
        overrides.append(f"{section}.steps={args.steps}")
    return load_config(args.config, overrides)


def _run_stage(args, fn):
    from .pipeline.config import dump_config

    cfg = _config(args).validate()
    torch.set_num_threads(max(1, cfg.run.threads))
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    try:
        with FileLock(str(cfg.output_dir / ".lock"), timeout=0):
            dump_config(cfg, cfg.output_dir / "config.ini")
            return fn(cfg)
    except Timeout:
        raise MarkNerfError(f"run directory {cfg.output_dir} is locked by another process")


def cmd_verify(args) -> int:
    from .imagery import load_image
    from .pipeline.stages import RunPaths, verify

    paths = RunPaths(args.run_dir) if args.run_dir else None
    pick = lambda given, attr: Path(given) if given else getattr(paths, attr)
    if paths is None and not all([args.field, args.extractor, args.key, args.watermark]):
        raise MarkNerfError("verify needs a run directory or all of --field/--extractor/--key/--watermark")
    report = verify(pick(args.field, "field"), pick(args.extractor, "extractor"), pick(args.key, "key"),
                    load_image(pick(args.watermark, "watermark")), args.tau, args.rotate,
                    paths.provenance() if paths else None)
    text = report.to_json()
    if args.report:
        Path(args.report).write_text(text)
    elif paths is not None and not args.rotate:
        paths.verification.write_text(text)
    sys.stdout.write(text)
    return EXIT_OK if report.accepted else EXIT_REJECT


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="marknerf", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def stage(name, help_text, steps=True, nerf_flags=False):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="INI run config")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
        sp.add_argument("--out", help="run directory (run.output_dir)")
        sp.add_argument("--scene", help="scene root (scene.root)")
        sp.add_argument("--downscale", type=int)
        if steps:
            sp.add_argument("--steps", type=int)
        if nerf_flags:
            sp.add_argument("--n-coarse", dest="n_coarse", type=int)
            sp.add_argument("--n-fine", dest="n_fine", type=int)
        return sp

    stage("train-joint", "pre-train embedder and extractor")
    stage("train-nerf", "build the watermarked training set and fit the field", nerf_flags=True)
    stage("finetune-extractor", "overfit the extractor to the secret view and write the key", nerf_flags=True)
    sw = stage("sweep-angles", "extraction quality versus key rotation", steps=False)
    sw.add_argument("--angles", help="comma-separated degrees")
    at = stage("attack-suite", "retrain under noise attacks and score extraction", nerf_flags=True)
    at.add_argument("--kinds", help="comma-separated noise kinds")

    v = sub.add_parser("verify", help="ownership check from the secret view")
    v.add_argument("run_dir", nargs="?", help="run directory holding field/extractor/key/watermark")
    v.add_argument("--field")
    v.add_argument("--extractor")
    v.add_argument("--key")
    v.add_argument("--watermark")
    v.add_argument("--tau", type=float, default=0.85)
    v.add_argument("--rotate", type=float, default=0.0, help="rotate the key pose about z (degrees)")
    v.add_argument("--report", help="write the JSON report here as well")

    r = sub.add_parser("report", help="aggregate a run directory into summary.md/json and plots")
    r.add_argument("run_dir")

    s = sub.add_parser("synth-scene", help="write a procedural NeRF-synthetic-layout scene")
    s.add_argument("root")
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--train", type=int, default=100)
    s.add_argument("--val", type=int, default=10)
    s.add_argument("--test", type=int, default=10)

    wm = sub.add_parser("synth-watermark", help="write the procedural watermark PNG")
    wm.add_argument("path")
    wm.add_argument("--size", type=int, default=64)
    wm.add_argument("--seed", type=int, default=0)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    from .pipeline import report, stages

    try:
        if args.command == "train-joint":
            _run_stage(args, stages.cmd_train_joint)
        elif args.command == "train-nerf":
            _run_stage(args, stages.cmd_train_nerf)
        elif args.command == "finetune-extractor":
            _run_stage(args, stages.cmd_finetune_extractor)
        elif args.command == "sweep-angles":
            angles = [float(a) for a in args.angles.split(",")] if args.angles else None
            _run_stage(args, lambda cfg: stages.cmd_sweep_angles(cfg, angles))
        elif args.command == "attack-suite":
            kinds = args.kinds.split(",") if args.kinds else None
            _run_stage(args, lambda cfg: stages.cmd_attack_suite(cfg, kinds))
        elif args.command == "verify":
            return cmd_verify(args)
        elif args.command == "report":
            report.cmd_report(args.run_dir)
        elif args.command == "synth-scene":
            from .synthetic import write_scene

            write_scene(args.root, args.size, {"train": args.train, "val": args.val, "test": args.test}, args.seed)
        elif args.command == "synth-watermark":
            from .imagery import save_image
            from .synthetic import make_watermark

            save_image(make_watermark(args.size, args.seed), args.path)
    except TamperError as exc:
        print(f"tamper: {exc}", file=sys.stderr)
        return EXIT_TAMPER
    except (MarkNerfError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
