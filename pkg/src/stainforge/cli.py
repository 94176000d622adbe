"""Command-line entry point wiring the full pipeline:

    gen-data -> train-task -> train-style (stages 1-3) -> normalize -> eval -> report

Global flags: --config, --set PATH=VALUE, --seed, --out, --force,
--dry-run. The STAINFORGE_SEED environment variable takes precedence over
both the config seed and --seed. Failures exit with a category code:
ConfigError 2, DataError 3, TrainingError 4, IoError 5.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .config import GlobalConfig, load_config
from .errors import ConfigError, IoError, StainforgeError
from . import pipeline
from .trainer import read_metrics_csv, write_metrics_csv


def _add_common(parser: argparse.ArgumentParser, out_required: bool = True) -> None:
    parser.add_argument("--config", help="path to the global JSON config")
    parser.add_argument(
        "--set",
        action="append",
        default=[],
        dest="overrides",
        metavar="PATH=VALUE",
        help="dotted-path config override, e.g. --set stages.stage1.steps=500",
    )
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", required=out_required, help="output directory")
    parser.add_argument(
        "--force", action="store_true", help="overwrite existing outputs"
    )
    parser.add_argument(
        "--dry-run",
        action="store_true",
        help="validate config, print the resolved plan, write nothing",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stainforge")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render the paired synthetic corpus")
    _add_common(p)

    p = sub.add_parser("train-task", help="pretrain a task-network variant")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument(
        "--variant", default="color", choices=pipeline.TASK_VARIANTS
    )

    p = sub.add_parser("train-style", help="run one style-training stage")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--stage", type=int, required=True, choices=(1, 2, 3))
    p.add_argument("--init", help="previous-stage checkpoint (stages 2 and 3)")
    p.add_argument("--resume", help="mid-stage checkpoint to continue from")
    p.add_argument("--task-ckpt", help="frozen task checkpoint (stage 3)")

    p = sub.add_parser("normalize", help="stain-normalize a directory of PNGs")
    _add_common(p)
    p.add_argument("--data", required=True, help="directory of input PNGs")
    p.add_argument("--ckpt", help="style checkpoint providing the generator")
    p.add_argument(
        "--dump-gm",
        action="store_true",
        help="also write the gray and mask planes per input",
    )

    p = sub.add_parser("eval", help="compute the accuracy/distance report")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument(
        "--ckpt",
        action="append",
        required=True,
        dest="ckpt_dirs",
        help="run directory with task/style checkpoints; repeatable",
    )

    p = sub.add_parser("report", help="render the accuracy-vs-step figure")
    _add_common(p)
    p.add_argument("--metrics", required=True, help="metrics CSV from train-style")
    return parser


def resolve_config(args: argparse.Namespace) -> GlobalConfig:
    cfg = load_config(args.config, args.overrides)
    if args.seed is not None:
        cfg.seed = args.seed
    env_seed = os.environ.get("STAINFORGE_SEED")
    if env_seed is not None and env_seed != "":
        try:
            cfg.seed = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"STAINFORGE_SEED={env_seed!r} is not an integer") from exc
    return cfg


def _check_outputs(paths: list[Path], force: bool) -> None:
    if force:
        return
    for path in paths:
        if path.exists():
            raise IoError(f"refusing to overwrite {path}; pass --force")


def _prune_metrics(out_dir: Path, stage: int) -> None:
    """Drop metric rows at or beyond `stage` before a fresh (non-resume) run."""
    path = out_dir / "metrics.csv"
    if not path.exists():
        return
    rows = [r for r in read_metrics_csv(path) if r[1] < stage]
    write_metrics_csv(path, rows, append=False)


def run_command(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    outputs = pipeline.planned_outputs(args.command, args)

    if args.command == "normalize":
        if not args.ckpt and not args.dump_gm:
            raise ConfigError("normalize needs --ckpt and/or --dump-gm")
        in_dir = Path(args.data)
        out_dir = Path(args.out)
        for src in sorted(in_dir.glob("*.png")):
            if args.dump_gm:
                outputs += [out_dir / f"{src.stem}_gray.png", out_dir / f"{src.stem}_mask.png"]
            if args.ckpt:
                outputs.append(out_dir / f"{src.stem}_norm.png")

    if args.dry_run:
        plan = {
            "command": args.command,
            "seed": cfg.seed,
            "outputs": [str(p) for p in outputs],
            "config": cfg.to_dict(),
        }
        print(json.dumps(plan, indent=2, sort_keys=True))
        return 0

    _check_outputs(outputs, args.force)

    if args.command == "gen-data":
        manifest = pipeline.gen_data(cfg, args.out)
        print(f"gen-data: wrote {len(manifest.entries)} images under {args.out}")
    elif args.command == "train-task":
        ckpt = pipeline.train_task(cfg, args.data, args.out, variant=args.variant)
        print(f"train-task: saved {ckpt}")
    elif args.command == "train-style":
        if not args.resume:
            _prune_metrics(Path(args.out), args.stage)
        ckpt = pipeline.train_style(
            cfg,
            args.data,
            args.out,
            stage=args.stage,
            init_ckpt=args.init,
            resume_ckpt=args.resume,
            task_ckpt=args.task_ckpt,
        )
        print(f"train-style: stage {args.stage} saved {ckpt}")
    elif args.command == "normalize":
        written = pipeline.normalize_dir(
            args.data, args.out, generator_ckpt=args.ckpt, dump_gm=args.dump_gm
        )
        print(f"normalize: wrote {len(written)} files under {args.out}")
    elif args.command == "eval":
        report = pipeline.run_eval(cfg, args.ckpt_dirs, args.data, args.out)
        print(
            f"eval: wrote report.csv and distances.csv under {args.out} "
            f"({len(report.accuracies)} accuracy conditions)"
        )
    elif args.command == "report":
        fig = pipeline.run_report(args.metrics, args.out)
        print(f"report: wrote {fig}")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run_command(args)
    except StainforgeError as exc:
        message = " ".join(str(exc).split())
        print(
            f"stainforge: category={exc.category} exit={exc.exit_code} "
            f'message="{message}"',
            file=sys.stderr,
        )
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
