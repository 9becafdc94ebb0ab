"""Command-line interface: one subcommand per pipeline stage plus report.

Example:
    visnir-fuse align --config runs/baseline.ini
    visnir-fuse report --runs out/
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import __version__
from .config import load_config
from .pipeline import Pipeline, PipelineError, write_report

STAGE_COMMANDS = ("align", "index", "calibrate", "fuse", "crf", "eval")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="visnir-fuse",
        description="VIS+NIR segmentation post-processing pipeline",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for stage in STAGE_COMMANDS:
        p = sub.add_parser(stage, help=f"run the {stage} stage")
        p.add_argument("--config", required=True, help="pipeline config file")
        p.add_argument("--force", action="store_true", help="re-run even if up to date")
        p.add_argument("--workers", type=int, default=1, help="parallel samples")
    rep = sub.add_parser("report", help="ablation table over completed runs")
    rep.add_argument("--runs", help="directory containing run output directories")
    rep.add_argument("--config", help="config file; its output's parent is scanned")
    rep.add_argument("--force", action="store_true", help=argparse.SUPPRESS)
    rep.add_argument("--workers", type=int, default=1, help=argparse.SUPPRESS)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            if args.runs:
                runs_root = Path(args.runs)
            elif args.config:
                runs_root = load_config(args.config).output.parent
            else:
                raise PipelineError("report needs --runs or --config")
            rows = write_report(
                runs_root, runs_root / "ablation.csv", runs_root / "ablation.txt"
            )
            print(f"wrote ablation table with {rows} rows to {runs_root / 'ablation.csv'}")
            return 0
        config = load_config(args.config)
        if args.workers < 1:
            raise PipelineError("--workers must be at least 1")
        pipeline = Pipeline(config, workers=args.workers, force=args.force)
        pipeline.run_stage(args.command)
        print(f"{args.command}: done -> {config.output / args.command}")
        return 0
    except (PipelineError, OSError, ValueError) as exc:
        print(f"visnir-fuse {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
