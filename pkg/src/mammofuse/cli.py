"""Command-line entry point: ``mammofuse <command> [flags]``.

Exit codes: 0 ok, 2 configuration error, 3 missing artifact, 4 data error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from filelock import FileLock, Timeout

from . import pipeline as P
from .config import ConfigError, PipelineConfig
from .container import IntegrityError
from .dataset import ManifestError

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_DATA = 0, 2, 3, 4
STAGES = ("density", "findings", "localizer", "fusion")


def _common(default=None) -> argparse.ArgumentParser:
    """Flags accepted before or after the subcommand; the subcommand copy uses SUPPRESS
    so it does not overwrite values given before it."""
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, default=default, help="flat 'section.key = value' config file")
    p.add_argument("--out", type=Path, default=default, help="run directory (default: ./run)")
    p.add_argument("--seed", type=int, default=default, help="global seed")
    p.add_argument("--force", action="store_true", default=default, help="overwrite existing generated data")
    p.add_argument("--scale", default=default, help="preprocessing scale factor, e.g. 1/8")
    p.add_argument("--paper-scale", action="store_true", default=default, help="published full-resolution preset")
    p.add_argument("--set", action="append", default=default, metavar="KEY=VALUE", help="override one config key")
    p.add_argument("-v", "--verbose", action="store_true", default=default)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mammofuse", parents=[_common()],
                                     description="multi-task mammography fusion experiments")
    common = _common(argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write the synthetic dataset")
    sub.add_parser("split", parents=[common], help="stratified train/validation/test split")
    t = sub.add_parser("train", parents=[common], help="train one stage")
    t.add_argument("stage", choices=STAGES)
    sub.add_parser("extract", parents=[common], help="materialize the fusion input cache")
    sub.add_parser("evaluate", parents=[common], help="compute metrics, curves and significance tests")
    sub.add_parser("report", parents=[common], help="print the evaluation report")
    sub.add_parser("run", parents=[common], help="all stages in order")
    return parser


def load_config(args: argparse.Namespace) -> PipelineConfig:
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.scale is not None:
        overrides["preprocess.scale"] = args.scale
    return PipelineConfig.load(args.config, overrides, paper_scale=bool(args.paper_scale))


def execute(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    out = args.out or Path("run")
    out.mkdir(parents=True, exist_ok=True)
    try:
        lock = FileLock(str(out / ".lock"))
        lock.acquire(timeout=0)
    except Timeout:
        raise ConfigError(f"{out} is in use by another command")
    try:
        P.setup_determinism(cfg)
        run = P.Run(cfg, out)
        if args.command != "report":
            cfg.write(out / "config.txt")
        if args.command == "generate":
            print(P.cmd_generate(run, force=bool(args.force)))
        elif args.command == "split":
            s = P.cmd_split(run)
            print(f"train={len(s.train)} validation={len(s.validation)} test={len(s.test)}")
        elif args.command == "train":
            {"density": P.train_density_stage, "findings": P.train_findings_stage,
             "localizer": P.train_localizer_stage, "fusion": P.cmd_train_fusion}[args.stage](run)
        elif args.command == "extract":
            counts = P.cmd_extract(run)
            print(" ".join(f"{k}={v}" for k, v in counts.items()))
        elif args.command == "evaluate":
            P.cmd_evaluate(run)
            print(out / "report" / "report.txt")
        elif args.command == "report":
            path = run.require(out / "report" / "report.txt", "report (run evaluate first)")
            sys.stdout.write(path.read_text(encoding="utf-8"))
        elif args.command == "run":
            P.run_all(cfg, out, force=bool(args.force))
            print(out / "report" / "report.txt")
    finally:
        lock.release()
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return execute(args)
    except (ConfigError, FileExistsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (P.MissingArtifact, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (P.DataError, ManifestError, IntegrityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
