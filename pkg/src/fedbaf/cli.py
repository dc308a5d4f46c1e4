"""Command-line entry point: ``fedbaf {pretrain,run,compare,analyze}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as config_io
from . import runner
from .analysis import AnalysisPrecondition
from .checkpoint import CheckpointError
from .config import ExperimentConfig
from .federation import RoundAbort
from .model import ConfigError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ABORT = 3
EXIT_PRECONDITION = 4

log = logging.getLogger("fedbaf")


def _common(p: argparse.ArgumentParser, multi_config: bool = False) -> None:
    if multi_config:
        p.add_argument("--config", action="append", required=True,
                       help="config file of one arm (repeat for each arm)")
    else:
        p.add_argument("--config", help="experiment config (INI)")
    p.add_argument("--seed", type=int, help="override the master seed")
    p.add_argument("--trials", type=int, help="number of trials (seeds seed..seed+N-1)")
    p.add_argument("--out", help="output path")
    p.add_argument("--debug-alpha", action="store_true",
                   help="export the per-round alpha draws (server-private otherwise)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedbaf", description="Federated learning simulator with foundation-model biasing."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train the foundation model and write a checkpoint")
    _common(p)

    p = sub.add_parser("run", help="run a federated experiment")
    _common(p)
    p.add_argument("--threshold", type=float, default=0.8,
                   help="accuracy for the rounds-to-threshold summary field")

    p = sub.add_parser("compare", help="run several arms on shared seeds")
    _common(p, multi_config=True)
    p.add_argument("--threshold", type=float, default=0.8)

    p = sub.add_parser("analyze", help="run offline checks over a finished run directory")
    _common(p)
    p.add_argument("--run-dir", help="run directory (defaults to --out or the config's run.out)")
    p.add_argument("--checks", default="",
                   help=f"comma-separated subset of {','.join(runner.ALL_CHECKS)} or 'all' (extraction only with --pair)")
    p.add_argument("--pair", help="companion run directory for the extraction check")
    p.add_argument("--threshold", type=float, default=0.8)
    return parser


def _load(path: str | None, args) -> ExperimentConfig:
    if path is None:
        raise ConfigError("--config is required")
    cfg = config_io.load(path)
    run = {}
    if args.seed is not None:
        run["seed"] = args.seed
    if args.trials is not None:
        if args.trials < 1:
            raise ConfigError("--trials must be >= 1")
        run["trials"] = args.trials
    if args.out is not None:
        run["out"] = args.out
    if args.debug_alpha:
        run["debug_alpha"] = True
    return cfg.replace(run=run)


def _pretrain(args) -> int:
    cfg = _load(args.config, args)
    if args.seed is not None:
        cfg = cfg.replace(pretrain={"seed": args.seed})
    cfg.validate(check_files=False)
    info = runner.cmd_pretrain(cfg, args.out)
    print(f"foundation checkpoint: {info['checkpoint']}")
    print(f"pretrain test accuracy: {info['test_accuracy']:.4f}")
    return EXIT_OK


def _run(args) -> int:
    cfg = _load(args.config, args)
    summary = runner.cmd_run(cfg, threshold=args.threshold)
    trials = summary.get("trials", [summary])
    for i, t in enumerate(trials):
        hit = t["threshold_round"]
        reached = "not reached" if hit is None else f"round {hit + 1}"
        print(f"trial {i}: final acc {t['final_global_acc']:.4f}, "
              f"{args.threshold:g} accuracy {reached}")
    print(f"results in {cfg.run.out}")
    return EXIT_OK


def _compare(args) -> int:
    configs = [_load(path, args) for path in args.config]
    for cfg in configs:
        cfg.validate()
    out = Path(args.out) if args.out else None
    names = [Path(p).stem for p in args.config]
    if len(set(names)) != len(names):
        names = None
    report = runner.compare(configs, args.threshold, out=out, names=names)
    print(report.table())
    if out is None:
        print(json.dumps(report.as_dict(), indent=2, default=str))
    return EXIT_OK


def _analyze(args) -> int:
    checks = [c.strip() for c in args.checks.split(",") if c.strip()]
    if checks == ["all"]:
        checks = [c for c in runner.ALL_CHECKS if c != "extraction" or args.pair]
    run_dir = args.run_dir or args.out
    if run_dir is None:
        run_dir = _load(args.config, args).run.out
    seed = args.seed if args.seed is not None else 0
    report = runner.cmd_analyze(run_dir, checks, args.pair, args.threshold, seed)
    sys.stdout.write(runner.summary_text(report))
    return EXIT_OK


COMMANDS = {"pretrain": _pretrain, "run": _run, "compare": _compare, "analyze": _analyze}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, CheckpointError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AnalysisPrecondition as exc:
        print(f"analysis precondition failed: {exc}", file=sys.stderr)
        return EXIT_PRECONDITION
    except (RoundAbort, FloatingPointError, RuntimeError) as exc:
        print(f"run aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
