"""Command line entry point.

    feddeo run --out runs/demo
    feddeo sweep --kind S --values 1,10,20 --out runs/sweep
    feddeo report --out runs/demo

Subcommands map onto pipeline stages; ``run`` executes everything in order.
Exit codes: 0 success, 2 bad config or arguments, 3 stage failure,
4 integrity or file-format corruption.
"""

from __future__ import annotations

import argparse
import sys

from .checkpoint import CheckpointFormatError
from .client import UploadFormatError
from .config import ConfigError, load_config
from .diffusion import IntegrityError
from .pipeline import STAGE_ORDER, StageError, run_pipeline, run_sweep

_STAGE_COMMANDS = {
    "pretrain": "pretrain",
    "train-descriptions": "descriptions",
    "generate": "generate",
    "train-aggregate": "aggregate",
    "evaluate": "evaluate",
    "report": "report",
}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--seed", type=int, help="override the master seed")
    p.add_argument("--out", help="output directory (default runs/default)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config field; repeatable")
    p.add_argument("--force", action="store_true",
                   help="recompute stages even when cached outputs match")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="feddeo",
                                     description="one-shot federated learning on a "
                                     "synthetic benchmark, driven by uploaded "
                                     "per-category description vectors")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run the full pipeline")
    _add_common(p_run)
    p_run.add_argument("--stage", choices=STAGE_ORDER,
                       help="stop after this stage instead of running everything")

    for cmd, stage in _STAGE_COMMANDS.items():
        p = sub.add_parser(cmd, help=f"run only the {stage} stage")
        _add_common(p)

    p_sweep = sub.add_parser("sweep", help="rerun downstream stages over a knob")
    _add_common(p_sweep)
    p_sweep.add_argument("--kind", required=True, choices=["R", "S"],
                         help="R: synthetic samples per pair, S: description epochs")
    p_sweep.add_argument("--values", required=True,
                         help="comma separated positive integers, e.g. 1,10,20")
    return parser


def _config_from_args(args) -> "ExperimentConfig":
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.out is not None:
        overrides["out_dir"] = args.out
    return load_config(args.config, overrides=overrides)


def _print_result(res) -> None:
    if res.stages_run:
        print("ran:    " + ", ".join(res.stages_run))
    if res.stages_reused:
        print("reused: " + ", ".join(res.stages_reused))
    for table in res.tables:
        cells = " ".join(f"c{cid}={acc:.3f}" for cid, acc in sorted(table.per_client.items()))
        print(f"{table.method:>13}: mean={table.average:.3f}  {cells}")
    if res.summary:
        kl = res.summary.get("kl_mean", {})
        if kl:
            print("kl mean: " + " ".join(f"{m}={v:.3f}" for m, v in sorted(kl.items())))
        for key in ("comm_ratio_fedavg_over_feddeo", "comm_ratio_ceiling_over_feddeo"):
            if key in res.summary:
                print(f"{key.replace('_', ' ')}: {res.summary[key]:.1f}x")
    print(f"outputs in {res.out_dir} (config {res.digest})")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        cfg = _config_from_args(args)
        if args.command == "run":
            res = run_pipeline(cfg, upto=args.stage, force=args.force)
            _print_result(res)
        elif args.command in _STAGE_COMMANDS:
            stage = _STAGE_COMMANDS[args.command]
            res = run_pipeline(cfg, only=stage, force=args.force)
            _print_result(res)
        elif args.command == "sweep":
            try:
                values = [int(v) for v in args.values.split(",") if v.strip()]
            except ValueError:
                raise ConfigError(f"--values expects integers, got {args.values!r}")
            rows = run_sweep(cfg, args.kind, values)
            for value, res in rows:
                line = " ".join(f"{t.method}={t.average:.3f}" for t in res.tables)
                print(f"{args.kind}={value}: {line}")
            print(f"outputs in {cfg.out_dir}")
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (IntegrityError, CheckpointFormatError, UploadFormatError) as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return 4
    except StageError as exc:
        print(f"stage error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
