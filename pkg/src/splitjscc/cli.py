"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 runtime failure, 3 sweep
finished with failed cells.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

from .complexity import device_flops
from .errors import ConfigError
from .harness import RESULTS_FILE, emit, expand_grid, load_config, run, sweep
from .models import build_split_model, uniform_widths
from .results import read_csv

log = logging.getLogger("splitjscc")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_PARTIAL = 0, 1, 2, 3
STAGE_COMMANDS = {"pretrain": "phase1", "prune": "phase2", "codec": "phase3", "e2e": "phase4"}


def _snr_list(text: str) -> list[float]:
    try:
        return [float(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad SNR list {text!r}: {exc}") from exc


class _Parser(argparse.ArgumentParser):
    """Usage errors are configuration errors (exit 1), not argparse's default 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON experiment config")
    common.add_argument("--seed", type=int)
    common.add_argument("--snr-db", type=_snr_list, help="comma-separated SNRs in dB, e.g. 20,0,-5")
    common.add_argument("--split", type=int, choices=range(1, 6))
    common.add_argument("--ratio", type=float, help="pruning ratio in [0, 1)")
    common.add_argument("--c-enc", type=int, help="encoder output channels (0 = no codec)")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--resume", action="store_true", help="reuse checkpoints and rows already in --out")
    common.add_argument("--format", choices=("csv", "json"), default="csv")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="splitjscc", description="Pruned split computing with a learned channel codec.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, phase in STAGE_COMMANDS.items():
        sub.add_parser(name, parents=[common], help=f"run the pipeline up to {phase}, reusing earlier checkpoints")
    sub.add_parser("eval", parents=[common], help="train (or resume) and evaluate at every SNR")
    sub.add_parser("sweep", parents=[common], help="run the grid from the config file")
    fr = sub.add_parser("frontier", parents=[common], help="FLOPs-vs-bandwidth frontier from results.csv")
    fr.add_argument("--floor", type=float, default=0.02, help="accuracy floor below the baseline")
    sub.add_parser("flops", parents=[common], help="device-side FLOPs for --split/--ratio/--c-enc")
    return parser


def _overrides(args) -> dict:
    return {
        "seed": args.seed,
        "snr_db_list": args.snr_db,
        "split": args.split,
        "pruning_ratio": args.ratio,
        "c_enc": args.c_enc,
        "output_dir": None if args.out is None else str(args.out),
    }


def _print_rows(rows) -> None:
    for r in rows:
        print(
            f"split={r.split} ratio={r.ratio:g} c_enc={r.c_enc} B={r.bandwidth} snr={r.snr_db:g}dB "
            f"acc={r.accuracy:.4f} baseline={r.baseline_accuracy:.4f} flops={r.device_flops}"
        )


def _cmd_flops(cfg) -> int:
    widths = uniform_widths(cfg.backbone, cfg.split, cfg.pruning_ratio)
    model = build_split_model(cfg.backbone, cfg.split, widths=widths, c_enc=cfg.c_enc or None)
    report = device_flops(model).to_dict()
    report["bandwidth"] = model.bandwidth if model.has_codec else None
    print(json.dumps(report, indent=2))
    return EXIT_OK


def _cmd_frontier(cfg, args) -> int:
    path = Path(cfg.output_dir) / RESULTS_FILE
    if not path.exists():
        raise ConfigError(f"no results at {path}")
    written = emit(read_csv(path), cfg.output_dir, args.format, args.floor)
    print(*written, sep="\n")
    return EXIT_OK


def dispatch(args) -> int:
    cfg, grid = load_config(args.config, _overrides(args))
    if args.command == "flops":
        return _cmd_flops(cfg)
    if args.command == "frontier":
        return _cmd_frontier(cfg, args)
    if args.command in STAGE_COMMANDS:
        run(cfg, resume=True, until=STAGE_COMMANDS[args.command])
        print(f"{args.command}: checkpoints in {Path(cfg.output_dir) / 'checkpoints'}")
        return EXIT_OK
    if args.command == "eval":
        rows = run(cfg, resume=args.resume)
        _print_rows(rows)
        emit(rows, cfg.output_dir, args.format)
        return EXIT_OK
    # sweep
    cells = expand_grid(cfg, grid) if grid else [cfg]
    result = sweep(cells, resume=args.resume)
    _print_rows(result.rows)
    emit(result.rows, cfg.output_dir, args.format, frontier_floor=0.02)
    if result.partial:
        for i, _, err in result.failures:
            print(f"cell {i} failed: {err}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.ratio is not None and not (0 <= args.ratio < 1 and math.isfinite(args.ratio)):
        print(f"error: --ratio must lie in [0, 1), got {args.ratio}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        print("interrupted; rerun with --resume to continue", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # surfaced as a runtime failure exit code
        log.debug("runtime failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
