"""Command-line entry point: ``fafl run | sweep | report | validate-config``.

Exit codes: 0 success, 1 configuration or usage error, 2 runtime error.
Every failure prints exactly one line ``FAFL-E-<KIND>: <message>`` to stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from .config import dump_config, parse_config
from .engine import ExperimentConfig, run_experiment, run_sweep
from .errors import ConfigError, FaflError
from .report import build_report, cells_from_sweep, emit_csv, emit_panels, format_summary, load_cells

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class UsageError(ConfigError):
    code = "FAFL-E-USAGE"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _csv_list(kind):
    def parse(text: str):
        try:
            return [kind(x) for x in text.split(",") if x.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad list {text!r}") from None
    return parse


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML experiment config (defaults apply when omitted)")
    p.add_argument("--rounds", type=int)
    p.add_argument("--clients", type=int)
    p.add_argument("--noniid-classes", type=int, dest="noniid_classes",
                   help="max distinct labels in each client's restricted fraction")
    p.add_argument("--workers", type=int)
    p.add_argument("--no-encrypt", action="store_true", help="send plaintext frames")
    p.add_argument("--no-timing", action="store_true",
                   help="do not record wall-clock crypto time (fully deterministic outputs)")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fafl", description="Fairness-aware federated learning simulator")
    p.add_argument("--version", action="version", version=f"fafl {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run a single experiment")
    _common(run)
    run.add_argument("--mechanism")
    run.add_argument("--adversaries", type=int)
    run.add_argument("--alpha", type=float)
    run.add_argument("--seed", type=int)
    run.add_argument("--out", default="fafl-run", help="output directory")

    sw = sub.add_parser("sweep", help="alpha x scheme x seed grid with an on-disk cache")
    _common(sw)
    sw.add_argument("--alphas", type=_csv_list(float), default=[0.2, 0.4, 0.7])
    sw.add_argument("--mechanisms", type=_csv_list(str),
                    default=["fedavg", "ltf", "reputation", "reputation@1"],
                    help="comma list; NAME@A adds A label-flipping adversaries")
    sw.add_argument("--seeds", type=_csv_list(int), default=[0, 1, 2])
    sw.add_argument("--out-dir", default="fafl-sweep")
    sw.add_argument("--resume", action="store_true", help="reuse completed cells in --out-dir")

    rep = sub.add_parser("report", help="CSV table and SVG panels from a sweep directory")
    rep.add_argument("--in-dir", required=True)
    rep.add_argument("--csv")
    rep.add_argument("--svg")

    val = sub.add_parser("validate-config", help="parse a config and print the resolved form")
    val.add_argument("path", nargs="?")
    val.add_argument("--config", dest="config_opt")
    return p


def _resolve(args) -> ExperimentConfig:
    cfg = parse_config(args.config) if args.config else ExperimentConfig()
    top = {}
    for flag, attr in (("rounds", "rounds"), ("clients", "clients"), ("workers", "workers"),
                       ("mechanism", "mechanism"), ("adversaries", "adversaries"),
                       ("seed", "seed")):
        value = getattr(args, flag, None)
        if value is not None:
            top[attr] = value
    if args.no_encrypt:
        top["encrypt"] = False
    if args.no_timing:
        top["record_timing"] = False
    part = {}
    if getattr(args, "alpha", None) is not None:
        part["alpha"] = args.alpha
    if args.noniid_classes is not None:
        part["max_labels"] = args.noniid_classes
    if part:
        top["partition"] = dataclasses.replace(cfg.partition, **part)
    return cfg.replace(**top).validate()


def cmd_run(args) -> int:
    cfg = _resolve(args)
    series = run_experiment(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    series.to_csv(out / "metrics.csv")
    if cfg.record_timing:
        series.timing_csv(out / "timing.csv")
    (out / "config.toml").write_text(dump_config(cfg), encoding="utf-8")
    summary = {
        "mechanism": cfg.mechanism,
        "final_accuracy": series.final_accuracy,
        "mean_last10_accuracy": series.mean_last_accuracy(10),
        "total_bytes": series.total_bytes,
        "total_latency_ms": series.total_latency_ms,
        "crypto_time_ms": series.crypto_time_ms,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    print(f"{cfg.mechanism}: final accuracy {series.final_accuracy:.4f} after {cfg.rounds} "
          f"rounds; metrics in {out / 'metrics.csv'}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    base = _resolve(args)
    result = run_sweep(base, args.alphas, args.mechanisms, args.seeds, args.out_dir,
                       resume=args.resume)
    print(f"{len(result.cells)} cells ({result.computed} computed, {result.cached} cached) "
          f"in {args.out_dir}")
    print(format_summary(build_report(cells_from_sweep(result))))
    return EXIT_OK


def cmd_report(args) -> int:
    cells = load_cells(args.in_dir)
    if not cells:
        raise FaflError(f"no completed cells in {args.in_dir}")
    report = build_report(cells)
    if args.csv:
        emit_csv(report, args.csv)
    if args.svg:
        emit_panels(cells, args.svg)
    print(format_summary(report))
    return EXIT_OK


def cmd_validate(args) -> int:
    path = args.path or args.config_opt
    if not path:
        raise UsageError("validate-config needs a config path")
    cfg = parse_config(path)
    sys.stdout.write(dump_config(cfg))
    return EXIT_OK


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "report": cmd_report,
            "validate-config": cmd_validate}


def _fail(exc: BaseException, code: str, status: int) -> int:
    msg = " ".join(str(exc).split())
    print(f"{code}: {msg}", file=sys.stderr)
    return status


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ConfigError as exc:
        return _fail(exc, exc.code, EXIT_CONFIG)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        return _fail(exc, exc.code, EXIT_CONFIG)
    except FaflError as exc:
        return _fail(exc, exc.code, EXIT_RUNTIME)
    except OSError as exc:
        return _fail(exc, "FAFL-E-IO", EXIT_RUNTIME)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
