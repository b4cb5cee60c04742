"""Command-line entry point: ``trackinspect <command> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

import argparse
import logging
import sys

from .. import ConfigError, DataError, NumericError, ShapeError
from .config import RunConfig, load_config
from . import pipeline

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("trackinspect")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


class _Formatter(logging.Formatter):
    TAGS = {logging.DEBUG: "[debug]", logging.INFO: "[info]", logging.WARNING: "[warn]",
            logging.ERROR: "[error]", logging.CRITICAL: "[error]"}

    def format(self, record):
        return f"{self.TAGS.get(record.levelno, '[info]')} {record.getMessage()}"


def build_parser():
    p = _Parser(prog="trackinspect", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="INI file with run settings")
    p.add_argument("--seed", type=int, help="override [run] seed")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override any config key (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("synth", help="render a synthetic dataset")

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--mode", default="mtl", choices=("mtl", "stl-material", "stl-fastener"))
    t.add_argument("--iterations", type=int, help="override [train] iterations (total, including resumed ones)")
    t.add_argument("--resume", action="store_true", help="continue from the saved checkpoint of this mode")

    s = sub.add_parser("segment", help="write material label maps and score maps")
    s.add_argument("checkpoint")
    s.add_argument("--split", default="test")
    s.add_argument("--out")

    i = sub.add_parser("inspect", help="per-tie verdicts for a dataset split")
    i.add_argument("checkpoint")
    i.add_argument("--split", default="test")
    i.add_argument("--threshold", type=float, help="fastener decision threshold tau")
    i.add_argument("--out")

    e = sub.add_parser("evaluate", help="score verdicts against ground truth")
    e.add_argument("verdicts", nargs="+", help="verdict folders written by 'inspect'")
    e.add_argument("--subset", choices=pipeline.SUBSETS)
    e.add_argument("--split", default="test")
    e.add_argument("--out")

    r = sub.add_parser("report", help="per-mile summary with plots")
    r.add_argument("verdicts")
    r.add_argument("--evaluation", help="folder written by 'evaluate' (adds ROC plots)")
    r.add_argument("--out")

    c = sub.add_parser("config", help="print the effective configuration")
    c.set_defaults(show=True)
    return p


def _overrides(args):
    out = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        out[(section.strip(), name.strip())] = value.strip()
    if args.seed is not None:
        out[("run", "seed")] = args.seed
    if getattr(args, "iterations", None) is not None:
        out[("train", "iterations")] = args.iterations
    return out


def run(args, cfg):
    if args.command == "synth":
        return pipeline.cmd_synth(cfg)
    if args.command == "train":
        return pipeline.cmd_train(cfg, args.mode, resume=args.resume)
    if args.command == "segment":
        return pipeline.cmd_segment(cfg, args.checkpoint, args.split, args.out)
    if args.command == "inspect":
        return pipeline.cmd_inspect(cfg, args.checkpoint, args.split, args.out, tau=args.threshold)
    if args.command == "evaluate":
        out, _ = pipeline.cmd_evaluate(cfg, args.verdicts, args.subset, args.out, args.split)
        print((out / "summary.txt").read_text(), end="")
        return out
    if args.command == "report":
        out = pipeline.cmd_report(cfg, args.verdicts, args.evaluation, args.out)
        print((out / "report.txt").read_text(), end="")
        return out
    if args.command == "config":
        print(cfg.to_text(), end="")
        return None
    raise ConfigError(f"unknown command {args.command!r}")


def main(argv=None):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_Formatter())
    root = logging.getLogger("trackinspect")
    root.handlers[:] = [handler]
    root.propagate = False
    try:
        args = build_parser().parse_args(argv)
        root.setLevel(logging.DEBUG if args.verbose else logging.INFO)
        cfg = load_config(args.config, _overrides(args))
        run(args, cfg)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except (DataError, ShapeError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    return EXIT_OK


__all__ = ["RunConfig", "load_config", "main", "build_parser"]
