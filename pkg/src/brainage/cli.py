"""Command-line entry point: ``brainage <subcommand> [--config F] [--seed N] [--out DIR]``.

Exit codes: 0 success, 2 validation failure, 3 stage failure, 4 config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import __version__
from . import pipeline as pl
from .cohort import CohortFormatError

EXIT_OK, EXIT_VALIDATION, EXIT_STAGE, EXIT_CONFIG = 0, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # unknown flags are config errors
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat JSON config file")
    p.add_argument("--seed", type=int, help="random seed (overrides config)")
    p.add_argument("--out", help="output directory (overrides config)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key, e.g. --set epochs=20")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="brainage", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "simulate": "write synthetic model-creation and application cohorts",
        "harmonize": "validate, split and harmonize the input cohorts",
        "train": "train the brain-age model on the harmonized training split",
        "predict": "predict ages for every split and the application cohort",
        "correct": "fit bias correction; write metrics, calibration data and gaps",
        "analyze": "run group analyses on the Brain Age Gaps",
        "run": "run every stage in order",
        "report": "write report.txt and finalize the manifest",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text)
        _common(p)
        if name == "simulate":
            p.add_argument("--n-model", type=int, dest="sim_n_model")
            p.add_argument("--n-application", type=int, dest="sim_n_application")
        if name in ("train", "run"):
            p.add_argument("--epochs", type=int)
        if name == "analyze":
            p.add_argument("analyses", nargs="*", metavar="ANALYSIS",
                           help="subset of a1 a2 a3 a4 (default: those enabled in the config)")
            p.add_argument("--exclude-ids", default=None,
                           help="comma-separated subject ids dropped from the named analyses")
    return parser


def _config(args) -> pl.PipelineConfig:
    overrides = {"seed": args.seed, "out": args.out}
    for key in ("sim_n_model", "sim_n_application", "epochs"):
        if getattr(args, key, None) is not None:
            overrides[key] = getattr(args, key)
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise pl.ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value
    return pl.load_config(args.config, overrides)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # --help, --version and usage errors
        return exc.code if isinstance(exc.code, int) else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        cmd = args.command
        if cmd == "simulate":
            pl.stage_simulate(cfg)
        elif cmd == "harmonize":
            pl.stage_ingest(cfg)
            pl.stage_harmonize(cfg)
        elif cmd == "train":
            pl.stage_train(cfg)
        elif cmd == "predict":
            pl.stage_predict(cfg)
        elif cmd == "correct":
            pl.stage_correct(cfg)
        elif cmd == "analyze":
            names = args.analyses or cfg.enabled_analyses()
            unknown = [n for n in names if n not in pl.ANALYSES]
            if unknown:
                raise pl.ConfigError(f"unknown analysis {unknown[0]!r}; choose from {', '.join(pl.ANALYSES)}")
            exclude = None
            if args.exclude_ids is not None:
                ids = tuple(s.strip() for s in args.exclude_ids.split(",") if s.strip())
                exclude = {n: ids for n in names}
            reports = pl.stage_analyze(cfg, names, exclude)
            for rep in reports.values():
                sys.stdout.write(rep.to_text() + "\n")
        elif cmd == "run":
            bundle = pl.run_pipeline(cfg)
            sys.stdout.write(json.dumps({"out": str(bundle.out), "status": bundle.manifest["status"]}) + "\n")
        elif cmd == "report":
            bundle = pl.stage_report(cfg)
            sys.stdout.write((bundle.out / "report.txt").read_text(encoding="utf-8"))
    except pl.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (pl.ValidationFailure, CohortFormatError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except pl.StageError as exc:
        print(f"stage error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
