"""

metastab - command-line entry point

Runs one experiment from a JSON config and writes its report directory

"""

import argparse
import logging
import sys
from typing import List, Optional

from services.cache import FieldCache, NullCache
from services.config import load_config, with_overrides
from services.errors import MetastabError
from services.experiments import run_experiment
from services.reports import write_report
from utils.log_handler import ReportLogHandler
from utils.versioning import LIBRARY_VERSION, format_version_display

EXIT_PASS = 0
EXIT_ERROR = 1
EXIT_CHECK_FAILED = 2
COMMANDS = ("quasipotential", "parabolic", "stationary", "montecarlo", "certify", "regimes")


def setup_logging(verbose: bool = False):
    """Console output plus a handler that captures the run log for the report"""
    logger = logging.getLogger()
    level = logging.DEBUG if verbose else logging.INFO
    logger.setLevel(level)

    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setLevel(level)
    console_handler.setFormatter(logging.Formatter('%(asctime)s - %(levelname)s - %(message)s'))
    logger.addHandler(console_handler)

    report_handler = ReportLogHandler()
    logger.addHandler(report_handler)
    return console_handler, report_handler


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metastab", description="Exit-problem and quasi-potential experiments")
    parser.add_argument("--version", action="version", version=f"metastab {format_version_display(LIBRARY_VERSION)}")
    parser.add_argument("command", choices=COMMANDS, help="experiment to run")
    parser.add_argument("--config", required=True, help="JSON experiment config")
    parser.add_argument("--out", default=None, help="output directory (overrides the config)")
    parser.add_argument("--workers", type=int, default=None, help="parallel per-ε runs")
    parser.add_argument("--no-cache", action="store_true", help="recompute every potential field")
    parser.add_argument("--verbose", action="store_true")
    return parser


def run(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    console_handler, report_handler = setup_logging(args.verbose)
    log = logging.getLogger("metastab")
    try:
        cfg = load_config(args.config)
        updates = {"experiment": args.command}
        if args.workers is not None:
            updates["workers"] = args.workers
        if args.out is not None:
            updates["output"] = args.out
        cfg = with_overrides(cfg, **updates)
        cache = NullCache() if args.no_cache or not cfg.cache_dir else FieldCache(cfg.cache_dir)

        report = run_experiment(cfg, cache)
        report.log = report_handler.drain()
        write_report(report, cfg.output)
        if report.passed:
            log.info(f"{args.command}: all checks passed")
            return EXIT_PASS
        log.error(f"{args.command}: failed checks: {', '.join(report.failures())}")
        return EXIT_CHECK_FAILED
    except MetastabError as e:
        log.error(f"{type(e).__name__}: {e}")
        return EXIT_ERROR
    except Exception:
        log.exception("Unexpected error")
        return EXIT_ERROR
    finally:
        report_handler.close()
        logging.getLogger().removeHandler(report_handler)
        logging.getLogger().removeHandler(console_handler)


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
