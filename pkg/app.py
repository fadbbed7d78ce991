"""
Debiased hazard-ratio estimation: command-line entry point.

  simulate    synthetic cohorts (dgp 1: observed confounding, dgp 2: latent group)
  fit         Step 1, one model with its Laplace evidence
  evidence    log BME, log Bayes factors and their bootstrap
  audit       time-homogeneity audit
  nuisance    Step 2, cross-fitted nuisances
  debias      Steps 2-3
  pipeline    Steps 1-3 with every result file
  experiment  replicate simulations with t-statistic summaries

Exit codes come from constants.py; handlers never call sys.exit themselves.
"""
import argparse
import logging
import sys

from config import config
from constants import EXIT_OK, EXIT_USAGE

logger = logging.getLogger(__name__)


class CliParser(argparse.ArgumentParser):
    """ArgumentParser whose parse errors exit with the usage code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ── Parser ──────────────────────────────────────────────────────────────────────

def build_parser() -> CliParser:
    from commands import (
        debias_commands, experiment_commands, fit_commands, simulate_commands,
    )

    parser = CliParser(prog="hazard", description="Debiased hazard ratios from panel data.")
    subparsers = parser.add_subparsers(dest="command", parser_class=CliParser, metavar="command")
    subparsers.required = True
    simulate_commands.register_commands(subparsers)
    fit_commands.register_commands(subparsers)
    debias_commands.register_commands(subparsers)
    experiment_commands.register_commands(subparsers)
    parser.commands = subparsers.choices
    return parser


def parse_args(parser: CliParser, argv):
    """Parse argv; a --config run file supplies defaults that flags override."""
    from commands.options import config_defaults, load_run_config

    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        sub = parser.commands[args.command]
        sub.set_defaults(**config_defaults(sub, load_run_config(args.config)))
        args = parser.parse_args(argv)
    return args


# ── Main ────────────────────────────────────────────────────────────────────────

def main(argv=None) -> int:
    from commands.options import UsageError, run_handler

    logging.basicConfig(level=getattr(logging, config.LOG_LEVEL.upper(), logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parse_args(parser, argv)
    except UsageError as e:
        print(f"hazard: error: {e}", file=sys.stderr)
        return EXIT_USAGE

    result = run_handler(args.handler, args)
    if result["success"]:
        print(result["message"])
        for path in result.get("outputs", []):
            logger.info(f"wrote {path}")
        return EXIT_OK
    print(f"hazard {args.command}: {result['message']}", file=sys.stderr)
    if result.get("usage"):
        return EXIT_USAGE
    return result.get("exit_code", EXIT_USAGE)


if __name__ == "__main__":
    sys.exit(main())
