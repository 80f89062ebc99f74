"""Command line entry point: ``fednorm run --experiment <name> ...``.

Every config key has a matching flag (underscores become dashes).  Values
from ``--config`` are read first and flags given on the command line
override them.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields

from fednorm.errors import ConfigError, NumericalFailure
from fednorm.experiments import Experiment, ExperimentConfig, load_config, run

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

_SHORT = {"f": "-f", "n": "-n"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fednorm", description="Federated BatchNorm simulations")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run one experiment family")
    p.add_argument("--config", help="flat key = value config file")
    for fld in fields(ExperimentConfig):
        flag = _SHORT.get(fld.name, "--" + fld.name.replace("_", "-"))
        kwargs = {"dest": fld.name, "default": None}
        if fld.name == "experiment":
            kwargs["choices"] = [e.value for e in Experiment]
        p.add_argument(flag, **kwargs)
    return parser


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    values = load_config(args.config) if args.config else {}
    for fld in fields(ExperimentConfig):
        v = getattr(args, fld.name)
        if v is not None:
            values[fld.name] = v
    return ExperimentConfig.from_mapping(values).resolved()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
        path = run(cfg)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"fednorm: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailure as exc:
        print(f"fednorm: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
