"""drtune pretrain|tune|compare|ablate --config PATH [--out DIR] [--seed N] [--budget-seconds N]

Exit codes: 0 success, 1 configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import config as config_mod
from . import experiments
from .errors import ConfigError, DrtuneError

logger = logging.getLogger("drtune")

COMMANDS = {
    "pretrain": experiments.cmd_pretrain,
    "tune": experiments.cmd_tune,
    "compare": experiments.cmd_compare,
    "ablate": experiments.cmd_ablate,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage mistakes count as configuration errors
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="drtune", description="Reward fine-tuning of a toy diffusion model.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="key = value experiment file")
    p.add_argument("--out", help="output directory (overrides 'out')")
    p.add_argument("--seed", type=int, help="unsigned 64-bit seed (overrides 'seed')")
    p.add_argument("--budget-seconds", type=float, help="switch to a wall-clock budget of N seconds per run")
    p.add_argument("--axis", choices=("K", "m"), help="ablation axis (overrides 'ablate.axis')")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args: argparse.Namespace) -> config_mod.ExperimentConfig:
    cfg = config_mod.load(args.config)
    if args.out is not None:
        cfg.out = args.out
    if args.seed is not None:
        cfg.seed = args.seed
    if args.budget_seconds is not None:
        if args.budget_seconds <= 0:
            raise ConfigError("--budget-seconds must be positive", got=args.budget_seconds)
        cfg.budget.mode = "wall"
        cfg.budget.seconds = args.budget_seconds
    if args.axis is not None:
        cfg.ablate.axis = args.axis
    return cfg.validate()


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(levelname)s %(message)s")
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    try:
        result = COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (DrtuneError, OSError, FloatingPointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(result, indent=2, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
