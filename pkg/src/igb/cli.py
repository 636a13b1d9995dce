"""Command line entry point: `igb <kind> [--config file] [overrides...]`.

The config file is TOML with sections [tree], [flow], [data], [output];
any flag given on the command line overrides the file value.  Exit codes:
0 on success, 1 on numerical failure (blow-up, non-convergent solver),
2 on configuration or data errors.
"""

from __future__ import annotations

import argparse
import json
import sys

try:
    import tomllib as tomli
except ModuleNotFoundError:  # python < 3.11
    import tomli

from .errors import BlowupError, ConfigError, ConvergenceError, DataError
from .experiments import KINDS, config_from_mapping, run_experiment
from .generators import GENERATORS
from .losses import LOSS_KINDS

# flag name -> (section, key) in the config mapping; None targets top level.
_FLAG_DESTS = {
    "loss": ("flow", "loss"),
    "step": ("flow", "step"),
    "horizon": ("flow", "horizon"),
    "mc_trees": ("flow", "mc_trees"),
    "init_const": ("flow", "init_const"),
    "depth": ("tree", "depth"),
    "proposals": ("tree", "proposals"),
    "beta": ("tree", "beta"),
    "generator": ("data", "generator"),
    "dim": ("data", "dim"),
    "n": ("data", "n"),
    "noise": ("data", "noise"),
    "test_n": ("data", "test_n"),
    "ref_n": ("data", "ref_n"),
    "sweep_n": ("data", "sweep_n"),
    "sweep_seeds": ("data", "sweep_seeds"),
    "out": ("output", "dir"),
    "seed": (None, "seed"),
    "grid_resolution": (None, "grid_resolution"),
    "schemes": (None, "schemes"),
    "order": (None, "order"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="igb",
        description="Run infinitesimal gradient boosting experiments.",
    )
    sub = parser.add_subparsers(dest="kind", required=True, metavar="kind")
    for kind in KINDS:
        k = sub.add_parser(kind, help=f"run a {kind} experiment")
        k.add_argument("--config", help="TOML config file")
        k.add_argument("--seed", type=int)
        k.add_argument("--out", help="output directory")
        k.add_argument("--loss", choices=sorted(LOSS_KINDS))
        k.add_argument("--generator", choices=list(GENERATORS))
        k.add_argument("--dim", type=int)
        k.add_argument("--n", type=int)
        k.add_argument("--noise", type=float)
        k.add_argument("--test-n", type=int, dest="test_n")
        k.add_argument("--ref-n", type=int, dest="ref_n")
        k.add_argument("--sweep-n", dest="sweep_n",
                       help="comma-separated sample sizes, e.g. 100,1000,10000")
        k.add_argument("--sweep-seeds", type=int, dest="sweep_seeds")
        k.add_argument("--depth", type=int)
        k.add_argument("--proposals", type=int)
        k.add_argument("--beta", type=float)
        k.add_argument("--step", type=float)
        k.add_argument("--horizon", type=float)
        k.add_argument("--mc-trees", type=int, dest="mc_trees")
        k.add_argument("--init-const", type=float, dest="init_const")
        k.add_argument("--grid-resolution", type=int, dest="grid_resolution")
        k.add_argument("--schemes", type=int)
        k.add_argument("--order", type=int)
    return parser


def _load_mapping(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            return tomli.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomli.TOMLDecodeError as err:
        raise ConfigError(f"malformed config file {path}: {err}") from None


def _apply_overrides(mapping: dict, args: argparse.Namespace) -> dict:
    for flag, (section, key) in _FLAG_DESTS.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        if flag == "sweep_n":
            value = [int(v) for v in str(value).split(",") if v]
        if section is None:
            mapping[key] = value
        else:
            mapping.setdefault(section, {})[key] = value
    return mapping


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        mapping = _apply_overrides(_load_mapping(args.config), args)
        config = config_from_mapping(args.kind, mapping)
        summary = run_experiment(config)
    except (ConfigError, DataError, ValueError) as err:
        _emit_error("config", err)
        return 2
    except (BlowupError, ConvergenceError) as err:
        _emit_error("numerical", err)
        return 1
    json.dump(summary, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")
    return 0


def _emit_error(category: str, err: Exception) -> None:
    payload = {"error": category, "type": type(err).__name__, "message": str(err)}
    if isinstance(err, BlowupError) and err.t == err.t:
        payload["t"] = err.t
    json.dump(payload, sys.stderr, sort_keys=True)
    sys.stderr.write("\n")


if __name__ == "__main__":
    sys.exit(main())
