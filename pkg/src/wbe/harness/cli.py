"""``wbe`` command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 numerical failure, 3 IO error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from ..core import TensorFormatError
from ..helmholtz import SolverError
from ..model.tape import TapeError
from ..model.train import TrainingError
from .commands import COMMANDS
from .schema import ConfigError, load_config

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wbe", description="Wide-band equivariant inverse scattering experiments.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="JSON experiment configuration")
    p.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")
    p.add_argument("--out", default=None, help="output directory (overrides config 'out')")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        cfg = load_config(args.config)
        out = args.out or cfg.get("out") or "wbe_out"
        summary = COMMANDS[args.command](cfg, out, args.jobs)
    except ConfigError as exc:
        print(f"wbe: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, TrainingError, TapeError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"wbe: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, TensorFormatError) as exc:
        print(f"wbe: IO error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        # invalid parameter combinations surface from the library as ValueError
        print(f"wbe: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps(summary, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
