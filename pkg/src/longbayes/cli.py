"""Command-line entry point: ``longbayes <stage> --config run.json``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""

import argparse
import logging
import sys

import numpy as np

from . import __version__, pipeline
from .linalg import CholeskyError
from .surface import MeshError
from .timeseries import DataError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def build_parser():
    p = argparse.ArgumentParser(prog="longbayes",
                                description="Longitudinal Bayesian surface fMRI pipeline.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("prep", "preprocess sessions (PSC, nuisance regression, scrubbing)"),
                        ("fit", "fit the Bayesian and classical GLMs"),
                        ("excur", "excursion sets and classical activation maps"),
                        ("summarize", "activation areas and reliability tables"),
                        ("lmm", "longitudinal mixed models"),
                        ("simulate", "write a synthetic study from the config's simulate block"),
                        ("all", "run every stage and write the report table")):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", required=True, help="JSON run configuration")
        sp.add_argument("--force", action="store_true", help="recompute up-to-date stages")
        sp.add_argument("--workers", type=int, default=None, help="parallel worker processes")
        sp.add_argument("--seed", type=int, default=None, help="override the master seed")
        sp.add_argument("--log-level", default="INFO",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)
    log = logging.getLogger("longbayes")
    overrides = {}
    if args.workers is not None:
        overrides["workers"] = args.workers
    if args.seed is not None:
        overrides["seed"] = args.seed
    try:
        cfg = pipeline.load_config(args.config, overrides)
        pipeline.save_resolved_config(cfg)
        if args.command == "all":
            pipeline.run_all(cfg, args.force)
        elif args.command == "simulate":
            pipeline.stage_simulate(cfg, args.force)
        else:
            pipeline.STAGE_FUNCS[args.command](cfg, args.force)
    except pipeline.ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except (CholeskyError, np.linalg.LinAlgError, FloatingPointError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except (DataError, MeshError, FileNotFoundError, ValueError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
