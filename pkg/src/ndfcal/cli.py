"""``ndfcal`` command line: gen-data, fit-gt, train, eval, ablate.

Exit status is 0 on success, 2 for configuration or missing-input errors
and 3 for numerical failures.
"""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from . import config as C
from . import pipeline
from .ndf import TrainingError
from .regression import IllConditionedError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment file")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--n-train", type=int, choices=(8, 27, 125), dest="n_train",
                        help="number of training viewpoints")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="ndfcal", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="simulate captures and ground truth")
    sub.add_parser("fit-gt", parents=[common], help="fit per-viewpoint kernel maps")
    t = sub.add_parser("train", parents=[common], help="fit a method")
    t.add_argument("--method", default="ndf", help=f"one of {', '.join(pipeline.METHODS)} or all")
    e = sub.add_parser("eval", parents=[common], help="evaluate trained methods")
    e.add_argument("--method", action="append",
                   help="method to evaluate (repeatable; default: all trained)")
    sub.add_parser("ablate", parents=[common], help="NDF architecture sweep")
    return p


def run(args) -> str:
    cfg = C.load(args.config, seed=args.seed, out=args.out, n_train=args.n_train)
    print(C.dump(cfg), end="", flush=True)
    pipeline.save_resolved_config(cfg, pipeline._root(cfg))
    if args.command == "gen-data":
        return str(pipeline.gen_data(cfg))
    if args.command == "fit-gt":
        return str(pipeline.fit_gt(cfg))
    if args.command == "train":
        methods = pipeline.METHODS if args.method == "all" else [args.method]
        return "\n".join(str(pipeline.train_method(cfg, m)) for m in methods)
    if args.command == "eval":
        return str(pipeline.eval_methods(cfg, args.method))
    return str(pipeline.ablate(cfg))


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        print(run(args))
    except (C.ConfigError, pipeline.PrerequisiteError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IllConditionedError, TrainingError, np.linalg.LinAlgError,
            FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
