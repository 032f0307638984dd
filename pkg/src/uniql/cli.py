"""Command-line front end.

Subcommands: compress, prune, eval, inspect. Exit codes: 0 on success, 1 on
usage errors, 2 on data errors. The compression seed can be overridden with
the UNIQL_SEED environment variable.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import artifact as artifact_io
from .errors import UniqlError
from .pipeline import CompressionConfig, compress, evaluate, prune_artifact

USAGE_ERROR = 1
DATA_ERROR = 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with code 2 on bad flags; the contract wants 1.
    def error(self, message):
        raise _UsageError(message)


def _parse_rates(text: str) -> tuple[float, ...]:
    try:
        values = [float(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as err:
        raise _UsageError(f"bad --rates value {text!r}") from err
    return tuple(v / 100.0 for v in values)


def _build_parser() -> _Parser:
    parser = _Parser(prog="uniql", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compress", help="sort, fuse, quantize, and serialize a model")
    p.add_argument("--model", required=True, help="input float model artifact")
    p.add_argument("--calib", required=True, help="calibration token sequences (JSON)")
    p.add_argument("--rates", default="15,25,35",
                   help="global pruning rates in percent, comma separated")
    p.add_argument("--bits", type=int, default=4, choices=(3, 4, 8, 16, 32),
                   help="weight bits; 16/32 produce an unquantized float artifact")
    p.add_argument("--group", type=int, default=128, help="quantization group size")
    p.add_argument("--epsilon", type=float, default=0.1, help="rate-smoothing temperature")
    p.add_argument("--lambda", dest="ridge_lambda", type=float, default=1.0,
                   help="ridge intensity for leverage scores")
    p.add_argument("--no-hadamard", action="store_true",
                   help="skip the Hadamard rotation (e.g. for models it hurts)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("prune", help="slice a compressed artifact to one rate")
    p.add_argument("--artifact", required=True)
    p.add_argument("--rate", type=float, required=True, help="global rate in percent")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="compare a model against a reference")
    p.add_argument("--model", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--data", required=True, help="evaluation token sequences (JSON)")

    p = sub.add_parser("inspect", help="print an artifact's manifest")
    p.add_argument("--artifact", required=True)
    return parser


def _run(args) -> int:
    if args.command == "compress":
        model = artifact_io.artifact_to_model(artifact_io.load(args.model))
        calib = artifact_io.load_calibration(args.calib)
        seed = int(os.environ.get("UNIQL_SEED", args.seed))
        config = CompressionConfig(
            rates=_parse_rates(args.rates), bits=args.bits, group_size=args.group,
            epsilon=args.epsilon, ridge_lambda=args.ridge_lambda,
            hadamard=not args.no_hadamard, seed=seed)
        compress(model, calib, config).save(args.out)
        return 0
    if args.command == "prune":
        art = artifact_io.load(args.artifact)
        prune_artifact(art, args.rate / 100.0).save(args.out)
        return 0
    if args.command == "eval":
        cand = artifact_io.load(args.model)
        ref = artifact_io.load(args.reference)
        data = artifact_io.load_calibration(args.data)
        print(json.dumps(evaluate(cand, data, ref), sort_keys=True))
        return 0
    if args.command == "inspect":
        art = artifact_io.load(args.artifact)
        print(json.dumps(art.manifest, sort_keys=True, indent=2))
        return 0
    raise _UsageError(f"unknown command {args.command!r}")


def cli_main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _run(args)
    except _UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return USAGE_ERROR
    except UniqlError as err:
        print(f"error: {err}", file=sys.stderr)
        return DATA_ERROR
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return DATA_ERROR


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
