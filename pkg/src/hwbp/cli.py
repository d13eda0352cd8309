"""``hwbp`` command line.

Exit codes: 0 success, 1 a check failed, 2 bad input or config, 3 request
exceeds a capacity guard, 4 training diverged.
"""

from __future__ import annotations

import argparse
import sys

from .errors import CapacityError, ContractError, DivergenceError, HwbpError, InputError, ShapeError
from .harness import commands
from .harness.config import load_config
from .harness.train import train

EXIT_DIVERGED = 4


def _ks(text: str) -> list:
    try:
        ks = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a comma-separated list of integers, got {text!r}") from None
    if not ks or any(k < 0 for k in ks):
        raise argparse.ArgumentTypeError("k values must be non-negative and at least one is required")
    return ks


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hwbp", description="Highway backpropagation engine and training harness.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from an INI config")
    p.add_argument("--config", required=True, help="INI config file")
    p.add_argument("--out", help="output directory for metrics, manifest and checkpoints")
    p.add_argument("--quiet", action="store_true", help="do not print progress lines")

    p = sub.add_parser("gradcheck", help="run exactness, path-oracle, FPI and finite-difference suites")
    p.add_argument("--model", default="gru", choices=sorted(commands.PRESETS), help="model preset (default gru)")
    p.add_argument("--L", type=int, default=8, help="chain length, at most 12 (default 8)")
    p.add_argument("--d", type=int, default=4, help="state width; LSTM cell width (default 4)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt-k", action="store_true", help=argparse.SUPPRESS)

    p = sub.add_parser("analyze", help="per-k cosine similarity and norm profile of saved checkpoints")
    p.add_argument("--checkpoint", required=True, action="append", help="checkpoint file; repeat for several")
    p.add_argument("--max-k", type=int, required=True)
    p.add_argument("--batch-size", type=int, default=0, help="probe batch size (default: task batch size)")
    p.add_argument("--probe-seed", type=int, help="probe batch seed (default: task seed)")
    p.add_argument("--out", help="CSV file (default stdout)")

    p = sub.add_parser("bench", help="time one training step per algorithm and k")
    p.add_argument("--config", required=True)
    p.add_argument("--k", type=_ks, default=[0, 1, 2, 5, 10], help="comma-separated k values (default 0,1,2,5,10)")
    p.add_argument("--trials", type=int, default=5)
    return parser


def _run(args) -> int:
    if args.command == "train":
        cfg = load_config(args.config)
        result = train(cfg, args.out, verbose=not args.quiet)
        if result.final_eval_loss is not None:
            print(f"final eval loss {result.final_eval_loss:.6g}")
        return 0
    if args.command == "gradcheck":
        return commands.gradcheck(args.model, args.L, args.d, args.seed, corrupt_k=args.corrupt_k)
    if args.command == "analyze":
        if args.out:
            with open(args.out, "w", encoding="utf-8") as fh:
                return commands.analyze(args.checkpoint, args.max_k, args.batch_size, args.probe_seed, out=fh)
        return commands.analyze(args.checkpoint, args.max_k, args.batch_size, args.probe_seed)
    cfg = load_config(args.config)
    return commands.bench(cfg, args.k, args.trials)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _run(args)
    except DivergenceError as exc:
        print(f"hwbp: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except CapacityError as exc:
        print(f"hwbp: refused: {exc}", file=sys.stderr)
        return commands.EXIT_CAPACITY
    except (InputError, ShapeError, ContractError) as exc:
        print(f"hwbp: {exc}", file=sys.stderr)
        return commands.EXIT_INPUT
    except HwbpError as exc:
        print(f"hwbp: {exc}", file=sys.stderr)
        return commands.EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
