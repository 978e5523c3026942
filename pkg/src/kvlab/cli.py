"""Command-line entry point.

Subcommands: simulate | sweep | similarity | memory | needle | reuse-bench.
Exit codes: 0 success, 1 internal error, 2 user/config error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .cache import MemoryParams, memory_bytes
from .experiments import (
    ConfigError,
    cmd_needle,
    cmd_reuse_bench,
    cmd_similarity,
    cmd_simulate,
    cmd_sweep,
    load_config,
)


def _add_config_args(p: argparse.ArgumentParser):
    p.add_argument("--config", required=True, help="path to the JSON experiment config")
    p.add_argument("--out", default=None, help="output directory (overrides config out_dir)")
    p.add_argument("--seed", type=int, default=None, help="override the prompt seed")
    p.add_argument("--workers", type=int, default=1, help="parallel sweep workers")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kvlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    for name in ("simulate", "sweep", "similarity", "needle", "reuse-bench"):
        _add_config_args(sub.add_parser(name))

    mem = sub.add_parser("memory", help="decode-stage KV cache byte count")
    mem.add_argument("--batch", type=int, required=True)
    mem.add_argument("--seq", type=int, required=True)
    mem.add_argument("--layers", type=int, required=True)
    mem.add_argument("--heads", type=int, required=True)
    mem.add_argument("--head-dim", type=int, required=True)
    mem.add_argument("--precision-bytes", type=int, default=2)
    return parser


def _load(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        import dataclasses

        cfg = dataclasses.replace(
            cfg, prompt=dataclasses.replace(cfg.prompt, seed=args.seed)
        )
    out_dir = Path(args.out) if args.out else Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return cfg, out_dir


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "memory":
            p = MemoryParams(
                batch=args.batch,
                seq_len=args.seq,
                layers=args.layers,
                heads=args.heads,
                head_dim=args.head_dim,
                bytes_per_scalar=args.precision_bytes,
            )
            total = memory_bytes(p)
            print(f"{total} bytes ({total / 2**30:.2f} GiB)")
            return 0

        cfg, out_dir = _load(args)
        if args.command == "simulate":
            path = cmd_simulate(cfg, out_dir)
        elif args.command == "sweep":
            path = cmd_sweep(cfg, out_dir, workers=args.workers)
        elif args.command == "similarity":
            paths = cmd_similarity(cfg, out_dir)
            for p in paths:
                print(p)
            return 0
        elif args.command == "needle":
            path = cmd_needle(cfg, out_dir)
        elif args.command == "reuse-bench":
            path = cmd_reuse_bench(cfg, out_dir)
        else:  # pragma: no cover
            raise ValueError(f"unknown command {args.command}")
        print(path)
        return 0
    except (ConfigError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"internal error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
