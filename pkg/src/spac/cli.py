"""Command line entry point: ``spac train | eval | gen-data | inspect-checkpoint``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import config as config_mod
from .checkpoint import CheckpointError, read_header
from .io import FormatError, to_uint8, write_idx, write_pgm
from .runner import RunError, TrainingDiverged, build_pairs, eval_run, train_run
from .substrate import ContractViolation

EXIT_USAGE = 2
EXIT_RUN = 3
EXIT_DIVERGED = 4


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("run configuration (override --config)")
    for f in fields(config_mod.RunConfig):
        flags = [f"--{f.name}"]
        if "_" in f.name:
            flags.append(f"--{f.name.replace('_', '-')}")
        group.add_argument(*flags, dest=f"cfg_{f.name}", metavar=f.type.upper(), default=None)
    parser.add_argument("--config", help="key=value file; explicit flags win over it")


def _overrides(args) -> dict:
    return {
        f.name: config_mod.parse_value(f.name, getattr(args, f"cfg_{f.name}"))
        for f in fields(config_mod.RunConfig)
        if getattr(args, f"cfg_{f.name}") is not None
    }


def _resolve_config(args, base: dict | None = None) -> config_mod.RunConfig:
    values = dict(base or {})
    if args.config:
        values.update(config_mod.parse_text(Path(args.config).read_text()))
    return config_mod.build(values, _overrides(args))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spac", description="Step-wise deformable registration with a planner/actor/critic agent.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train an agent")
    _add_config_flags(p)
    p.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint (its config is the base)")

    p = sub.add_parser("eval", help="step-wise evaluation of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--count", type=int, default=None, help="number of eval pairs (default: eval_count)")
    p.add_argument("--split", choices=("train", "eval"), default="eval")
    p.add_argument("--out", default=None)
    p.add_argument("--pgm", type=int, default=0, help="write warped/field PGMs for the first N pairs")

    p = sub.add_parser("gen-data", help="write generated pairs as IDX files (and optional PGMs)")
    _add_config_flags(p)
    p.add_argument("--split", choices=("train", "eval"), default="train")
    p.add_argument("--count", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--pgm", type=int, default=0)

    p = sub.add_parser("inspect-checkpoint", help="print a checkpoint's header")
    p.add_argument("checkpoint")
    p.add_argument("--json", action="store_true", help="dump the raw header as JSON")
    return parser


def cmd_train(args) -> int:
    base = None
    if args.resume:
        header, _ = read_header(args.resume)
        base = header["meta"]["run"]
    cfg = _resolve_config(args, base)
    out = train_run(cfg, resume=args.resume)
    print(f"run written to {out}")
    return 0


def cmd_eval(args) -> int:
    if args.horizon is not None and args.horizon < 1:
        print(f"error: --horizon must be >= 1, got {args.horizon}", file=sys.stderr)
        return EXIT_USAGE
    summary, curves = eval_run(args.checkpoint, args.horizon, args.count, args.out, args.pgm, args.split)
    print("t  mean_dice  std_dice")
    print(f"0  {curves[:, 0].mean():.4f}     {curves[:, 0].std():.4f}")
    for s in summary:
        print(f"{s.t:<2} {s.mean:.4f}     {s.std:.4f}")
    return 0


def cmd_gen_data(args) -> int:
    cfg = _resolve_config(args)
    pairs = build_pairs(cfg, args.split, args.count)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out / f"{args.split}-fixed.idx", [to_uint8(f) for f, _ in pairs])
    write_idx(out / f"{args.split}-moving.idx", [to_uint8(m) for _, m in pairs])
    (out / "config.txt").write_text(cfg.to_text())
    for i in range(min(args.pgm, len(pairs))):
        write_pgm(out / f"{args.split}_{i:04d}_fixed.pgm", pairs[i][0])
        write_pgm(out / f"{args.split}_{i:04d}_moving.pgm", pairs[i][1])
    print(f"{len(pairs)} {args.split} pairs written to {out}")
    return 0


def cmd_inspect(args) -> int:
    header, blob = read_header(args.checkpoint)
    if args.json:
        print(json.dumps(header, indent=2, sort_keys=True))
        return 0
    meta = header["meta"]
    print(f"schema      {header['schema']}")
    print(f"global_step {meta.get('global_step', '-')}")
    print(f"updates     {meta.get('updates', '-')}")
    print(f"pool        {len(meta.get('pool', {}).get('rewards', []))} transitions")
    print(f"blob        {len(blob)} bytes")
    run = meta.get("run") or meta.get("config", {})
    print(f"mode        {run.get('mode', '-')}  seed {run.get('seed', '-')}")
    print("tensors:")
    for entry in header["tensors"]:
        print(f"  {entry['name']:<40} {str(tuple(entry['shape'])):<20} @{entry['offset']}")
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "gen-data": cmd_gen_data, "inspect-checkpoint": cmd_inspect}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except config_mod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (RunError, CheckpointError, FormatError, ContractViolation, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())
