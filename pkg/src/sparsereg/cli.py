"""Command line entry point: ``sparsereg {generate,train,eval,fuse,losscheck}``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
Every subcommand also accepts ``--config FILE`` with flat ``key=value``
lines (keys are the long flag names, dashes or underscores); explicit flags
win over the file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import fileio
from .errors import (ConfigMismatch, CorruptDataset, DegenerateGeometry, EmptyDataset, IndexMismatch,
                     MissingCheckpoint, SparseRegError, TooFewPoints, ZeroQuaternion)

log = logging.getLogger("sparsereg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


class NumericFailure(Exception):
    pass


# --------------------------------------------------------------------------
# config files
# --------------------------------------------------------------------------

def read_config_file(path: str) -> dict[str, str]:
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def apply_config(parser: argparse.ArgumentParser, args: argparse.Namespace, argv: Sequence[str]) -> None:
    """Fill options not given on the command line from ``args.config``."""
    if not getattr(args, "config", None):
        return
    file_values = read_config_file(args.config)
    actions = {a.dest: a for a in parser._actions if a.dest not in ("help", "config", "command")}
    given = set()
    for a in actions.values():
        if any(tok == opt or tok.startswith(opt + "=") for tok in argv for opt in a.option_strings):
            given.add(a.dest)
    for key, raw in file_values.items():
        if key not in actions:
            raise UsageError(f"unknown config key {key!r}")
        if key in given:
            continue
        a = actions[key]
        try:
            if isinstance(a, argparse._StoreTrueAction):
                value = raw.lower() in ("1", "true", "yes", "on")
            else:
                value = a.type(raw) if a.type else raw
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad value for {key}: {raw!r}") from exc
        if a.choices is not None and value not in a.choices:
            raise UsageError(f"{key} must be one of {sorted(a.choices)}")
        setattr(args, key, value)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def _require_dir(path: Optional[str], what: str) -> Path:
    if not path:
        raise UsageError(f"{what} is required")
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"{what} does not exist: {p}")
    return p


def cmd_generate(args) -> int:
    from .synth import PoseRanges, SynthConfig, generate_identity, generate_pair_set, generate_sequence, task_rng
    from .bench import thread_limit

    out = _require_dir(args.out, "output directory")
    if (args.sequences is None) == (args.pairs is None):
        raise UsageError("give exactly one of --sequences or --pairs")
    config = SynthConfig(grids=args.grids, noise_fraction=args.noise_fraction, noise_std=args.noise_std)
    if args.pairs is not None:
        if args.pairs < 1:
            raise UsageError("--pairs must be >= 1")
        ps = generate_pair_set(args.pairs, args.regime, args.seed, pool_size=args.pool_size, config=config)
        fileio.write_pair_set(out, ps)
        print(f"wrote {len(ps)} {args.regime} pairs to {out}")
        return EXIT_OK
    if args.sequences < 1:
        raise UsageError("--sequences must be >= 1")
    ranges = PoseRanges.for_regime(args.regime)

    def build(k):
        ident = generate_identity(int(task_rng(args.seed, 3, k).integers(0, 2**31 - 1)))
        return generate_sequence(ident, int(task_rng(args.seed, 4, k).integers(0, 2**63 - 1)), config, ranges)

    with ThreadPoolExecutor(max_workers=thread_limit()) as pool:
        seqs = list(pool.map(build, range(args.sequences)))
    for k, seq in enumerate(seqs):
        fileio.write_sequence(fileio.sequence_dir(out, k), seq)
    fileio.atomic_write(out / "meta.json", fileio.dumps_json(
        {"kind": "sequences", "seed": args.seed, "count": args.sequences, "regime": args.regime}))
    print(f"wrote {args.sequences} sequences to {out}")
    return EXIT_OK


def _train_config(args):
    from .regressor import RegressorConfig

    return RegressorConfig(input_resolution=args.input_resolution, lr=args.lr, weight_decay=args.weight_decay,
                           batch_size=args.batch_size, epochs=args.epochs, seed=args.seed,
                           loss_variant=args.loss_variant)


def cmd_train(args) -> int:
    from .regressor import (PairDataset, check_resume, load_checkpoint, save_checkpoint, train)

    pairs = fileio.read_pair_set(args.data)
    config = _train_config(args)
    out = Path(args.out)
    if not out.parent.is_dir():
        raise UsageError(f"output directory does not exist: {out.parent}")
    init, offset = None, 0
    if args.resume:
        init, header = load_checkpoint(args.resume)
        check_resume(init.config, config)
        offset = int(header.get("epoch", 0))
    dataset = PairDataset.from_pairs(pairs.pairs, config)
    params, report = train(config, dataset, init=init, epoch_offset=offset,
                           log=lambda s: log.info("epoch %d loss %.4f val θ_e %.3f° t_e %.3f mm (%.1fs)",
                                                  s.epoch, s.train_loss, s.val_rot_err, s.val_trans_err,
                                                  s.wall_time))
    if not np.all(np.isfinite(params.flat)):
        raise NumericFailure("training produced non-finite parameters")
    save_checkpoint(out, params, report.final.epoch, extra={"loss_variant": config.loss_variant})
    report_path = Path(args.report) if args.report else out.with_suffix(".csv")
    fileio.atomic_write(report_path, report.to_csv())
    f = report.final
    print(f"{config.loss_variant}: epoch {f.epoch} val θ_e {f.val_rot_err:.3f} deg, t_e {f.val_trans_err:.3f} mm")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .bench import run_benchmark
    from .regressor import load_checkpoint

    pairs = fileio.read_pair_set(args.pairs)
    params = None
    if args.method != "icp":
        if not args.checkpoint:
            raise MissingCheckpoint(f"method {args.method} needs --checkpoint")
        params, _ = load_checkpoint(args.checkpoint)
    out = _require_dir(args.out, "output directory") if args.out else None
    report = run_benchmark(args.method, pairs, params=params)
    print(report.table())
    if out is not None:
        stem = f"{args.method}_{report.regime}"
        fileio.atomic_write(out / f"{stem}_pairs.csv", report.per_pair_csv())
        fileio.atomic_write(out / f"{stem}_report.json", fileio.dumps_json(report.aggregates()))
    return EXIT_OK


def cmd_fuse(args) -> int:
    from .cloud import rasterize_coordinate_map, to_depth_map
    from .fusion import AugmentSpec, augmented_depth_map, denoise, fuse_sequence
    from .icp import icp_register
    from .regressor import load_checkpoint, register

    seq = fileio.read_sequence(args.sequence)
    out = _require_dir(args.out, "output directory")
    ref = seq.reference_index
    others = [i for i in range(len(seq.frames)) if i != ref]
    if args.method == "gt":
        transforms = {i: seq.to_reference(i) for i in others}
    elif args.method == "icp":
        transforms = {i: icp_register(seq.frames[i], seq.frames[ref]).transform for i in others}
    else:
        if not args.checkpoint:
            raise MissingCheckpoint("method model needs --checkpoint")
        params, _ = load_checkpoint(args.checkpoint)
        transforms = {i: register(params, seq.frames[i], seq.frames[ref]) for i in others}
    fused = fuse_sequence(seq, transforms)
    clean = denoise(fused, args.radius, args.threshold) if not args.no_denoise else fused
    fileio.write_ply(out / "fused.ply", clean.points,
                     extra={"source_frame": clean.source_frame, "denoised": clean.denoised_flags.astype(int)})
    dm = to_depth_map(rasterize_coordinate_map(clean.points, args.resolution))
    fileio.write_depth_map(out / "depth.pgm", dm)
    if args.augment:
        aug = augmented_depth_map(clean, AugmentSpec(seed=args.seed), np.random.default_rng(args.seed),
                                  resolution=args.resolution)
        fileio.write_depth_map(out / "depth_aug.pgm", aug)
    summary = {"points": len(clean), "denoised": int(clean.denoised_flags.sum()), "method": args.method,
               "reference_index": ref,
               "transforms": {str(i): transforms[i].to_dict() for i in others}}
    fileio.atomic_write(out / "fuse.json", fileio.dumps_json(summary))
    print(f"fused {len(clean)} points, {summary['denoised']} denoised -> {out}")
    return EXIT_OK


def cmd_losscheck(args) -> int:
    from .checks import run_all_checks

    results = run_all_checks(points=args.points, identity_pairs=args.identity_pairs, seed=args.seed)
    ok = True
    for r in results:
        print(r.line())
        ok &= r.passed
    if not ok:
        raise NumericFailure("loss or gradient check failed")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    from .loss import VARIANTS

    p = argparse.ArgumentParser(prog="sparsereg", description="Sparse 3D face registration toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write synthetic sequences or pair sets")
    g.add_argument("--config")
    g.add_argument("--out", required=False)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--sequences", type=int)
    g.add_argument("--pairs", type=int)
    g.add_argument("--regime", choices=("standard", "difficult"), default="standard")
    g.add_argument("--pool-size", type=int, default=50)
    g.add_argument("--grids", type=int, default=1000)
    g.add_argument("--noise-fraction", type=float, default=0.1)
    g.add_argument("--noise-std", type=float, default=2.0)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train the pose regressor on a pair set")
    t.add_argument("--config")
    t.add_argument("--data", required=False, help="pair-set directory or pairs.jsonl")
    t.add_argument("--out", required=False, help="checkpoint path")
    t.add_argument("--report", help="per-epoch CSV (default: checkpoint path with .csv)")
    t.add_argument("--resume", help="continue from this checkpoint")
    t.add_argument("--loss-variant", choices=VARIANTS, default="quat_l2")
    t.add_argument("--epochs", type=int, default=60)
    t.add_argument("--lr", type=float, default=0.01)
    t.add_argument("--weight-decay", type=float, default=5e-5)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--input-resolution", type=int, default=32)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="benchmark a registration method on a pair set")
    e.add_argument("--config")
    e.add_argument("--method", choices=("icp", "model", "model_twice"), default="icp")
    e.add_argument("--pairs", required=False)
    e.add_argument("--checkpoint")
    e.add_argument("--out", help="directory for the per-pair CSV and aggregate JSON")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("fuse", help="fuse, denoise and rasterize one sequence")
    f.add_argument("--config")
    f.add_argument("--sequence", required=False)
    f.add_argument("--method", choices=("gt", "icp", "model"), default="gt")
    f.add_argument("--checkpoint")
    f.add_argument("--out", required=False)
    f.add_argument("--radius", type=float, default=3.0)
    f.add_argument("--threshold", type=float, default=2.0)
    f.add_argument("--no-denoise", action="store_true")
    f.add_argument("--resolution", type=int, default=256)
    f.add_argument("--augment", action="store_true", help="also write an occlusion/pose augmented depth map")
    f.add_argument("--seed", type=int, default=0)
    f.set_defaults(func=cmd_fuse)

    c = sub.add_parser("losscheck", help="loss identity and gradient checks")
    c.add_argument("--config")
    c.add_argument("--points", type=int, default=100)
    c.add_argument("--identity-pairs", type=int, default=10_000)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_losscheck)
    return p


REQUIRED = {"generate": ("out",), "train": ("data", "out"), "eval": ("pairs",), "fuse": ("sequence", "out")}


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    try:
        apply_config(sub, args, argv)
        missing = [k for k in REQUIRED.get(args.command, ()) if not getattr(args, k, None)]
        if missing:
            raise UsageError("missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
        return args.func(args)
    except (UsageError, ConfigMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CorruptDataset, MissingCheckpoint, EmptyDataset, IndexMismatch, TooFewPoints, FileNotFoundError,
            json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericFailure, DegenerateGeometry, ZeroQuaternion, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except SparseRegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
