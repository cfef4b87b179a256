"""Command line entry point: ``pulsegrid <command> [options]``.

Exit codes: 0 success, 1 internal failure, 2 invalid input or configuration.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .data import IngestError, SplitSets, build_splits, ingest, write_dataset
from .evaluate import evaluate, generalization_matrix, all_samples
from .model import load_checkpoint, save_checkpoint
from .synth import SynthConfig, synth_generate
from .train import (TrainConfig, default_lr_grid, lr_range_test, read_config_file,
                    train_loop, training_probe)

log = logging.getLogger("pulsegrid")

RUN_MANIFEST = "run_manifest.json"
CHECKPOINT = "checkpoint.json"


class UsageError(Exception):
    pass


def data_fingerprint(directory) -> str:
    h = hashlib.sha256()
    for path in sorted(Path(directory).glob("*.csv")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def write_manifest(out: Path, command: str, config: dict, seed: int, artifacts: list[str],
                   data_dir=None) -> dict:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "data_fingerprint": data_fingerprint(data_dir) if data_dir else None,
        "artifacts": sorted(artifacts),
        "tool_version": __version__,
    }
    log.info("run manifest: %s", json.dumps(manifest, sort_keys=True))
    (out / RUN_MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                    encoding="utf-8")
    return manifest


def _prepare_out(path, force: bool, guarded=(RUN_MANIFEST,)) -> Path:
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise UsageError(f"{out} exists and is not a directory")
    existing = [g for g in guarded if (out / g).exists()]
    if existing and not force:
        raise UsageError(f"{out} already holds {existing[0]}; use --force to overwrite")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create {out}: {exc}") from None
    return out


def _load_data(directory) -> list:
    if directory is None:
        raise UsageError("--data is required")
    try:
        sequences, rejected = ingest(directory)
    except IngestError as exc:
        raise UsageError(str(exc)) from None
    for r in rejected:
        log.warning("rejected %s: %s", r.file, r.reason)
    if not sequences:
        raise UsageError(f"no usable sequences in {directory}")
    return sequences


def _train_config(args) -> TrainConfig:
    values = read_config_file(args.config) if args.config else {}
    overrides = {"seed": args.seed, "loss": args.loss, "epochs": args.epochs,
                 "batch_size": args.batch, "with_filter": args.filter}
    values.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return TrainConfig.from_mapping(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training config: {exc}") from None


def _splits(args, sequences) -> SplitSets:
    splits = build_splits(sequences)
    cameras = set(args.cameras.split(",")) if getattr(args, "cameras", None) else None
    scenarios = set(args.scenario.split(",")) if getattr(args, "scenario", None) else None
    if cameras or scenarios:
        splits = splits.filter(cameras=cameras, scenarios=scenarios, which=("train", "val"))
    if not splits.train:
        raise UsageError("no training samples after filtering")
    return splits


def _progress(epoch, loss, val, lr):
    log.info("epoch %d loss %.5f val_mae %.3f lr %.3g", epoch, loss, val, lr)


def cmd_synth(args) -> int:
    values = read_config_file(args.config) if args.config else {}
    try:
        cfg = SynthConfig.from_mapping(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid synth config: {exc}") from None
    if args.seed is not None:
        cfg.seed = args.seed
    if args.n_sequences is not None:
        cfg.n_sequences = args.n_sequences
    if args.duration is not None:
        cfg.duration_s = args.duration
    if args.snr is not None:
        cfg.snr_db = args.snr
    if args.hr_range is not None:
        cfg.hr_range = tuple(args.hr_range)
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _prepare_out(args.out, args.force, guarded=(RUN_MANIFEST, "manifest.csv"))
    names = [f"syn{i:03d}.csv" for i in range(cfg.n_sequences)] + ["manifest.csv"]
    write_manifest(out, "synth", asdict(cfg), cfg.seed, names)
    sequences = synth_generate(cfg)
    write_dataset(sequences, out)
    print(f"wrote {len(sequences)} sequences to {out}")
    return 0


def cmd_validate(args) -> int:
    try:
        sequences, rejected = ingest(args.data)
    except IngestError as exc:
        raise UsageError(str(exc)) from None
    for seq in sequences:
        print(f"ok        {seq.id}  {seq.camera}  {seq.scenario}  {seq.n_frames} frames")
    for r in rejected:
        print(f"rejected  {r.file}  {r.reason}")
    return 0 if sequences and not rejected else 2


def cmd_train(args) -> int:
    cfg = _train_config(args)
    sequences = _load_data(args.data)
    out = _prepare_out(args.out, args.force, guarded=(RUN_MANIFEST, CHECKPOINT))
    write_manifest(out, "train", asdict(cfg), cfg.seed, [CHECKPOINT, "train_log.csv"], args.data)
    splits = _splits(args, sequences)
    log.info("samples: train %d, val %d, test %d", len(splits.train), len(splits.val), len(splits.test))
    result = train_loop(cfg, splits, progress=_progress)
    best = result.log.best_epoch
    meta = {"epoch": best, "val_mae": result.log.val_mae[best], "train_config": asdict(cfg)}
    save_checkpoint(result.model, out / CHECKPOINT, meta)
    result.log.to_csv(out / "train_log.csv")
    print(f"best epoch {best}, val MAE {result.log.val_mae[best]:.3f} bpm -> {out / CHECKPOINT}")
    return 0


def cmd_eval(args) -> int:
    if not args.checkpoint or not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint not found: {args.checkpoint}")
    model, meta = load_checkpoint(args.checkpoint)
    sequences = _load_data(args.data)
    out = _prepare_out(args.out, args.force, guarded=(RUN_MANIFEST, "report.json"))
    write_manifest(out, "eval", {"checkpoint": str(args.checkpoint), "split": args.split},
                   model.seed, ["report.csv", "report.json", "pairs.csv"], args.data)
    if args.split == "test":
        samples = build_splits(sequences).test
    else:
        samples = all_samples(sequences)
    report = evaluate(model, samples)
    report.to_csv(out / "report.csv")
    report.to_json(out / "report.json")
    report.pairs_to_csv(out / "pairs.csv")
    for row in report.rows.values():
        if row.n:
            print(f"{row.subset:12s} n={row.n:5d}  MAE {row.mae:6.2f} bpm  coverage {100 * row.coverage:5.1f}%")
    return 0


def cmd_lr_find(args) -> int:
    cfg = _train_config(args)
    sequences = _load_data(args.data)
    out = _prepare_out(args.out, args.force, guarded=(RUN_MANIFEST, "lr_curve.csv"))
    grid = default_lr_grid(args.points_per_decade)
    write_manifest(out, "lr-find", {**asdict(cfg), "epochs_per_point": args.epochs_per_point,
                                    "points_per_decade": args.points_per_decade},
                   cfg.seed, ["lr_curve.csv"], args.data)
    splits = _splits(args, sequences)
    result = lr_range_test(training_probe(cfg, splits, args.epochs_per_point), grid)
    result.to_csv(out / "lr_curve.csv")
    flag = "  (at grid boundary)" if result.at_boundary else ""
    print(f"lr_min {result.lr_min:.3g}  lr_max {result.lr_max:.3g}{flag}")
    return 0


def cmd_genmatrix(args) -> int:
    cfg = _train_config(args)
    sequences = _load_data(args.data)
    out = _prepare_out(args.out, args.force, guarded=(RUN_MANIFEST, "matrix.csv"))
    write_manifest(out, "genmatrix", asdict(cfg), cfg.seed, ["matrix.csv"], args.data)
    splits = build_splits(sequences)
    label = cfg.loss.upper() + ("+F" if cfg.with_filter else "")
    matrix = generalization_matrix(splits, lambda part: train_loop(cfg, part).model,
                                   seed=cfg.seed, label=label)
    matrix.to_csv(out / "matrix.csv")
    print(",".join(["model", *matrix.columns]))
    for name, row in zip(matrix.rows, matrix.mae):
        print(",".join([name, *(f"{v:.2f}" for v in row)]))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pulsegrid", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True, out=True):
        p.add_argument("--config", help="flat key = value file; flags override it")
        p.add_argument("--seed", type=int)
        if data:
            p.add_argument("--data", help="dataset directory with manifest.csv")
        if out:
            p.add_argument("--out", required=True)
            p.add_argument("--force", action="store_true", help="overwrite existing outputs")

    def training(p):
        p.add_argument("--loss", choices=["se", "ce", "cl"])
        p.add_argument("--filter", action="store_const", const=True,
                       help="append the 1D filtering stack")
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch", type=int)
        p.add_argument("--cameras", help="comma-separated training cameras, e.g. Cam1,Cam2")
        p.add_argument("--scenario", help="comma-separated training scenarios")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p, data=False)
    p.add_argument("--n-sequences", type=int)
    p.add_argument("--duration", type=float, help="seconds per sequence")
    p.add_argument("--snr", type=float, help="dB")
    p.add_argument("--hr-range", type=float, nargs=2, metavar=("MIN", "MAX"))
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("validate", help="ingest a dataset directory and list rejections")
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("train", help="train a model")
    common(p)
    training(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["test", "all"], default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("lr-find", help="learning-rate range test")
    common(p)
    training(p)
    p.add_argument("--epochs-per-point", type=int, default=5)
    p.add_argument("--points-per-decade", type=int, default=4)
    p.set_defaults(func=cmd_lr_find)

    p = sub.add_parser("genmatrix", help="camera generalization matrix")
    common(p)
    training(p)
    p.set_defaults(func=cmd_genmatrix)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception:
        log.exception("internal failure")
        return 1


if __name__ == "__main__":
    sys.exit(main())
