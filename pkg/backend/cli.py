#!/usr/bin/env python3
"""
Mesh Motion command line
Usage: python cli.py <command> [options]
"""
import argparse
import json
import logging
import sys
from pathlib import Path

from config import settings, setup_logging
from optimizations.caching_layer import get_spectral_cache
from shared.errors import exit_code_for
from shared.motion_embedding import export_codes_csv, export_mds_csv, mds_project
from shared.remeshing import RemeshVariant
from shared.synthetic_data import DatasetConfig, DatasetManifest, make_dataset
from shared.training_pipeline import (
    TrainConfig,
    bench_inference,
    embed_sequence,
    evaluate,
    load_checkpoint,
    load_config,
    robustness_eval,
    train,
    transfer,
)

logger = logging.getLogger("mesh-motion")


def _int_list(value: str):
    return [int(v) for v in value.split(",") if v.strip()]


def cmd_synth(args) -> int:
    if args.config:
        config = DatasetConfig.model_validate(json.loads(Path(args.config).read_text()))
    else:
        config = DatasetConfig()
    overrides = {
        "n_train_identities": args.train_identities,
        "n_test_identities": args.test_identities,
        "frames": args.frames,
        "level": args.level,
        "seed": args.seed,
    }
    updates = {k: v for k, v in overrides.items() if v is not None}
    if args.unregistered:
        updates["unregistered"] = True
    if updates:
        config = DatasetConfig.model_validate({**config.model_dump(), **updates})
    manifest = make_dataset(config, args.out)
    print(f"Wrote {len(manifest.entries)} sequences to {args.out} (manifest {manifest.hash()})")
    return 0


def cmd_train(args) -> int:
    config = load_config(args.config) if args.config else TrainConfig()
    if args.epochs is not None:
        config = config.model_copy(update={"epochs": args.epochs})
    manifest = DatasetManifest.load(args.data)
    checkpoint = train(config, manifest, out_path=args.out, cache=get_spectral_cache())
    last = checkpoint.history[-1] if checkpoint.history else {}
    print(f"Trained {checkpoint.epoch} epochs, final loss {last.get('total', float('nan')):.6g} -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    manifest = DatasetManifest.load(args.data)
    report = evaluate(load_checkpoint(args.ckpt), manifest, split=args.split, cache=get_spectral_cache())
    text = report.model_dump_json(indent=2)
    if args.json:
        Path(args.json).write_text(text)
    print(text)
    return 0


def cmd_robustness(args) -> int:
    variants = [RemeshVariant.parse(v) for v in args.variants.split(",") if v.strip()]
    manifest = DatasetManifest.load(args.data)
    table = robustness_eval(
        load_checkpoint(args.ckpt), manifest, variants, split=args.split, csv_path=args.csv, cache=get_spectral_cache()
    )
    print(table.to_string(index=False))
    return 0


def cmd_transfer(args) -> int:
    path = transfer(load_checkpoint(args.ckpt), args.source, args.motion, args.out, cache=get_spectral_cache(),
                    extension=args.format)
    print(f"Wrote rollout manifest {path}")
    return 0


def cmd_embed(args) -> int:
    checkpoint = load_checkpoint(args.ckpt)
    codes = [embed_sequence(checkpoint, motion) for motion in args.motion]
    if args.csv:
        if len(codes) == 1:
            export_codes_csv(codes[0], args.csv)
        else:
            out = Path(args.csv)
            out.mkdir(parents=True, exist_ok=True)
            for code in codes:
                export_codes_csv(code, out / f"{code.name}.csv")
    if args.mds:
        names = [code.name or str(i) for i, code in enumerate(codes)]
        export_mds_csv(mds_project(codes), names, args.mds)
    for code in codes:
        print(f"{code.name}: {len(code)} frames x {code.dim}")
    return 0


def cmd_bench(args) -> int:
    ckpt = load_checkpoint(args.ckpt) if args.ckpt else None
    table = bench_inference(ckpt, _int_list(args.resolutions), args.frames)
    if args.csv:
        table.to_csv(args.csv, index=False)
    print(table.to_string(index=False))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mesh-motion", description="Rig-free mesh motion prediction")
    parser.add_argument("--log-level", default=None, help="override MESHMOTION_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON DatasetConfig")
    p.add_argument("--train-identities", type=int)
    p.add_argument("--test-identities", type=int)
    p.add_argument("--frames", type=int)
    p.add_argument("--level", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--unregistered", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="versioned JSON TrainConfig")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--json", help="write the report to this file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("robustness", help="metric deviation under remeshing")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--variants", default="ds2,us2,vd")
    p.add_argument("--split", default="test")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_robustness)

    p = sub.add_parser("transfer", help="animate a source mesh with a target motion")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--motion", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--format", default="obj", choices=["obj", "ply"])
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("embed", help="export motion codes")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--motion", required=True, nargs="+")
    p.add_argument("--csv")
    p.add_argument("--mds", help="write classical MDS trajectories to this CSV")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("bench", help="time rollouts at several resolutions")
    p.add_argument("--ckpt")
    p.add_argument("--resolutions", default="1000,4000,8000")
    p.add_argument("--frames", type=int, default=200)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level or settings.log_level)
    try:
        return args.func(args)
    except Exception as e:
        code = exit_code_for(e)
        logger.error(f"{args.command} failed: {e}")
        if code == 1:
            logger.exception("Unexpected error")
        return code


if __name__ == "__main__":
    sys.exit(main())
