"""Command line front end: ``concutmix {make-dataset,train,evaluate,grid,oracle-check}``.

Every command (except oracle-check) writes a ``manifest.json`` into its
output directory; pass it back with ``--manifest`` to reproduce the run.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .experiment import (
    DatasetSpec,
    ExperimentSpec,
    run_evaluate,
    run_grid,
    run_make_dataset,
    run_train,
)
from .oracles import run_all
from .trainer import TrainConfig

# flag name -> TrainConfig field, for the rectification shortcuts
RECTIFY_FLAGS = {"topk": "K", "omega": "omega", "phi": "phi", "metric": "metric"}


def parse_override(text: str):
    key, sep, raw = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _load_manifest(path, command):
    data = json.loads(Path(path).read_text())
    if data.get("command") != command:
        raise SystemExit(f"{path} is a {data.get('command')!r} manifest, not {command!r}")
    return data


def _dataset_spec(args) -> DatasetSpec:
    if args.dataset and args.synthetic is not None:
        raise SystemExit("--dataset and --synthetic are mutually exclusive")
    if args.dataset:
        spec = DatasetSpec(source=str(args.dataset))
    else:
        spec = DatasetSpec.parse(args.synthetic or "")
    if args.imbalance_factor is not None:
        spec.imbalance_factor = args.imbalance_factor
    if args.val_per_class is not None:
        spec.val_per_class = args.val_per_class
    if args.data_seed is not None:
        spec.seed = args.data_seed
    return spec


def _train_config(args) -> TrainConfig:
    values = {}
    if args.config:
        values.update(json.loads(Path(args.config).read_text()))
    for flag, name in RECTIFY_FLAGS.items():
        v = getattr(args, flag)
        if v is not None:
            values[name] = v
    for key, value in args.override or ():
        values[key] = value
    return TrainConfig.from_dict(values)


def _add_dataset_args(p):
    g = p.add_argument_group("dataset")
    g.add_argument("--dataset", type=Path, help="balanced LTDS1 archive to split and subsample")
    g.add_argument("--synthetic", metavar="SPEC",
                   help="synthetic source, e.g. 'classes=10,per_class=230,shape=8x8x3,"
                        "separation=1.0,noise=0.25,val_per_class=30,imbalance=100,seed=0'")
    g.add_argument("--imbalance-factor", type=float)
    g.add_argument("--val-per-class", type=int)
    g.add_argument("--data-seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="concutmix", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-dataset", help="write train.ltds / val.ltds")
    _add_dataset_args(p)
    p.add_argument("--output-dir", type=Path, required=True)
    p.add_argument("--manifest", type=Path, help="re-run a make-dataset manifest")

    p = sub.add_parser("train", help="train one configuration")
    _add_dataset_args(p)
    p.add_argument("--config", type=Path, help="flat JSON file of TrainConfig fields")
    p.add_argument("--override", type=parse_override, action="append", metavar="KEY=VALUE",
                   help="override a config field (JSON-typed value); repeatable")
    p.add_argument("--topk", type=int)
    p.add_argument("--omega", type=float)
    p.add_argument("--phi", choices=("log", "linear"))
    p.add_argument("--metric", choices=("euclid", "cosine"))
    p.add_argument("--checkpoint-out", type=Path)
    p.add_argument("--output-dir", type=Path, required=True)
    p.add_argument("--manifest", type=Path, help="re-run a train manifest")

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on the validation split")
    _add_dataset_args(p)
    p.add_argument("--checkpoint-in", type=Path)
    p.add_argument("--bins", type=int, default=15)
    p.add_argument("--many-threshold", type=int, default=100)
    p.add_argument("--few-threshold", type=int, default=20)
    p.add_argument("--output-dir", type=Path, required=True)
    p.add_argument("--manifest", type=Path, help="re-run an evaluate manifest")

    p = sub.add_parser("grid", help="run an ablation grid (CCMX_THREADS caps parallel cells)")
    p.add_argument("spec", type=Path, nargs="?", help="experiment JSON")
    p.add_argument("--output-dir", type=Path)
    p.add_argument("--manifest", type=Path, help="re-run a grid manifest")

    p = sub.add_parser("oracle-check", help="compare the library with scalar oracles")
    p.add_argument("--cases", type=int, default=1000)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    if args.command == "oracle-check":
        return 0 if run_all(args.cases) else 1

    if args.command == "make-dataset":
        if args.manifest:
            data = DatasetSpec.from_dict(_load_manifest(args.manifest, "make-dataset")["dataset"])
        else:
            data = _dataset_spec(args)
        info = run_make_dataset(data, args.output_dir)
        print(f"train counts {info['train_counts']} -> {args.output_dir}")
        return 0

    if args.command == "train":
        if args.manifest:
            m = _load_manifest(args.manifest, "train")
            data = DatasetSpec.from_dict(m["dataset"])
            config = TrainConfig.from_dict(m["config"])
            checkpoint = args.checkpoint_out or m.get("checkpoint_out")
        else:
            data, config, checkpoint = _dataset_spec(args), _train_config(args), args.checkpoint_out
        summary = run_train(config, data, args.output_dir, checkpoint_out=checkpoint)
        print(json.dumps(summary["final"], sort_keys=True))
        return 0

    if args.command == "evaluate":
        if args.manifest:
            m = _load_manifest(args.manifest, "evaluate")
            summary = run_evaluate(m["checkpoint_in"], DatasetSpec.from_dict(m["dataset"]),
                                   args.output_dir, m["ece_bins"], m["many_threshold"],
                                   m["few_threshold"])
        else:
            if args.checkpoint_in is None:
                raise SystemExit("evaluate needs --checkpoint-in")
            summary = run_evaluate(args.checkpoint_in, _dataset_spec(args), args.output_dir,
                                   args.bins, args.many_threshold, args.few_threshold)
        print(json.dumps(summary["final"], sort_keys=True))
        return 0

    if args.command == "grid":
        if args.manifest:
            spec = ExperimentSpec.from_dict(_load_manifest(args.manifest, "grid")["experiment"])
        elif args.spec:
            spec = ExperimentSpec.from_dict(json.loads(args.spec.read_text()))
        else:
            raise SystemExit("grid needs an experiment JSON or --manifest")
        failed = run_grid(spec, args.output_dir)
        if failed:
            print(f"{failed} grid cell(s) failed", file=sys.stderr)
        return 1 if failed else 0
    return 2


if __name__ == "__main__":
    sys.exit(main())
