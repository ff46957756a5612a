"""Dataset specs, run directories and ablation grids.

Everything written here is a deterministic function of the resolved spec, so
re-running a ``manifest.json`` reproduces every output byte for byte.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import itertools
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .dataset import (
    Dataset,
    build_longtailed,
    load_dataset,
    make_synthetic_source,
    save_dataset,
    split_per_class,
)
from .metrics import GroupSpec
from .semantic_space import load_checkpoint, save_checkpoint
from .trainer import RECORD_FIELDS, TrainConfig, evaluate_model, train

log = logging.getLogger(__name__)

ABLATION_AXES = ("K", "omega", "phi", "metric", "samplers", "method")


@dataclass
class DatasetSpec:
    """Either a synthetic source or a balanced LTDS1 archive, split into a
    balanced validation set and a long-tailed training set."""

    source: str = "synthetic"  # or a path to an LTDS1 file
    num_classes: int = 10
    per_class: int = 230
    image_shape: tuple[int, int, int] = (8, 8, 3)
    class_separation: float = 1.0
    noise: float = 0.25
    val_per_class: int = 30
    imbalance_factor: float = 100.0
    seed: int = 0

    @classmethod
    def parse(cls, text: str) -> DatasetSpec:
        """``key=value`` pairs separated by commas, e.g. ``classes=10,imbalance=100``.
        ``shape`` is written as ``WxHxC``."""
        aliases = {"classes": "num_classes", "imbalance": "imbalance_factor",
                   "shape": "image_shape", "separation": "class_separation"}
        fields_ = {f.name: f for f in dataclasses.fields(cls)}
        values = {}
        for item in filter(None, text.split(",")):
            key, _, raw = item.partition("=")
            key = aliases.get(key.strip(), key.strip())
            if key not in fields_ or key == "source":
                raise ValueError(f"unknown synthetic dataset key {key!r}")
            if key == "image_shape":
                values[key] = tuple(int(v) for v in raw.lower().split("x"))
            else:
                values[key] = type(getattr(cls(), key))(raw)
        return cls(**values)

    @classmethod
    def from_dict(cls, data: dict) -> DatasetSpec:
        data = dict(data)
        data.pop("source_sha256", None)
        if "image_shape" in data:
            data["image_shape"] = tuple(data["image_shape"])
        return cls(**data)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["image_shape"] = list(self.image_shape)
        if self.source != "synthetic":
            out["source_sha256"] = sha256_file(self.source)
        return out

    def build(self) -> tuple[Dataset, Dataset]:
        """Returns ``(train, val)``."""
        if self.source == "synthetic":
            src = make_synthetic_source(
                self.num_classes, self.per_class + self.val_per_class, self.image_shape,
                self.class_separation, seed=self.seed, noise=self.noise)
        else:
            src = load_dataset(self.source)
        val, rest = split_per_class(src, self.val_per_class)
        return build_longtailed(rest, self.imbalance_factor, self.seed), val


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_json(path, data):
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        if header:
            writer.writerow(header)
        writer.writerows(rows)


def _fmt(v):
    return "" if v is None else repr(float(v))


def manifest(command: str, **payload) -> dict:
    return {"command": command, "code_version": __version__, **payload}


def evaluation_summary(ev) -> dict:
    return {
        "top1": ev.top1,
        "acc_many": ev.groups["many"],
        "acc_medium": ev.groups["medium"],
        "acc_few": ev.groups["few"],
        "ece": ev.calibration.ece,
    }


def write_evaluation(out_dir: Path, ev):
    write_csv(out_dir / "confusion.csv", None, ev.confusion.tolist())
    write_csv(out_dir / "reliability.csv", ["lo", "hi", "count", "acc", "conf"],
              [[_fmt(lo), _fmt(hi), n, _fmt(a), _fmt(c)]
               for lo, hi, n, a, c in ev.calibration.rows()])


def run_train(config: TrainConfig, data: DatasetSpec, out_dir, checkpoint_out=None,
              datasets: tuple[Dataset, Dataset] | None = None) -> dict:
    """Train one configuration and write metrics.csv, summary.json, manifest.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_set, val_set = datasets or data.build()
    config = config.resolved(train_set.num_classes)
    write_json(out_dir / "manifest.json", manifest(
        "train", dataset=data.to_dict(), config=config.to_dict(), seed=config.seed,
        checkpoint_out=None if checkpoint_out is None else str(checkpoint_out)))
    result = train(config, train_set, val_set)
    write_csv(out_dir / "metrics.csv", RECORD_FIELDS, [r.row() for r in result.records])
    summary = {
        "train_counts": list(train_set.census.counts),
        "val_counts": [int(c) for c in val_set.class_counts],
        "epochs": config.epochs,
        "final": evaluation_summary(result.evaluation),
        "gamma_mean_last": result.records[-1].gamma_mean if result.records else 0.0,
    }
    write_json(out_dir / "summary.json", summary)
    write_evaluation(out_dir, result.evaluation)
    if checkpoint_out is not None:
        save_checkpoint(result.model, checkpoint_out)
    return summary


def run_evaluate(checkpoint, data: DatasetSpec, out_dir, n_bins=15,
                 many_threshold=100, few_threshold=20) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_json(out_dir / "manifest.json", manifest(
        "evaluate", dataset=data.to_dict(), checkpoint_in=str(checkpoint),
        checkpoint_sha256=sha256_file(checkpoint), ece_bins=n_bins,
        many_threshold=many_threshold, few_threshold=few_threshold))
    train_set, val_set = data.build()
    model = load_checkpoint(checkpoint)
    ev = evaluate_model(model, val_set, train_set.census.counts,
                        GroupSpec(many_threshold, few_threshold), n_bins)
    write_evaluation(out_dir, ev)
    summary = {"train_counts": list(train_set.census.counts), "final": evaluation_summary(ev)}
    write_json(out_dir / "summary.json", summary)
    return summary


def run_make_dataset(data: DatasetSpec, out_dir) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_json(out_dir / "manifest.json", manifest("make-dataset", dataset=data.to_dict()))
    train_set, val_set = data.build()
    save_dataset(train_set, out_dir / "train.ltds")
    save_dataset(val_set, out_dir / "val.ltds")
    info = {
        "train_counts": list(train_set.census.counts),
        "val_counts": [int(c) for c in val_set.class_counts],
        "train_sha256": sha256_file(out_dir / "train.ltds"),
        "val_sha256": sha256_file(out_dir / "val.ltds"),
    }
    write_json(out_dir / "summary.json", info)
    return info


@dataclass
class ExperimentSpec:
    name: str
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablation: dict = field(default_factory=dict)
    output_dir: str = "runs"
    max_runs: int = 64

    def __post_init__(self):
        for axis, values in self.ablation.items():
            if axis not in ABLATION_AXES:
                raise ValueError(f"unknown ablation axis {axis!r}; choose from {ABLATION_AXES}")
            if not isinstance(values, list) or not values:
                raise ValueError(f"ablation axis {axis!r} needs a non-empty list")
        if len(self.cells()) > self.max_runs:
            raise ValueError(f"grid has {len(self.cells())} cells, cap is {self.max_runs}")

    @classmethod
    def from_dict(cls, data: dict) -> ExperimentSpec:
        data = dict(data)
        data["dataset"] = DatasetSpec.from_dict(data.get("dataset", {}))
        data["train"] = TrainConfig.from_dict(data.get("train", {}))
        return cls(**data)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "dataset": self.dataset.to_dict(),
            "train": self.train.to_dict(),
            "ablation": self.ablation,
            "output_dir": self.output_dir,
            "max_runs": self.max_runs,
        }

    def cells(self) -> list[dict]:
        axes = list(self.ablation)
        return [dict(zip(axes, combo))
                for combo in itertools.product(*(self.ablation[a] for a in axes))]


def cell_config(base: TrainConfig, cell: dict) -> TrainConfig:
    overrides = dict(cell)
    samplers = overrides.pop("samplers", None)
    if samplers is not None:
        overrides["bg_sampler"], overrides["fg_sampler"] = samplers
    if overrides.get("omega") == "default":
        overrides["omega"] = None
    if overrides.get("K") == "default":
        overrides["K"] = None
    return TrainConfig.from_dict({**base.to_dict(), **overrides})


def cell_name(index: int, cell: dict) -> str:
    parts = [f"{k}={'-'.join(map(str, v)) if isinstance(v, list) else v}" for k, v in cell.items()]
    return f"cell{index:03d}" + ("_" + "_".join(parts) if parts else "")


def run_grid(spec: ExperimentSpec, out_dir=None, threads: int | None = None) -> int:
    """Run every grid cell on one shared dataset; returns the number of failed cells."""
    out_dir = Path(out_dir or spec.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_json(out_dir / "manifest.json", manifest("grid", experiment=spec.to_dict()))
    train_set, val_set = spec.dataset.build()
    save_dataset(train_set, out_dir / "train.ltds")
    save_dataset(val_set, out_dir / "val.ltds")
    data_hash = sha256_file(out_dir / "train.ltds")
    cells = spec.cells()
    threads = threads or int(os.environ.get("CCMX_THREADS", "1"))

    def run_cell(item):
        index, cell = item
        name = cell_name(index, cell)
        try:
            summary = run_train(cell_config(spec.train, cell), spec.dataset, out_dir / name,
                                datasets=(train_set, val_set))
            return name, cell, summary, None
        except Exception as exc:  # recorded per cell, the grid keeps going
            log.exception("cell %s failed", name)
            return name, cell, None, f"{type(exc).__name__}: {exc}"

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(run_cell, enumerate(cells)))

    axes = list(spec.ablation)
    header = ["cell", *axes, "dataset_sha256", "status", "top1", "acc_many", "acc_medium",
              "acc_few", "ece"]
    rows = []
    for name, cell, summary, error in results:
        values = [json.dumps(cell[a]) for a in axes]
        if summary is None:
            rows.append([name, *values, data_hash, f"failed: {error}", "", "", "", "", ""])
        else:
            final = summary["final"]
            rows.append([name, *values, data_hash, "ok",
                         *(_fmt(final[k]) for k in ("top1", "acc_many", "acc_medium",
                                                    "acc_few", "ece"))])
    write_csv(out_dir / "grid.csv", header, rows)
    return sum(1 for r in results if r[3] is not None)
