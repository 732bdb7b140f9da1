"""Experiment specs, ablation grids, seeding, and results persistence.

A grid sweeps configuration axes (scale subset, scale-token mode, attention
mode, heads, depth). Every grid point x repeat trains a fresh model and
scores the test split; per-run rows and per-point mean +/- sample std land
in one versioned ``results.csv``, with the resolved configuration echoed on
every row and the full spec stored alongside as JSON.

Seeding: each run's seed is ``stable_hash(base_seed, grid_key, repeat)``, so
results are independent of execution order and of which other grid points
exist. The ``repeat_only`` scope drops the grid key from the hash, which
makes runs of different variants share initialization streams; parameters
are drawn per-name, so tensors common to two variants (tokenizer, head, ...)
are then bitwise identical across them.
"""

from __future__ import annotations

import csv
import itertools
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .data import DatasetSplits, SyntheticSpec, build_synthetic_splits, load_dataset
from .model import ATTENTION_MODES, DuoFormer, DuoFormerConfig, config_violations
from .rng import stable_hash
from .scale_token import SCALE_TOKEN_MODES
from .trainer import (
    AugmentConfig,
    TrainConfig,
    eval_transform,
    evaluate,
    train_loop,
    write_history_csv,
)

RESULTS_SCHEMA_VERSION = 1
RESULTS_FIELDS = (
    "schema_version", "row_type", "grid_key", "repeat", "seed", "status", "reason",
    "epochs", "best_epoch", "val_best_balanced_acc", "test_balanced_acc", "test_loss",
    "bacc_mean", "bacc_std", "config",
)
GRID_AXES = ("attention_mode", "scale_token_mode", "scale_subset", "n_heads", "depth")
SEED_SCOPES = ("grid_point", "repeat_only")


def validate_config(cfg: DuoFormerConfig) -> list:
    """All structural violations of a model configuration (never raises)."""
    return config_violations(cfg)


@dataclass
class ExperimentSpec:
    model: DuoFormerConfig
    train: TrainConfig
    dataset: dict
    augment: AugmentConfig | None = None
    repeats: int = 1
    grid: dict = field(default_factory=dict)
    seed_scope: str = "grid_point"

    def __post_init__(self):
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if self.seed_scope not in SEED_SCOPES:
            raise ValueError(f"seed_scope must be one of {SEED_SCOPES}")
        unknown = [a for a in self.grid if a not in GRID_AXES]
        if unknown:
            raise ValueError(f"unknown grid axes {unknown}; valid: {GRID_AXES}")

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "dataset": _dataset_to_dict(self.dataset),
            "augment": None if self.augment is None else _augment_to_dict(self.augment),
            "repeats": self.repeats,
            "grid": {k: list(v) for k, v in self.grid.items()},
            "seed_scope": self.seed_scope,
        }

    @staticmethod
    def from_dict(d: dict) -> "ExperimentSpec":
        augment = d.get("augment")
        return ExperimentSpec(
            model=DuoFormerConfig.from_dict(d["model"]),
            train=TrainConfig.from_dict(d.get("train", {})),
            dataset=d["dataset"],
            augment=None if augment is None else _augment_from_dict(augment),
            repeats=int(d.get("repeats", 1)),
            grid=dict(d.get("grid", {})),
            seed_scope=d.get("seed_scope", "grid_point"),
        )


def _dataset_to_dict(dataset: dict) -> dict:
    if "synthetic" in dataset:
        synth = dataset["synthetic"]
        return {"synthetic": synth.to_dict() if isinstance(synth, SyntheticSpec) else synth}
    return dict(dataset)


def _augment_to_dict(a: AugmentConfig) -> dict:
    return {"flags": list(a.flags), "out_size": a.out_size, "mean": list(a.mean),
            "std": list(a.std), "normalize": a.normalize}


def _augment_from_dict(d: dict) -> AugmentConfig:
    return AugmentConfig(
        flags=tuple(d.get("flags", ())), out_size=d.get("out_size"),
        mean=tuple(d.get("mean", (0.485, 0.456, 0.406))),
        std=tuple(d.get("std", (0.229, 0.224, 0.225))),
        normalize=bool(d.get("normalize", True)),
    )


def load_spec(path: str) -> ExperimentSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return ExperimentSpec.from_dict(json.load(fh))


# --------------------------------------------------------------------------
# grid expansion
# --------------------------------------------------------------------------

def _axis_value_key(axis: str, value) -> str:
    if axis == "scale_subset":
        return "".join(str(i) for i in sorted(set(value)))
    return str(value)


def grid_points(spec: ExperimentSpec):
    """(grid_key, overrides) for every point, in canonical axis order."""
    axes = [a for a in GRID_AXES if a in spec.grid]
    if not axes:
        return [("base", {})]
    points = []
    for combo in itertools.product(*(spec.grid[a] for a in axes)):
        overrides = {}
        parts = []
        for axis, value in zip(axes, combo):
            overrides[axis] = tuple(value) if axis == "scale_subset" else value
            parts.append(f"{axis}={_axis_value_key(axis, value)}")
        points.append(("__".join(parts), overrides))
    return points


def resolve_point(model: DuoFormerConfig, overrides: dict,
                  dataset_kind: str) -> DuoFormerConfig:
    cfg = replace(model, **overrides) if overrides else model
    if dataset_kind == "hierarchy" and cfg.use_backbone:
        cfg = replace(cfg, use_backbone=False)
    return cfg


def run_seed(base_seed: int, grid_key: str, repeat: int, seed_scope: str) -> int:
    if seed_scope == "repeat_only":
        return stable_hash(base_seed, "repeat", repeat)
    return stable_hash(base_seed, grid_key, repeat)


# --------------------------------------------------------------------------
# experiment execution
# --------------------------------------------------------------------------

def _load_experiment_data(spec: ExperimentSpec, base_seed: int) -> DatasetSplits:
    if "manifest" in spec.dataset:
        return load_dataset(spec.dataset["manifest"])
    synth = spec.dataset.get("synthetic")
    if synth is None:
        raise ValueError("dataset must provide 'manifest' or 'synthetic'")
    if not isinstance(synth, SyntheticSpec):
        synth = SyntheticSpec.from_dict(synth)
    return build_synthetic_splits(synth, stable_hash(base_seed, "dataset"))


def _run_single(cfg: DuoFormerConfig, spec: ExperimentSpec, data: DatasetSplits,
                seed: int, run_dir: str | None):
    model = DuoFormer(cfg, seed=stable_hash(seed, "init"))
    tcfg = replace(spec.train, seed=stable_hash(seed, "train"))
    result = train_loop(model, data, tcfg, augment_cfg=spec.augment)

    test_inputs = data.test_inputs
    if spec.augment is not None and not isinstance(test_inputs, tuple):
        test_inputs = eval_transform(test_inputs, spec.augment)
    report = evaluate(lambda xb: model.forward(xb, train=False)[0],
                      test_inputs, data.test_labels, cfg.n_classes,
                      batch_size=tcfg.batch_size)

    if run_dir is not None:
        os.makedirs(run_dir, exist_ok=True)
        write_history_csv(os.path.join(run_dir, "history.csv"), result.history)
        model.save(os.path.join(run_dir, "checkpoint"))
    return {
        "epochs": len(result.history),
        "best_epoch": result.best_epoch,
        "val_best_balanced_acc": result.best_score,
        "test_balanced_acc": report.balanced_accuracy,
        "test_loss": report.loss,
    }


def run_experiment(spec: ExperimentSpec, out_dir: str | None, base_seed: int,
                   threads: int = 1, log=None) -> list:
    """Execute the whole grid; returns all rows (run, aggregate, skipped)."""
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "spec.json"), "w", encoding="utf-8") as fh:
            json.dump({"base_seed": base_seed, "spec": spec.to_dict()}, fh,
                      indent=2, sort_keys=True)
            fh.write("\n")
    data = _load_experiment_data(spec, base_seed)

    rows = []
    jobs = []
    for key, overrides in grid_points(spec):
        cfg = resolve_point(spec.model, overrides, data.kind)
        problems = config_violations(cfg)
        config_json = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
        if problems:
            rows.append({
                "row_type": "skipped", "grid_key": key, "repeat": "", "seed": "",
                "status": "skipped", "reason": "; ".join(problems), "config": config_json,
            })
            continue
        for r in range(spec.repeats):
            seed = run_seed(base_seed, key, r, spec.seed_scope)
            run_dir = None if out_dir is None else os.path.join(out_dir, "runs", key, f"r{r}")
            jobs.append({"key": key, "repeat": r, "seed": seed, "cfg": cfg,
                         "run_dir": run_dir, "config_json": config_json})

    def execute(job):
        metrics = _run_single(job["cfg"], spec, data, job["seed"], job["run_dir"])
        row = {
            "row_type": "run", "grid_key": job["key"], "repeat": job["repeat"],
            "seed": job["seed"], "status": "ok", "reason": "",
            "config": job["config_json"], **metrics,
        }
        if log is not None:
            log(f"[{job['key']} r{job['repeat']}] "
                f"test balanced acc {metrics['test_balanced_acc']:.4f} "
                f"({metrics['epochs']} epochs)")
        return row

    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows.extend(pool.map(execute, jobs))
    else:
        rows.extend(execute(job) for job in jobs)

    # per-point aggregates (sample std; exactly 0 for identical repeats)
    by_key: dict[str, list] = {}
    for row in rows:
        if row["row_type"] == "run":
            by_key.setdefault(row["grid_key"], []).append(row)
    for key in sorted(by_key):
        runs = by_key[key]
        baccs = np.array([r["test_balanced_acc"] for r in runs], dtype=np.float64)
        std = float(baccs.std(ddof=1)) if len(baccs) > 1 else 0.0
        rows.append({
            "row_type": "aggregate", "grid_key": key, "repeat": "", "seed": "",
            "status": "ok", "reason": "", "bacc_mean": float(baccs.mean()),
            "bacc_std": std, "config": runs[0]["config"],
        })

    rows.sort(key=_row_order)
    if out_dir is not None:
        write_results_csv(os.path.join(out_dir, "results.csv"), rows)
    return rows


def _row_order(row):
    kind_rank = {"run": 0, "aggregate": 1, "skipped": 2}[row["row_type"]]
    rep = row.get("repeat")
    return (row["grid_key"], kind_rank, rep if isinstance(rep, int) else -1)


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.12g}"
    return "" if value is None else str(value)


def write_results_csv(path: str, rows: list):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULTS_FIELDS)
        for row in rows:
            writer.writerow([
                RESULTS_SCHEMA_VERSION if f == "schema_version" else _fmt(row.get(f))
                for f in RESULTS_FIELDS
            ])


def read_results_csv(path: str) -> list:
    with open(path, "r", newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# --------------------------------------------------------------------------
# canned grids
# --------------------------------------------------------------------------

def scale_subset_grid_spec(spec: ExperimentSpec) -> ExperimentSpec:
    """All 15 nonempty subsets of {0,1,2,3}."""
    subsets = []
    for mask in range(1, 16):
        subsets.append(tuple(i for i in range(4) if mask & (1 << i)))
    subsets.sort(key=lambda s: (len(s), s))
    return replace(spec, grid={"scale_subset": subsets})


def attention_mode_grid(spec: ExperimentSpec, out_dir: str | None, base_seed: int,
                        threads: int = 1, log=None) -> list:
    """local_only / global_only / duo under one shared training config.

    Seeds are scoped to the repeat (not the grid key), so all three variants
    share initialization streams: identically named parameters (tokenizer
    projections, classifier head, ...) are bitwise equal across rows.
    """
    spec = replace(spec, grid={"attention_mode": list(ATTENTION_MODES)},
                   seed_scope="repeat_only")
    return run_experiment(spec, out_dir, base_seed, threads=threads, log=log)


def scale_token_mode_grid(spec: ExperimentSpec, out_dir: str | None, base_seed: int,
                          threads: int = 1, log=None) -> list:
    spec = replace(spec, grid={"scale_token_mode": list(SCALE_TOKEN_MODES)},
                   seed_scope="repeat_only")
    return run_experiment(spec, out_dir, base_seed, threads=threads, log=log)
