"""Command-line interface.

Verbs:
  synth-data   write a synthetic dataset (tensors + manifest)
  validate     check a model configuration, print violations
  train        train one model, write history / checkpoint / report
  eval         score a checkpoint on a dataset's test split
  grid         run the configured ablation grid, write results.csv
  export-attn  save attention-weight traces for a batch as tensor files

All verbs read the same JSON experiment spec via --config (see README for
the schema).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

from .data import SyntheticSpec, load_dataset, make_synthetic_dataset
from .harness import (
    ExperimentSpec,
    load_spec,
    run_experiment,
    validate_config,
    _load_experiment_data,
)
from .model import DuoFormer
from .rng import stable_hash
from .serialize import save_tensor
from .trainer import eval_transform, evaluate, train_loop, write_history_csv


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="duoformer",
                                     description="hierarchical duo-attention classifier")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, out_required: bool = True):
        p.add_argument("--config", required=True, help="experiment spec (JSON)")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--seed", type=int, default=0, help="base seed (u64)")

    p = sub.add_parser("synth-data", help="generate a synthetic dataset")
    common(p)

    p = sub.add_parser("validate", help="validate the model configuration")
    p.add_argument("--config", required=True)

    p = sub.add_parser("train", help="train a single model")
    common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset manifest.json")
    p.add_argument("--out", help="optional report.json path")

    p = sub.add_parser("grid", help="run the ablation grid")
    common(p)
    p.add_argument("--repeats", type=int, help="override spec repeats")
    p.add_argument("--device-threads", type=int, default=1,
                   help="parallel grid points")

    p = sub.add_parser("export-attn", help="export attention traces")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=8, help="samples to trace")
    return parser


def _cmd_synth_data(args) -> int:
    spec = load_spec(args.config)
    synth = spec.dataset.get("synthetic")
    if synth is None:
        print("config has no dataset.synthetic section", file=sys.stderr)
        return 2
    if not isinstance(synth, SyntheticSpec):
        synth = SyntheticSpec.from_dict(synth)
    path = make_synthetic_dataset(synth, stable_hash(args.seed, "dataset"), args.out)
    print(f"wrote {path}")
    return 0


def _cmd_validate(args) -> int:
    spec = load_spec(args.config)
    problems = validate_config(spec.model)
    if not problems:
        print("ok")
        return 0
    for p in problems:
        print(f"violation: {p}")
    return 1


def _cmd_train(args) -> int:
    spec = load_spec(args.config)
    os.makedirs(args.out, exist_ok=True)
    data = _load_experiment_data(spec, args.seed)
    cfg = spec.model
    if data.kind == "hierarchy" and cfg.use_backbone:
        cfg = replace(cfg, use_backbone=False)
    problems = validate_config(cfg)
    if problems:
        for p in problems:
            print(f"violation: {p}", file=sys.stderr)
        return 1
    model = DuoFormer(cfg, seed=stable_hash(args.seed, "init"))
    tcfg = replace(spec.train, seed=stable_hash(args.seed, "train"))
    result = train_loop(
        model, data, tcfg, augment_cfg=spec.augment,
        log=lambda rec: print(
            f"epoch {rec.epoch}: train loss {rec.train_loss:.4f}, "
            f"val balanced acc {rec.val_balanced_acc:.4f}"
        ),
    )
    write_history_csv(os.path.join(args.out, "history.csv"), result.history)
    model.save(os.path.join(args.out, "checkpoint"))

    test_inputs = data.test_inputs
    if spec.augment is not None and not isinstance(test_inputs, tuple):
        test_inputs = eval_transform(test_inputs, spec.augment)
    report = evaluate(lambda xb: model.forward(xb, train=False)[0],
                      test_inputs, data.test_labels, cfg.n_classes,
                      batch_size=tcfg.batch_size)
    payload = {
        "best_epoch": result.best_epoch,
        "val_best_balanced_acc": result.best_score,
        "test": report.to_dict(),
    }
    with open(os.path.join(args.out, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"test balanced accuracy: {report.balanced_accuracy:.4f}")
    return 0


def _cmd_eval(args) -> int:
    model = DuoFormer.load(args.checkpoint)
    data = load_dataset(args.data)
    report = evaluate(lambda xb: model.forward(xb, train=False)[0],
                      data.test_inputs, data.test_labels, model.cfg.n_classes)
    text = json.dumps(report.to_dict(), indent=2, sort_keys=True)
    print(text)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    return 0


def _cmd_grid(args) -> int:
    spec = load_spec(args.config)
    if args.repeats is not None:
        spec = replace(spec, repeats=args.repeats)
    rows = run_experiment(spec, args.out, args.seed,
                          threads=args.device_threads, log=print)
    aggregates = [r for r in rows if r["row_type"] == "aggregate"]
    for row in aggregates:
        print(f"{row['grid_key']}: {row['bacc_mean']:.4f} +/- {row['bacc_std']:.4f}")
    print(f"wrote {os.path.join(args.out, 'results.csv')}")
    return 0


def _cmd_export_attn(args) -> int:
    model = DuoFormer.load(args.checkpoint)
    data = load_dataset(args.data)
    count = min(args.count, len(data.test_labels))
    if count == 0:
        print("dataset test split is empty", file=sys.stderr)
        return 2
    if isinstance(data.test_inputs, tuple):
        batch = tuple(s[:count] for s in data.test_inputs)
    else:
        batch = data.test_inputs[:count]
    _, trace = model.forward(batch, train=False, collect_trace=True)
    os.makedirs(args.out, exist_ok=True)
    index = {"local": [], "global": []}
    for l, w in enumerate(trace.local_weights):
        fname = f"attn_local_{l}.mstf"
        save_tensor(os.path.join(args.out, fname), w)
        index["local"].append(fname)
    for l, w in enumerate(trace.global_weights):
        fname = f"attn_global_{l}.mstf"
        save_tensor(os.path.join(args.out, fname), w)
        index["global"].append(fname)
    with open(os.path.join(args.out, "trace_index.json"), "w", encoding="utf-8") as fh:
        json.dump(index, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {len(index['local'])} local / {len(index['global'])} global traces")
    return 0


_COMMANDS = {
    "synth-data": _cmd_synth_data,
    "validate": _cmd_validate,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "grid": _cmd_grid,
    "export-attn": _cmd_export_attn,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    return _COMMANDS[args.verb](args)


if __name__ == "__main__":
    sys.exit(main())
