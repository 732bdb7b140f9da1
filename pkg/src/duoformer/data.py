"""Synthetic datasets and the on-disk dataset manifest.

A dataset is a directory of tensor files plus ``manifest.json``:

    {
      "version": 1,
      "kind": "image" | "hierarchy",
      "class_names": [...],
      "splits": {
        "train": [{"tensor": "train_00000.mstf", "label": 0}, ...],
        ...
      }
    }

Image items reference one [3, H, H] tensor; hierarchy items carry
``"tensors": [f0, f1, f2, f3]`` (one file per stage) instead of ``"tensor"``.

Two generators are provided. Hierarchy mode routes through the synthetic
feature generator and plants class evidence at chosen stages. Image mode
paints per-class sinusoidal textures (cycles-per-image frequency chosen per
class) over pixel noise, so coarse- vs fine-texture classes probe different
scales of the model.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, asdict

import numpy as np

from .backbone import (
    BackboneConfig,
    SignalSpec,
    hierarchy_for_labels,
    scale_heterogeneous_spec,
    single_stage_spec,
    stagewise_spec,
)
from .rng import Rng, stable_hash
from .serialize import load_tensor, save_tensor

MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class SyntheticSpec:
    kind: str = "hierarchy"
    n_classes: int = 4
    counts: tuple = (400, 100, 100)
    image_size: int = 64
    stage_channels: tuple = (16, 32, 64, 128)
    signal: str = "scale_heterogeneous"
    grid: int = 2
    amplitude: float = 3.0
    noise_std: float = 1.0
    texture_frequencies: tuple = (1.0, 2.0, 6.0, 12.0)
    texture_amplitude: float = 2.0

    def __post_init__(self):
        if self.kind not in ("hierarchy", "image"):
            raise ValueError(f"synthetic dataset kind must be hierarchy|image, got {self.kind!r}")
        if len(self.counts) != 3:
            raise ValueError("counts must give (train, val, test) sizes")
        if self.kind == "image" and len(self.texture_frequencies) < self.n_classes:
            raise ValueError("need one texture frequency per class")

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("counts", "stage_channels", "texture_frequencies"):
            d[key] = list(d[key])
        return d

    @staticmethod
    def from_dict(d: dict) -> "SyntheticSpec":
        d = dict(d)
        for key in ("counts", "stage_channels", "texture_frequencies"):
            if key in d:
                d[key] = tuple(d[key])
        return SyntheticSpec(**d)

    def signal_spec(self) -> SignalSpec:
        if self.signal == "scale_heterogeneous":
            base = scale_heterogeneous_spec(self.grid, self.amplitude)
        elif self.signal == "stagewise":
            base = stagewise_spec(self.n_classes, self.amplitude)
        elif self.signal.startswith("single_stage:"):
            stage = int(self.signal.split(":", 1)[1])
            base = single_stage_spec(stage, self.n_classes, self.amplitude)
        else:
            raise ValueError(f"unknown signal preset {self.signal!r}")
        if base.n_classes != self.n_classes:
            raise ValueError(
                f"signal preset {self.signal!r} defines {base.n_classes} classes, "
                f"spec asks for {self.n_classes}"
            )
        return SignalSpec(base.n_classes, base.class_signals, self.noise_std)


@dataclass
class DatasetSplits:
    """In-memory dataset: inputs are [n,3,H,H] arrays or 4-tuples of stages."""

    kind: str
    class_names: list
    train_inputs: object
    train_labels: np.ndarray
    val_inputs: object
    val_labels: np.ndarray
    test_inputs: object
    test_labels: np.ndarray

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def split(self, name: str):
        return {
            "train": (self.train_inputs, self.train_labels),
            "val": (self.val_inputs, self.val_labels),
            "test": (self.test_inputs, self.test_labels),
        }[name]


def _balanced_labels(count: int, n_classes: int) -> np.ndarray:
    return np.arange(count, dtype=np.int64) % n_classes


def _texture_images(seed: int, labels: np.ndarray, spec: SyntheticSpec) -> np.ndarray:
    rng = Rng(seed)
    h = spec.image_size
    n = labels.shape[0]
    images = rng.derive("pixel_noise").normal((n, 3, h, h), std=spec.noise_std)
    phases = rng.derive("phases").uniform((n,), 0.0, 2.0 * math.pi)
    rows = np.arange(h)[:, None]
    cols = np.arange(h)[None, :]
    diag = (rows + cols).astype(np.float64) / h
    for i, label in enumerate(labels):
        freq = spec.texture_frequencies[int(label)]
        images[i] += spec.texture_amplitude * np.sin(2.0 * math.pi * freq * diag + phases[i])
    return images


def build_synthetic_splits(spec: SyntheticSpec, seed: int) -> DatasetSplits:
    """Deterministic in-memory dataset (same content the writer serializes)."""
    parts = {}
    labels = {}
    for split, count in zip(SPLITS, spec.counts):
        split_seed = stable_hash(seed, "split", split)
        lab = _balanced_labels(count, spec.n_classes)
        if spec.kind == "hierarchy":
            cfg = BackboneConfig(spec.image_size, spec.stage_channels)
            hier = hierarchy_for_labels(split_seed, lab, cfg, spec.signal_spec())
            parts[split] = tuple(s.data for s in hier.stages)
        else:
            parts[split] = _texture_images(split_seed, lab, spec)
        labels[split] = lab
    names = [f"class{k}" for k in range(spec.n_classes)]
    return DatasetSplits(
        kind=spec.kind, class_names=names,
        train_inputs=parts["train"], train_labels=labels["train"],
        val_inputs=parts["val"], val_labels=labels["val"],
        test_inputs=parts["test"], test_labels=labels["test"],
    )


def make_synthetic_dataset(spec: SyntheticSpec, seed: int, out_dir: str) -> str:
    """Write tensors + manifest for the dataset; returns the manifest path."""
    data = build_synthetic_splits(spec, seed)
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "version": MANIFEST_VERSION,
        "kind": spec.kind,
        "class_names": data.class_names,
        "splits": {},
    }
    for split in SPLITS:
        inputs, labels = data.split(split)
        items = []
        for i, label in enumerate(labels):
            if spec.kind == "hierarchy":
                files = []
                for s, stage in enumerate(inputs):
                    fname = f"{split}_{i:05d}_s{s}.mstf"
                    save_tensor(os.path.join(out_dir, fname), stage[i])
                    files.append(fname)
                items.append({"tensors": files, "label": int(label)})
            else:
                fname = f"{split}_{i:05d}.mstf"
                save_tensor(os.path.join(out_dir, fname), inputs[i])
                items.append({"tensor": fname, "label": int(label)})
        manifest["splits"][split] = items
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def validate_manifest(path: str, require_nonempty: bool = False) -> list:
    """Structural problems with a manifest; empty list means valid."""
    problems = []
    try:
        with open(path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        return [f"cannot read manifest {path}: {e}"]
    if manifest.get("version") != MANIFEST_VERSION:
        problems.append(f"unsupported manifest version {manifest.get('version')}")
    n_classes = len(manifest.get("class_names", []))
    base = os.path.dirname(path)
    for split in SPLITS:
        items = manifest.get("splits", {}).get(split)
        if items is None:
            problems.append(f"missing split {split!r}")
            continue
        if require_nonempty and not items:
            problems.append(f"split {split!r} is empty")
        for i, item in enumerate(items):
            label = item.get("label", -1)
            if not 0 <= label < n_classes:
                problems.append(f"{split}[{i}]: label {label} outside [0, {n_classes})")
            files = item.get("tensors", None)
            if files is None:
                files = [item["tensor"]] if "tensor" in item else []
            if not files:
                problems.append(f"{split}[{i}]: no tensor files listed")
            for f in files:
                if not os.path.exists(os.path.join(base, f)):
                    problems.append(f"{split}[{i}]: missing file {f}")
    return problems


def load_dataset(path: str) -> DatasetSplits:
    """Load a manifest and all referenced tensors into memory."""
    problems = validate_manifest(path)
    if problems:
        raise ValueError("invalid dataset manifest: " + "; ".join(problems))
    with open(path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    base = os.path.dirname(path)
    kind = manifest["kind"]
    loaded = {}
    labels = {}
    for split in SPLITS:
        items = manifest["splits"][split]
        labels[split] = np.array([it["label"] for it in items], dtype=np.int64)
        if kind == "hierarchy":
            stages = [[] for _ in range(4)]
            for it in items:
                for s, fname in enumerate(it["tensors"]):
                    stages[s].append(load_tensor(os.path.join(base, fname)))
            loaded[split] = tuple(
                np.stack(stage) if stage else np.zeros((0,), dtype=np.float64)
                for stage in stages
            )
        else:
            arrays = [load_tensor(os.path.join(base, it["tensor"])) for it in items]
            loaded[split] = (np.stack(arrays) if arrays
                             else np.zeros((0, 3, 0, 0), dtype=np.float64))
    return DatasetSplits(
        kind=kind, class_names=list(manifest["class_names"]),
        train_inputs=loaded["train"], train_labels=labels["train"],
        val_inputs=loaded["val"], val_labels=labels["val"],
        test_inputs=loaded["test"], test_labels=labels["test"],
    )
