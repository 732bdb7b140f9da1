"""Desk-scale directional expectations from paired ablation runs.

These are seeded, deterministic comparisons of small paired training runs:
the asserted orderings reproduce exactly on one platform.
"""

import numpy as np

from duoformer.data import SyntheticSpec, build_synthetic_splits
from duoformer.model import DuoFormer, DuoFormerConfig
from duoformer.trainer import OneCycleConfig, TrainConfig, evaluate, train_loop


def _texture_run(data, subset, seed):
    cfg = DuoFormerConfig(image_size=32, patch_count=1, scale_subset=subset,
                          embed_dim=16, n_heads=2, depth=1, n_classes=2,
                          stage_channels=(8, 8, 8, 16),
                          scale_token_mode="first_token")
    model = DuoFormer(cfg, seed=seed)
    tcfg = TrainConfig(batch_size=8, max_epochs=4, peak_lr=3e-3, patience=4,
                       seed=seed + 1, onecycle=OneCycleConfig(pct_start=0.2))
    train_loop(model, data, tcfg)
    return evaluate(lambda xb: model.forward(xb)[0], data.test_inputs,
                    data.test_labels, 2, batch_size=8)


def test_coarse_texture_class_degrades_without_the_deepest_scale():
    # class 0: one-cycle ("coarse") diagonal wave; class 1: six-cycle ("fine");
    # under matched noise and a short budget, dropping the deepest scale
    # hurts the coarse class (mean over shared seeds)
    spec = SyntheticSpec(kind="image", n_classes=2, counts=(64, 24, 24),
                         image_size=32, texture_frequencies=(1.0, 6.0),
                         texture_amplitude=0.85, noise_std=1.0)
    data = build_synthetic_splits(spec, 7)
    seeds = (3, 5, 9)
    coarse_full = np.mean([
        _texture_run(data, (0, 1, 2, 3), s).per_class_recall[0] for s in seeds
    ])
    coarse_trimmed = np.mean([
        _texture_run(data, (0, 1, 2), s).per_class_recall[0] for s in seeds
    ])
    assert coarse_full > coarse_trimmed, (
        f"coarse recall with all scales {coarse_full:.3f} should exceed "
        f"{coarse_trimmed:.3f} without scale 3"
    )
