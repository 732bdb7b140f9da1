"""Per-patch scale summary tokens.

The fused token normalizes every included stage to the sqrt(N) x sqrt(N)
patch grid while keeping its channel count, concatenates the results along
channels, and mixes them with a pointwise projection + batch norm + ReLU.
Per-stage downsample recipes (chosen as the minimal arrangement that reaches
the patch grid using a conv where stage 0/1 need one):

    stage 0: 3x3 stride-2 conv (pad 1), then max pool k = stride = P0/(2*g)
    stage 1: 3x3 stride-2 conv (pad 1), then max pool k = stride = P1/(2*g)
    stage 2: max pool k = stride = P2/g
    stage 3: identity (requires P3 == g)

with g = sqrt(N). Three ablation alternatives are exposed alongside the
fused token: the final-stage ("first") token, the per-patch token average,
and a free learnable token.
"""

from __future__ import annotations

import math

import numpy as np

from .backbone import FeatureHierarchy
from .rng import Rng
from .tensor import (
    RunningStats,
    ShapeError,
    Tensor,
    batch_norm,
    broadcast_to,
    conv2d,
    linear,
    maxpool2d,
    relu,
    reshape,
    transpose,
)
from .tokenizer import MultiScaleTokens

SCALE_TOKEN_MODES = ("fused", "first_token", "average", "learnable")


class ConfigError(ValueError):
    pass


def prepends_token(mode: str) -> bool:
    """Whether the mode contributes a token ahead of the multi-scale tokens."""
    if mode not in SCALE_TOKEN_MODES:
        raise ConfigError(f"unknown scale token mode {mode!r}")
    return mode in ("fused", "learnable")


def init_scale_token(mode: str, scale_subset, stage_channels, embed_dim: int,
                     patch_count: int, seed: int, shared_learnable: bool = False):
    """Parameters and batch-norm state for the chosen mode."""
    if mode not in SCALE_TOKEN_MODES:
        raise ConfigError(f"unknown scale token mode {mode!r}")
    rng = Rng(seed)
    params: dict[str, Tensor] = {}
    stats: dict[str, RunningStats] = {}
    if mode == "learnable":
        rows = 1 if shared_learnable else patch_count
        params["scale_token.token"] = Tensor(
            rng.derive("scale_token.token").truncated_normal((rows, embed_dim), std=0.02),
            requires_grad=True,
        )
        return params, stats
    if mode != "fused":
        return params, stats

    for i in (0, 1):
        if i in scale_subset:
            c = stage_channels[i]
            std = np.sqrt(2.0 / (c * 9))
            params[f"scale_token.ds{i}.w"] = Tensor(
                rng.derive(f"scale_token.ds{i}.w").normal((c, c, 3, 3), std=std),
                requires_grad=True,
            )
            params[f"scale_token.ds{i}.b"] = Tensor(np.zeros(c), requires_grad=True)
    c_total = sum(stage_channels[i] for i in scale_subset)
    params["scale_token.fuse.w"] = Tensor(
        rng.derive("scale_token.fuse.w").truncated_normal((c_total, embed_dim), std=0.02),
        requires_grad=True,
    )
    params["scale_token.fuse.b"] = Tensor(np.zeros(embed_dim), requires_grad=True)
    params["scale_token.bn.gain"] = Tensor(np.ones(embed_dim), requires_grad=True)
    params["scale_token.bn.bias"] = Tensor(np.zeros(embed_dim), requires_grad=True)
    stats["scale_token.bn"] = RunningStats(embed_dim)
    return params, stats


def downsample_stage(x: Tensor, stage: int, patch_count: int, params) -> Tensor:
    """Reduce stage features [n, C, P, P] to the patch grid -> [n, N, C]."""
    g = math.isqrt(patch_count)
    p = x.shape[2]
    if stage in (0, 1):
        if p % (2 * g) != 0:
            raise ConfigError(
                f"stage {stage} size {p} cannot reach the {g}x{g} grid via stride-2 conv + pool"
            )
        y = conv2d(x, params[f"scale_token.ds{stage}.w"], params[f"scale_token.ds{stage}.b"],
                   stride=2, padding=1)
        k = p // (2 * g)
        if k > 1:
            y = maxpool2d(y, k, k)
    elif stage == 2:
        if p % g != 0:
            raise ConfigError(f"stage 2 size {p} is not divisible by the patch grid {g}")
        k = p // g
        y = maxpool2d(x, k, k) if k > 1 else x
    elif stage == 3:
        if p != g:
            raise ConfigError(
                f"stage 3 size {p} must equal the patch grid sqrt(N) = {g} for the identity branch"
            )
        y = x
    else:
        raise ConfigError(f"invalid stage index {stage}")
    n, c = y.shape[0], y.shape[1]
    # row-major spatial flattening matches the tokenizer's patch ordering
    return reshape(transpose(y, (0, 2, 3, 1)), (n, patch_count, c))


def fuse_scale_token(hier: FeatureHierarchy, params, stats, scale_subset,
                     patch_count: int, train: bool = True) -> Tensor:
    """Downsample-concat-project-normalize-rectify -> [n, N, D]."""
    from .tensor import concat

    parts = [downsample_stage(hier.stages[i], i, patch_count, params) for i in scale_subset]
    stacked = parts[0] if len(parts) == 1 else concat(parts, axis=2)
    n, npatch, c = stacked.shape
    mixed = linear(stacked, params["scale_token.fuse.w"], params["scale_token.fuse.b"])
    d = mixed.shape[2]
    flat = reshape(mixed, (n * npatch, d))
    normed = batch_norm(flat, params["scale_token.bn.gain"], params["scale_token.bn.bias"],
                        stats["scale_token.bn"], "train" if train else "eval")
    return relu(reshape(normed, (n, npatch, d)))


def make_scale_token(hier: FeatureHierarchy, tokens: MultiScaleTokens, params, stats,
                     mode: str, scale_subset, patch_count: int,
                     train: bool = True) -> Tensor:
    """Per-patch [n, N, D] scale summary under each mode.

    fused / learnable summaries are prepended to the token sequence by the
    encoder; first_token / average describe where the summary is read off
    instead, so here they return the corresponding slice / mean of the raw
    tokens (useful directly in encoder variants that skip local attention).
    """
    if mode == "fused":
        return fuse_scale_token(hier, params, stats, scale_subset, patch_count, train)
    if mode == "learnable":
        token = params["scale_token.token"]
        n = hier.batch
        return broadcast_to(reshape(token, (1,) + token.shape),
                            (n, patch_count, token.shape[-1]))
    if mode == "average":
        return tokens.tokens.mean(axis=2)
    if mode == "first_token":
        start = tokens.offsets[-1]
        return tokens.tokens[:, :, start, :]
    raise ConfigError(f"unknown scale token mode {mode!r}")
