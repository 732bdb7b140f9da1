"""Multi-scale patch tokenization.

Each included stage is linearly projected (a pointwise affine over channels,
one independent projection per stage) to the shared embedding width D, split
into the same sqrt(N) x sqrt(N) grid of non-overlapping patches, flattened
row-major within each patch, and concatenated along the token-length axis in
ascending stage order. Patch j of the output therefore stacks, per scale,
every embedding whose image position falls inside patch j.

Per-scale token lengths are (P_i / sqrt(N))**2; the total per-patch length S
is their sum, and recorded offsets let callers slice any scale back out of
the assembled tokens bitwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .backbone import FeatureHierarchy
from .rng import Rng
from .tensor import ShapeError, Tensor, concat, linear, reshape, transpose


@dataclass(frozen=True)
class TokenizerConfig:
    patch_count: int
    embed_dim: int
    scale_subset: tuple = (0, 1, 2, 3)

    def __post_init__(self):
        object.__setattr__(self, "scale_subset", tuple(sorted(set(self.scale_subset))))
        root = math.isqrt(self.patch_count)
        if root * root != self.patch_count:
            raise ValueError(f"patch_count {self.patch_count} is not a perfect square")
        if not self.scale_subset:
            raise ValueError("scale_subset must be nonempty")
        if any(i not in (0, 1, 2, 3) for i in self.scale_subset):
            raise ValueError(f"scale_subset {self.scale_subset} must be within {{0,1,2,3}}")
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be positive")

    @property
    def grid(self) -> int:
        return math.isqrt(self.patch_count)


@dataclass
class MultiScaleTokens:
    """Assembled per-patch tokens [n, N, S, D] plus the scale bookkeeping."""

    tokens: Tensor
    scales: tuple
    per_scale_lengths: tuple

    @property
    def total_length(self) -> int:
        return sum(self.per_scale_lengths)

    @property
    def offsets(self) -> tuple:
        out = []
        acc = 0
        for length in self.per_scale_lengths:
            out.append(acc)
            acc += length
        return tuple(out)

    def slice_scale(self, scale: int) -> Tensor:
        """Recover the x''_i block for one included scale."""
        pos = self.scales.index(scale)
        start = self.offsets[pos]
        return self.tokens[:, :, start:start + self.per_scale_lengths[pos], :]


def project_scale(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """[n, C, P, P] -> [n, P, P, D] via an independent 1x1 affine over channels."""
    if x.ndim != 4:
        raise ShapeError(f"project_scale expects [n,C,P,P], got {x.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(
            f"project_scale: feature channels of {x.shape} do not match projection {weight.shape}"
        )
    return linear(transpose(x, (0, 2, 3, 1)), weight, bias)


def patchify_flatten(x: Tensor, patch_count: int) -> Tensor:
    """[n, P, P, D] -> [n, N, (P/sqrt(N))^2, D].

    Patches are ordered row-major over the sqrt(N) x sqrt(N) grid and
    positions inside a patch are flattened row-major; the map is invertible
    (see :func:`unpatchify`).
    """
    g = math.isqrt(patch_count)
    if g * g != patch_count:
        raise ValueError(f"patch_count {patch_count} is not a perfect square")
    n, p, p2, d = x.shape
    if p != p2:
        raise ShapeError(f"patchify expects square spatial input, got {x.shape}")
    if p % g != 0:
        raise ShapeError(
            f"spatial size {p} is not divisible by the patch grid sqrt({patch_count}) = {g}"
        )
    m = p // g
    x = reshape(x, (n, g, m, g, m, d))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    return reshape(x, (n, patch_count, m * m, d))


def unpatchify(tokens: Tensor, patch_count: int) -> Tensor:
    """Inverse of :func:`patchify_flatten`."""
    g = math.isqrt(patch_count)
    n, npatch, length, d = tokens.shape
    if npatch != patch_count:
        raise ShapeError(f"token patch axis {npatch} does not match patch_count {patch_count}")
    m = math.isqrt(length)
    if m * m != length:
        raise ShapeError(f"token length {length} is not a square")
    x = reshape(tokens, (n, g, g, m, m, d))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    return reshape(x, (n, g * m, g * m, d))


def init_tokenizer(cfg: TokenizerConfig, stage_channels, seed: int):
    """One independent projection (weight + bias) per included scale."""
    rng = Rng(seed)
    params = {}
    for i in cfg.scale_subset:
        c = stage_channels[i]
        params[f"tokenizer.proj{i}.w"] = Tensor(
            rng.derive(f"tokenizer.proj{i}.w").truncated_normal((c, cfg.embed_dim), std=0.02),
            requires_grad=True,
        )
        params[f"tokenizer.proj{i}.b"] = Tensor(np.zeros(cfg.embed_dim), requires_grad=True)
    return params


def assemble_multiscale_tokens(hier: FeatureHierarchy, cfg: TokenizerConfig,
                               params) -> MultiScaleTokens:
    """Project, patchify, and concatenate the included scales (ascending)."""
    blocks = []
    lengths = []
    for i in cfg.scale_subset:
        stage = hier.stages[i]
        projected = project_scale(
            stage, params[f"tokenizer.proj{i}.w"], params[f"tokenizer.proj{i}.b"]
        )
        block = patchify_flatten(projected, cfg.patch_count)
        blocks.append(block)
        lengths.append(block.shape[2])
    tokens = blocks[0] if len(blocks) == 1 else concat(blocks, axis=2)
    return MultiScaleTokens(tokens=tokens, scales=tuple(cfg.scale_subset),
                            per_scale_lengths=tuple(lengths))


def expected_scale_lengths(image_size: int, patch_count: int, scale_subset) -> tuple:
    """Closed-form per-scale token lengths H*W / (16 * 4**i * N)."""
    return tuple(
        (image_size * image_size) // (16 * 4 ** i * patch_count) for i in sorted(set(scale_subset))
    )
