"""Four-stage convolutional feature extractor and its synthetic test double.

The extractor is a small residual network with the standard pyramid layout:
a stride-4 stem (3x3 stride-2 conv + 2x2 max pool), then three stages that
each halve the spatial size, so stage i emits ``image_size / (4 * 2**i)``.
Stage entries are residual blocks whose main path starts with a 3x3 stride-2
conv and whose shortcut is a 1x1 stride-2 conv; all other blocks are
identity-shortcut residual blocks of two 3x3 convs. Convs carry no bias
(each is followed by batch norm).

``synthetic_hierarchy`` fabricates stage outputs directly: deterministic
noise plus class-conditional patterns planted at chosen stages, so tests can
hand the downstream modules features with known, decodable structure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import Rng
from .tensor import (
    RunningStats,
    Tensor,
    batch_norm,
    conv2d,
    maxpool2d,
    no_grad,
    relu,
    reshape,
    transpose,
)


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int
    stage_channels: tuple = (16, 32, 64, 128)
    blocks_per_stage: int = 1

    def __post_init__(self):
        if self.image_size % 32 != 0:
            raise ValueError(f"image_size {self.image_size} is not divisible by 32")
        if len(self.stage_channels) != 4:
            raise ValueError("stage_channels must list exactly four stages")
        if self.blocks_per_stage < 1:
            raise ValueError("blocks_per_stage must be >= 1")

    def stage_size(self, i: int) -> int:
        return self.image_size // (4 * 2 ** i)


@dataclass
class FeatureHierarchy:
    """Stage outputs x_0..x_3, each [n, C_i, P_i, P_i]."""

    stages: tuple

    def __post_init__(self):
        if len(self.stages) != 4:
            raise ValueError("a feature hierarchy has exactly four stages")
        n = self.stages[0].shape[0]
        prev = None
        for i, s in enumerate(self.stages):
            if s.ndim != 4 or s.shape[0] != n:
                raise ValueError(f"stage {i} has invalid shape {s.shape}")
            if s.shape[2] != s.shape[3]:
                raise ValueError(f"stage {i} is not square: {s.shape}")
            if prev is not None and s.shape[2] * 2 != prev:
                raise ValueError(
                    f"stage {i} spatial size {s.shape[2]} does not halve the previous {prev}"
                )
            prev = s.shape[2]

    @property
    def batch(self) -> int:
        return self.stages[0].shape[0]

    def spatial_sizes(self) -> tuple:
        return tuple(s.shape[2] for s in self.stages)


def batch_norm_nchw(x, gain, bias, running, mode, momentum: float = 0.1):
    """Batch norm over channels of an [n,c,h,w] tensor (population = n*h*w)."""
    n, c, h, w = x.shape
    flat = reshape(transpose(x, (0, 2, 3, 1)), (n * h * w, c))
    normed = batch_norm(flat, gain, bias, running, mode, momentum)
    return transpose(reshape(normed, (n, h, w, c)), (0, 3, 1, 2))


def _he_conv(rng: Rng, name: str, c_out: int, c_in: int, k: int) -> Tensor:
    std = np.sqrt(2.0 / (c_in * k * k))
    return Tensor(rng.derive(name).normal((c_out, c_in, k, k), std=std), requires_grad=True)


def init_backbone(cfg: BackboneConfig, seed: int):
    """Returns (params dict of Tensors, batch-norm running-stat dict)."""
    rng = Rng(seed)
    params: dict[str, Tensor] = {}
    stats: dict[str, RunningStats] = {}

    def bn(name: str, c: int):
        params[f"{name}.gain"] = Tensor(np.ones(c), requires_grad=True)
        params[f"{name}.bias"] = Tensor(np.zeros(c), requires_grad=True)
        stats[name] = RunningStats(c)

    c0 = cfg.stage_channels[0]
    params["backbone.stem.conv.w"] = _he_conv(rng, "backbone.stem.conv.w", c0, 3, 3)
    bn("backbone.stem.bn", c0)

    for i, c in enumerate(cfg.stage_channels):
        prefix = f"backbone.s{i}"
        if i > 0:
            cin = cfg.stage_channels[i - 1]
            params[f"{prefix}.down.conv1.w"] = _he_conv(rng, f"{prefix}.down.conv1.w", c, cin, 3)
            bn(f"{prefix}.down.bn1", c)
            params[f"{prefix}.down.conv2.w"] = _he_conv(rng, f"{prefix}.down.conv2.w", c, c, 3)
            bn(f"{prefix}.down.bn2", c)
            params[f"{prefix}.down.proj.w"] = _he_conv(rng, f"{prefix}.down.proj.w", c, cin, 1)
            bn(f"{prefix}.down.bnp", c)
        for b in range(cfg.blocks_per_stage):
            params[f"{prefix}.b{b}.conv1.w"] = _he_conv(rng, f"{prefix}.b{b}.conv1.w", c, c, 3)
            bn(f"{prefix}.b{b}.bn1", c)
            params[f"{prefix}.b{b}.conv2.w"] = _he_conv(rng, f"{prefix}.b{b}.conv2.w", c, c, 3)
            bn(f"{prefix}.b{b}.bn2", c)
    return params, stats


def _identity_block(x, params, stats, prefix, mode):
    y = conv2d(x, params[f"{prefix}.conv1.w"], stride=1, padding=1)
    y = relu(batch_norm_nchw(y, params[f"{prefix}.bn1.gain"], params[f"{prefix}.bn1.bias"],
                             stats[f"{prefix}.bn1"], mode))
    y = conv2d(y, params[f"{prefix}.conv2.w"], stride=1, padding=1)
    y = batch_norm_nchw(y, params[f"{prefix}.bn2.gain"], params[f"{prefix}.bn2.bias"],
                        stats[f"{prefix}.bn2"], mode)
    return relu(y + x)


def _downsample_block(x, params, stats, prefix, mode):
    y = conv2d(x, params[f"{prefix}.conv1.w"], stride=2, padding=1)
    y = relu(batch_norm_nchw(y, params[f"{prefix}.bn1.gain"], params[f"{prefix}.bn1.bias"],
                             stats[f"{prefix}.bn1"], mode))
    y = conv2d(y, params[f"{prefix}.conv2.w"], stride=1, padding=1)
    y = batch_norm_nchw(y, params[f"{prefix}.bn2.gain"], params[f"{prefix}.bn2.bias"],
                        stats[f"{prefix}.bn2"], mode)
    short = conv2d(x, params[f"{prefix}.proj.w"], stride=2, padding=0)
    short = batch_norm_nchw(short, params[f"{prefix}.bnp.gain"], params[f"{prefix}.bnp.bias"],
                            stats[f"{prefix}.bnp"], mode)
    return relu(y + short)


def backbone_forward(image: Tensor, cfg: BackboneConfig, params, stats,
                     train: bool = True, frozen: bool = False) -> FeatureHierarchy:
    """Run the extractor; returns the four stage outputs.

    ``frozen`` reproduces the transfer-learning regime: batch norm uses its
    running statistics and no graph is recorded, so the extractor acts as a
    fixed feature map.
    """
    if image.ndim != 4 or image.shape[1] != 3:
        raise ValueError(f"expected images [n,3,H,H], got shape {image.shape}")
    h = image.shape[2]
    if h != image.shape[3] or h != cfg.image_size:
        raise ValueError(f"image spatial size {image.shape[2:]} does not match config {cfg.image_size}")
    if h % 32 != 0:
        raise ValueError(f"image size {h} is not divisible by 32")

    if frozen:
        with no_grad():
            return _backbone_forward(image.detach(), cfg, params, stats, "eval")
    return _backbone_forward(image, cfg, params, stats, "train" if train else "eval")


def _backbone_forward(image, cfg, params, stats, mode):
    x = conv2d(image, params["backbone.stem.conv.w"], stride=2, padding=1)
    x = relu(batch_norm_nchw(x, params["backbone.stem.bn.gain"], params["backbone.stem.bn.bias"],
                             stats["backbone.stem.bn"], mode))
    x = maxpool2d(x, 2, 2)

    outputs = []
    for i in range(4):
        prefix = f"backbone.s{i}"
        if i > 0:
            x = _downsample_block(x, params, stats, f"{prefix}.down", mode)
        for b in range(cfg.blocks_per_stage):
            x = _identity_block(x, params, stats, f"{prefix}.b{b}", mode)
        outputs.append(x)
    return FeatureHierarchy(tuple(outputs))


# --------------------------------------------------------------------------
# synthetic hierarchies
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Signal:
    """One planted class pattern: where (stage/channel) and what shape.

    kinds:
      * ``mean``     add ``amplitude`` across the whole channel
      * ``cell_tl``  add a square bump in the top-left quadrant of every
                     grid cell (``grid`` cells per side)
      * ``cell_tr`` / ``cell_bl`` / ``cell_br``  same bump in the other
                     quadrants
    """

    stage: int
    kind: str = "mean"
    channel: int = 0
    amplitude: float = 3.0
    grid: int = 1


@dataclass(frozen=True)
class SignalSpec:
    n_classes: int
    class_signals: tuple = ()
    noise_std: float = 1.0

    def signals_for(self, label: int):
        if label < len(self.class_signals):
            return self.class_signals[label]
        return ()


def single_stage_spec(stage: int, n_classes: int = 4, amplitude: float = 3.0) -> SignalSpec:
    """Each class shifts its own channel at one stage; other stages are noise."""
    return SignalSpec(
        n_classes=n_classes,
        class_signals=tuple(
            (Signal(stage=stage, kind="mean", channel=k, amplitude=amplitude),)
            for k in range(n_classes)
        ),
    )


def stagewise_spec(n_classes: int = 4, amplitude: float = 3.0) -> SignalSpec:
    """Class k shifts channel 0 of stage k: every class lives at its own scale."""
    if n_classes > 4:
        raise ValueError("stagewise coding supports at most four classes")
    return SignalSpec(
        n_classes=n_classes,
        class_signals=tuple(
            (Signal(stage=k, kind="mean", channel=0, amplitude=amplitude),)
            for k in range(n_classes)
        ),
    )


def scale_heterogeneous_spec(grid: int, amplitude: float = 6.0,
                             mean_amplitude: float = 3.0) -> SignalSpec:
    """Four classes whose evidence lives at different scales.

    Classes 0/1 differ only by the within-cell location of a stage-2 bump
    (top-left vs bottom-right position of each patch cell): max pooling a
    patch erases the location, so any pathway that pools before reading
    cannot tell them apart, while the token sequence keeps both positions.
    Classes 2/3 are channel mean shifts at stages 1 and 3.
    """
    return SignalSpec(
        n_classes=4,
        class_signals=(
            (Signal(stage=2, kind="cell_tl", channel=0, amplitude=amplitude, grid=grid),),
            (Signal(stage=2, kind="cell_br", channel=0, amplitude=amplitude, grid=grid),),
            (Signal(stage=1, kind="mean", channel=1, amplitude=mean_amplitude),),
            (Signal(stage=3, kind="mean", channel=1, amplitude=mean_amplitude),),
        ),
    )


_CELL_CORNERS = {"cell_tl": (0, 0), "cell_tr": (0, 1), "cell_bl": (1, 0), "cell_br": (1, 1)}


def _plant(stage_data: np.ndarray, sig: Signal):
    p = stage_data.shape[-1]
    if sig.kind == "mean":
        stage_data[sig.channel] += sig.amplitude
        return
    if sig.kind not in _CELL_CORNERS:
        raise ValueError(f"unknown signal kind {sig.kind!r}")
    if p % sig.grid != 0:
        raise ValueError(f"signal grid {sig.grid} does not divide stage size {p}")
    m = p // sig.grid
    q = max(m // 2, 1)
    down, right = _CELL_CORNERS[sig.kind]
    for cr in range(sig.grid):
        for cc in range(sig.grid):
            r0 = cr * m + down * (m - q)
            c0 = cc * m + right * (m - q)
            stage_data[sig.channel, r0:r0 + q, c0:c0 + q] += sig.amplitude


def hierarchy_for_labels(seed: int, labels: np.ndarray, cfg: BackboneConfig,
                         spec: SignalSpec) -> FeatureHierarchy:
    """Deterministic noise features with per-label planted signals."""
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.shape[0]
    rng = Rng(seed)
    stages = []
    for i, c in enumerate(cfg.stage_channels):
        p = cfg.stage_size(i)
        data = rng.derive(f"stage{i}").normal((n, c, p, p), std=spec.noise_std)
        stages.append(data)
    for j, label in enumerate(labels):
        for sig in spec.signals_for(int(label)):
            _plant(stages[sig.stage][j], sig)
    return FeatureHierarchy(tuple(Tensor(s) for s in stages))


def synthetic_hierarchy(seed: int, n: int, cfg: BackboneConfig, spec: SignalSpec):
    """Balanced round-robin labels plus their planted hierarchy."""
    labels = np.arange(n, dtype=np.int64) % max(spec.n_classes, 1)
    return hierarchy_for_labels(seed, labels, cfg, spec), labels
