"""The duo-attention encoder and full classifier.

Pipeline: feature hierarchy (from the conv backbone or given directly) ->
multi-scale tokens -> per-patch scale token -> depth-L stack of local
attention blocks over each patch's scale positions (pre-norm residual
blocks: x + MSA(LN(x)), then x + FFN(LN(x))) -> per-patch summary handoff ->
CLS token + depth-L stack of global attention layers over patches (bare
multi-head attention: no layer norm, no FFN, no residuals) -> linear
classifier on the CLS state.

Local attention treats the patch axis as extra batch dimensions, so scale
positions of different patches never attend to each other. Both attentions
share one implementation: qkv projection [D, 3D], per-head softmax(q k^T /
sqrt(d_k)) @ v with d_k = D / n_heads, head concat, output projection
[D, D]. Learnable position tables are added once, before the first layer of
each stack.

Encoder variants: ``local_only`` classifies the mean of the per-patch
summaries through a single linear layer; ``global_only`` skips the local
stack and feeds the raw per-patch scale summaries to the global stack.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from .backbone import BackboneConfig, FeatureHierarchy, backbone_forward, init_backbone
from .rng import Rng, stable_hash
from .scale_token import (
    SCALE_TOKEN_MODES,
    ConfigError,
    init_scale_token,
    make_scale_token,
    prepends_token,
)
from .tensor import (
    ShapeError,
    Tensor,
    broadcast_to,
    concat,
    gelu,
    layer_norm,
    linear,
    matmul,
    mul,
    reshape,
    softmax_lastdim,
    transpose,
)
from .tokenizer import (
    MultiScaleTokens,
    TokenizerConfig,
    assemble_multiscale_tokens,
    expected_scale_lengths,
    init_tokenizer,
)

ATTENTION_MODES = ("duo", "local_only", "global_only")


@dataclass(frozen=True)
class DuoFormerConfig:
    image_size: int = 64
    patch_count: int = 4
    scale_subset: tuple = (0, 1, 2, 3)
    embed_dim: int = 32
    n_heads: int = 4
    depth: int = 2
    ffn_hidden: int | None = None
    n_classes: int = 4
    scale_token_mode: str = "fused"
    attention_mode: str = "duo"
    stage_channels: tuple = (16, 32, 64, 128)
    blocks_per_stage: int = 1
    use_backbone: bool = True
    frozen_backbone: bool = False
    shared_learnable_token: bool = False

    def __post_init__(self):
        object.__setattr__(self, "scale_subset", tuple(sorted(set(self.scale_subset))))
        object.__setattr__(self, "stage_channels", tuple(self.stage_channels))

    @property
    def grid(self) -> int:
        return math.isqrt(self.patch_count)

    @property
    def ffn_width(self) -> int:
        return 4 * self.embed_dim if self.ffn_hidden is None else self.ffn_hidden

    def stage_size(self, i: int) -> int:
        return self.image_size // (4 * 2 ** i)

    @property
    def per_scale_lengths(self) -> tuple:
        return expected_scale_lengths(self.image_size, self.patch_count, self.scale_subset)

    @property
    def total_length(self) -> int:
        return sum(self.per_scale_lengths)

    @property
    def prepend(self) -> bool:
        return prepends_token(self.scale_token_mode)

    @property
    def local_seq_len(self) -> int:
        return self.total_length + (1 if self.prepend else 0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scale_subset"] = list(self.scale_subset)
        d["stage_channels"] = list(self.stage_channels)
        return d

    @staticmethod
    def from_dict(d: dict) -> "DuoFormerConfig":
        d = dict(d)
        if "scale_subset" in d:
            d["scale_subset"] = tuple(d["scale_subset"])
        if "stage_channels" in d:
            d["stage_channels"] = tuple(d["stage_channels"])
        return DuoFormerConfig(**d)


def config_violations(cfg: DuoFormerConfig) -> list:
    """All structural problems with a configuration; empty means valid."""
    v = []
    g = math.isqrt(cfg.patch_count) if cfg.patch_count > 0 else 0
    if cfg.patch_count < 1 or g * g != cfg.patch_count:
        v.append(f"patch_count {cfg.patch_count} is not a perfect square")
        return v
    if not cfg.scale_subset:
        v.append("scale_subset is empty")
    if any(i not in (0, 1, 2, 3) for i in cfg.scale_subset):
        v.append(f"scale_subset {cfg.scale_subset} is not within {{0,1,2,3}}")
        return v
    if cfg.image_size % 32 != 0:
        v.append(f"image_size {cfg.image_size} is not divisible by 32")
    for i in cfg.scale_subset:
        step = 4 * 2 ** i * g
        if cfg.image_size % step != 0:
            v.append(
                f"image_size {cfg.image_size} is not divisible by 4*2^{i}*sqrt(N) = {step}"
            )
    if cfg.embed_dim % cfg.n_heads != 0:
        v.append(f"embed_dim {cfg.embed_dim} is not divisible by n_heads {cfg.n_heads}")
    if cfg.scale_token_mode not in SCALE_TOKEN_MODES:
        v.append(f"unknown scale_token_mode {cfg.scale_token_mode!r}")
    if cfg.attention_mode not in ATTENTION_MODES:
        v.append(f"unknown attention_mode {cfg.attention_mode!r}")
    needs_identity_stage = (cfg.scale_token_mode == "fused") or (3 in cfg.scale_subset)
    if needs_identity_stage and cfg.image_size % 32 == 0:
        p3 = cfg.image_size // 32
        if p3 != g:
            v.append(
                f"stage-3 size {p3} must equal sqrt(N) = {g} "
                "when the fused scale token or scale 3 is used"
            )
    if cfg.scale_token_mode == "fused":
        for i in cfg.scale_subset:
            p = cfg.stage_size(i)
            if i in (0, 1) and p % (2 * g) != 0:
                v.append(f"stage {i} size {p} cannot be downsampled to the {g}x{g} grid")
            if i == 2 and p % g != 0:
                v.append(f"stage 2 size {p} cannot be pooled to the {g}x{g} grid")
    if cfg.depth < 1:
        v.append(f"depth {cfg.depth} must be >= 1")
    if cfg.n_heads < 1:
        v.append("n_heads must be >= 1")
    if cfg.n_classes < 2:
        v.append(f"n_classes {cfg.n_classes} must be >= 2")
    if cfg.ffn_width < 1:
        v.append("ffn_hidden must be >= 1")
    return v


@dataclass
class AttentionTrace:
    """Detached per-layer attention weights: local [n,N,h,T,T], global [n,h,M,M]."""

    local_weights: tuple = ()
    global_weights: tuple = ()


class PipelineError(RuntimeError):
    def __init__(self, stage: str, original: BaseException):
        super().__init__(f"{stage}: {original}")
        self.stage = stage


# --------------------------------------------------------------------------
# attention primitives
# --------------------------------------------------------------------------

def multihead_attention(x: Tensor, qkv_w: Tensor, qkv_b: Tensor,
                        out_w: Tensor, out_b: Tensor, n_heads: int):
    """Multi-head self-attention over the second-to-last axis of [*, T, D].

    Returns (output [*, T, D], weights [*, h, T, T]). All leading axes are
    independent batch axes.
    """
    d = x.shape[-1]
    if d % n_heads != 0:
        raise ShapeError(f"embed dim {d} is not divisible by n_heads {n_heads}")
    dk = d // n_heads
    t = x.shape[-2]
    lead = x.shape[:-2]

    qkv = linear(x, qkv_w, qkv_b)
    q, k, v = qkv[..., :d], qkv[..., d:2 * d], qkv[..., 2 * d:]

    def split_heads(m):
        m = reshape(m, lead + (t, n_heads, dk))
        axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
        return transpose(m, axes)  # [*, h, T, dk]

    q, k, v = split_heads(q), split_heads(k), split_heads(v)
    scores = mul(matmul(q, transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))),
                 1.0 / math.sqrt(dk))
    weights = softmax_lastdim(scores)
    ctx = matmul(weights, v)  # [*, h, T, dk]
    axes_back = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    ctx = reshape(transpose(ctx, axes_back), lead + (t, d))
    return linear(ctx, out_w, out_b), weights


def local_msa(x: Tensor, params, layer: int, n_heads: int):
    """Scale-wise attention: [n, N, T, D] with patches as batch entries."""
    p = f"local{layer}"
    return multihead_attention(
        x, params[f"{p}.qkv.w"], params[f"{p}.qkv.b"],
        params[f"{p}.out.w"], params[f"{p}.out.b"], n_heads,
    )


def local_block(x: Tensor, params, layer: int, n_heads: int):
    """Pre-norm residual block: x + MSA(LN(x)), then + FFN(LN(.))."""
    p = f"local{layer}"
    normed = layer_norm(x, params[f"{p}.ln1.gain"], params[f"{p}.ln1.bias"])
    attended, weights = local_msa(normed, params, layer, n_heads)
    x = x + attended
    normed2 = layer_norm(x, params[f"{p}.ln2.gain"], params[f"{p}.ln2.bias"])
    hidden = gelu(linear(normed2, params[f"{p}.ffn1.w"], params[f"{p}.ffn1.b"]))
    return x + linear(hidden, params[f"{p}.ffn2.w"], params[f"{p}.ffn2.b"]), weights


def global_attention_layer(z: Tensor, params, layer: int, n_heads: int):
    """Patch-wise attention without layer norm, FFN, or residuals."""
    p = f"global{layer}"
    return multihead_attention(
        z, params[f"{p}.qkv.w"], params[f"{p}.qkv.b"],
        params[f"{p}.out.w"], params[f"{p}.out.b"], n_heads,
    )


def prepend_scale_token(tokens: Tensor, x_s: Tensor, pos_table: Tensor) -> Tensor:
    """Place the scale token at index 0 and add the local position table."""
    n, npatch, length, d = tokens.shape
    if x_s.shape != (n, npatch, d):
        raise ShapeError(f"scale token {x_s.shape} does not match tokens {tokens.shape}")
    if pos_table.shape != (length + 1, d):
        raise ShapeError(
            f"position table {pos_table.shape} must be ({length + 1}, {d})"
        )
    seq = concat([reshape(x_s, (n, npatch, 1, d)), tokens], axis=2)
    return seq + pos_table


def scale_token_read_position(per_scale_lengths, prepended: bool) -> int:
    """Index of the final-stage embedding in the local sequence layout."""
    return (1 if prepended else 0) + sum(per_scale_lengths[:-1])


def extract_scale_tokens(y: Tensor, mode: str, per_scale_lengths,
                         prepended: bool) -> Tensor:
    """Per-patch [n, N, D] summary read out of the local-stack output."""
    if mode in ("fused", "learnable"):
        if not prepended:
            raise ConfigError(f"mode {mode!r} requires a prepended token")
        return y[:, :, 0, :]
    if mode == "first_token":
        return y[:, :, scale_token_read_position(per_scale_lengths, prepended), :]
    if mode == "average":
        return y[:, :, 1:, :].mean(axis=2) if prepended else y.mean(axis=2)
    raise ConfigError(f"unknown scale token mode {mode!r}")


def local_only_head(patch_summaries: Tensor, params) -> Tensor:
    """Scale-attention-only classifier: patch mean -> single linear layer."""
    return linear(patch_summaries.mean(axis=1), params["head.w"], params["head.b"])


# --------------------------------------------------------------------------
# parameter construction
# --------------------------------------------------------------------------

def _uses_local_stack(cfg) -> bool:
    return cfg.attention_mode in ("duo", "local_only")


def _uses_global_stack(cfg) -> bool:
    return cfg.attention_mode in ("duo", "global_only")


def _uses_tokenizer(cfg) -> bool:
    return _uses_local_stack(cfg) or cfg.scale_token_mode in ("average", "first_token")


def init_duoformer(cfg: DuoFormerConfig, seed: int):
    """Build all parameters and batch-norm state for the configured variant.

    Every tensor is drawn from its own sub-stream keyed by (seed, name), so
    parameters shared between variants are bitwise identical for one seed
    regardless of which other parameters exist.
    """
    violations = config_violations(cfg)
    if violations:
        raise ConfigError("; ".join(violations))
    rng = Rng(seed)
    params: dict[str, Tensor] = {}
    stats = {}
    d = cfg.embed_dim

    def tn(name, shape):
        params[name] = Tensor(rng.derive(name).truncated_normal(shape, std=0.02),
                              requires_grad=True)

    def zeros(name, shape):
        params[name] = Tensor(np.zeros(shape), requires_grad=True)

    def ones(name, shape):
        params[name] = Tensor(np.ones(shape), requires_grad=True)

    if cfg.use_backbone:
        bp, bs = init_backbone(
            BackboneConfig(cfg.image_size, cfg.stage_channels, cfg.blocks_per_stage),
            stable_hash(seed, "backbone"),
        )
        if cfg.frozen_backbone:
            for t in bp.values():
                t.requires_grad = False
        else:
            # stages above the highest included scale feed nothing downstream;
            # keeping them trainable would trip the missing-gradient guard
            for i in range(max(cfg.scale_subset) + 1, 4):
                for name, t in bp.items():
                    if name.startswith(f"backbone.s{i}."):
                        t.requires_grad = False
        params.update(bp)
        stats.update(bs)

    if _uses_tokenizer(cfg):
        params.update(init_tokenizer(
            TokenizerConfig(cfg.patch_count, d, cfg.scale_subset),
            cfg.stage_channels, stable_hash(seed, "tokenizer"),
        ))

    sp, ss = init_scale_token(
        cfg.scale_token_mode, cfg.scale_subset, cfg.stage_channels, d,
        cfg.patch_count, stable_hash(seed, "scale_token"), cfg.shared_learnable_token,
    )
    params.update(sp)
    stats.update(ss)

    if _uses_local_stack(cfg):
        tn("pos_local", (cfg.local_seq_len, d))
        for l in range(cfg.depth):
            p = f"local{l}"
            ones(f"{p}.ln1.gain", d)
            zeros(f"{p}.ln1.bias", d)
            tn(f"{p}.qkv.w", (d, 3 * d))
            zeros(f"{p}.qkv.b", 3 * d)
            tn(f"{p}.out.w", (d, d))
            zeros(f"{p}.out.b", d)
            ones(f"{p}.ln2.gain", d)
            zeros(f"{p}.ln2.bias", d)
            tn(f"{p}.ffn1.w", (d, cfg.ffn_width))
            zeros(f"{p}.ffn1.b", cfg.ffn_width)
            tn(f"{p}.ffn2.w", (cfg.ffn_width, d))
            zeros(f"{p}.ffn2.b", d)

    if _uses_global_stack(cfg):
        tn("cls.token", (1, d))
        tn("pos_global", (cfg.patch_count + 1, d))
        for l in range(cfg.depth):
            p = f"global{l}"
            tn(f"{p}.qkv.w", (d, 3 * d))
            zeros(f"{p}.qkv.b", 3 * d)
            tn(f"{p}.out.w", (d, d))
            zeros(f"{p}.out.b", d)

    tn("head.w", (d, cfg.n_classes))
    zeros("head.b", cfg.n_classes)
    return params, stats


# --------------------------------------------------------------------------
# full forward
# --------------------------------------------------------------------------

def _as_hierarchy(x, cfg, params, stats, train):
    if isinstance(x, FeatureHierarchy):
        return x
    if isinstance(x, (tuple, list)) and len(x) == 4:
        return FeatureHierarchy(tuple(s if isinstance(s, Tensor) else Tensor(s) for s in x))
    image = x if isinstance(x, Tensor) else Tensor(x)
    if not cfg.use_backbone:
        raise ConfigError(
            "model was configured without a backbone; feed a feature hierarchy"
        )
    bcfg = BackboneConfig(cfg.image_size, cfg.stage_channels, cfg.blocks_per_stage)
    return backbone_forward(image, bcfg, params, stats, train=train,
                            frozen=cfg.frozen_backbone)


def duoformer_forward(x, params, stats, cfg: DuoFormerConfig, train: bool = False,
                      collect_trace: bool = False):
    """Full classifier forward. Returns (logits [n, n_classes], AttentionTrace).

    ``x`` may be an image batch [n, 3, H, H] (array or Tensor), a
    FeatureHierarchy, or a 4-tuple of stage arrays.
    """
    def run(stage, fn):
        try:
            return fn()
        except PipelineError:
            raise
        except Exception as e:
            raise PipelineError(stage, e) from e

    hier = run("backbone", lambda: _as_hierarchy(x, cfg, params, stats, train))

    tokens = None
    if _uses_tokenizer(cfg):
        tcfg = TokenizerConfig(cfg.patch_count, cfg.embed_dim, cfg.scale_subset)
        tokens = run("tokenize", lambda: assemble_multiscale_tokens(hier, tcfg, params))

    local_trace = []
    if _uses_local_stack(cfg):
        if cfg.prepend:
            x_s = run("scale_token", lambda: make_scale_token(
                hier, tokens, params, stats, cfg.scale_token_mode,
                cfg.scale_subset, cfg.patch_count, train))
            seq = run("prepend", lambda: prepend_scale_token(tokens.tokens, x_s,
                                                             params["pos_local"]))
        else:
            seq = run("prepend", lambda: tokens.tokens + params["pos_local"])

        def run_local():
            nonlocal seq
            for l in range(cfg.depth):
                seq, w = local_block(seq, params, l, cfg.n_heads)
                if collect_trace:
                    local_trace.append(w.data.copy())
            return seq

        y = run("local_attention", run_local)
        summaries = run("extract", lambda: extract_scale_tokens(
            y, cfg.scale_token_mode, cfg.per_scale_lengths, cfg.prepend))
    else:
        summaries = run("scale_token", lambda: make_scale_token(
            hier, tokens, params, stats, cfg.scale_token_mode,
            cfg.scale_subset, cfg.patch_count, train))

    if cfg.attention_mode == "local_only":
        logits = run("classify", lambda: local_only_head(summaries, params))
        return logits, AttentionTrace(tuple(local_trace), ())

    n = summaries.shape[0]
    d = cfg.embed_dim

    def run_global():
        cls = broadcast_to(reshape(params["cls.token"], (1, 1, d)), (n, 1, d))
        z = concat([cls, summaries], axis=1) + params["pos_global"]
        traces = []
        for l in range(cfg.depth):
            z, w = global_attention_layer(z, params, l, cfg.n_heads)
            if collect_trace:
                traces.append(w.data.copy())
        return z, traces

    z, global_trace = run("global_attention", run_global)
    logits = run("classify", lambda: linear(z[:, 0, :], params["head.w"], params["head.b"]))
    return logits, AttentionTrace(tuple(local_trace), tuple(global_trace))


class DuoFormer:
    """Config + parameters + forward, with checkpoint round-tripping."""

    def __init__(self, cfg: DuoFormerConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        self.params, self.stats = init_duoformer(cfg, seed)

    def forward(self, x, train: bool = False, collect_trace: bool = False):
        return duoformer_forward(x, self.params, self.stats, self.cfg,
                                 train=train, collect_trace=collect_trace)

    def trainable(self) -> dict:
        return {k: p for k, p in self.params.items() if p.requires_grad}

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_arrays(self) -> dict:
        out = {k: p.data.copy() for k, p in self.params.items()}
        for name, rs in self.stats.items():
            out[f"{name}.running_mean"] = rs.mean.copy()
            out[f"{name}.running_var"] = rs.var.copy()
        return out

    def load_state(self, arrays: dict):
        for k, p in self.params.items():
            if k not in arrays:
                raise KeyError(f"checkpoint is missing parameter {k}")
            if arrays[k].shape != p.data.shape:
                raise ShapeError(
                    f"checkpoint parameter {k} has shape {arrays[k].shape}, expected {p.data.shape}"
                )
            p.data = np.ascontiguousarray(arrays[k], dtype=np.float64)
        for name, rs in self.stats.items():
            rs.load(arrays[f"{name}.running_mean"], arrays[f"{name}.running_var"])

    def save(self, directory):
        from .serialize import save_checkpoint

        save_checkpoint(directory, self.state_arrays(), config=self.cfg.to_dict())

    @staticmethod
    def load(directory) -> "DuoFormer":
        from .serialize import load_checkpoint, load_checkpoint_config

        config = load_checkpoint_config(directory)
        if config is None:
            raise FileNotFoundError(f"no config.json in checkpoint {directory}")
        model = DuoFormer(DuoFormerConfig.from_dict(config))
        model.load_state(load_checkpoint(directory))
        return model
