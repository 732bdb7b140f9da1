"""Hierarchical duo-attention classifier over CNN feature pyramids.

Multi-scale patch tokenization of a four-stage feature hierarchy, a fused
per-patch scale token, local (scale-wise) plus global (patch-wise) attention
stacks, a training protocol, and an ablation-grid harness; built on a small
float64 autodiff core with finite-difference gradient oracles.
"""

from .backbone import (
    BackboneConfig,
    FeatureHierarchy,
    Signal,
    SignalSpec,
    backbone_forward,
    init_backbone,
    synthetic_hierarchy,
)
from .gradcheck import check_gradients, finite_diff_grad
from .model import (
    AttentionTrace,
    DuoFormer,
    DuoFormerConfig,
    config_violations,
    duoformer_forward,
)
from .rng import Rng, stable_hash
from .scale_token import ConfigError, make_scale_token
from .tensor import (
    DegenerateBatchError,
    GraphError,
    RunningStats,
    ShapeError,
    Tensor,
    backward,
    no_grad,
)
from .tokenizer import MultiScaleTokens, TokenizerConfig, assemble_multiscale_tokens
from .trainer import (
    AugmentConfig,
    EvalReport,
    TrainConfig,
    adam_step,
    balanced_accuracy,
    cross_entropy,
    onecycle_lr,
    train_loop,
)

__version__ = "0.1.0"
