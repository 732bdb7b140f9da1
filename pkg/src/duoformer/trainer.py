"""Training protocol: cross-entropy, Adam, a one-cycle schedule, early
stopping on validation balanced accuracy, and evaluation metrics.

Adam runs with betas (0.9, 0.999) and no weight decay. The learning rate
follows a continuous two-phase cosine: warmup from peak/div_factor up to the
peak over pct_start of the run, then annealing down to
peak/final_div_factor. Model selection keeps the parameter snapshot with the
best validation balanced accuracy and stops after ``patience`` epochs
without improvement.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .rng import Rng
from .tensor import Tensor, backward, make_op, no_grad


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class OneCycleConfig:
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    max_epochs: int = 50
    peak_lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.0
    patience: int = 20
    seed: int = 0
    onecycle: OneCycleConfig = field(default_factory=OneCycleConfig)

    def __post_init__(self):
        if self.peak_lr <= 0:
            raise ValueError(f"peak_lr must be positive, got {self.peak_lr}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.weight_decay != 0.0:
            raise ValueError("this protocol trains without weight decay")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        if isinstance(d.get("onecycle"), dict):
            d["onecycle"] = OneCycleConfig(**d["onecycle"])
        return TrainConfig(**d)


# --------------------------------------------------------------------------
# loss and metrics
# --------------------------------------------------------------------------

def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax of the true class, stabilized by log-sum-exp."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    data = float((lse - z[np.arange(n), labels]).mean())
    probs = np.exp(z - lse[:, None])

    def bwd(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return (d * (float(g) / n),)

    return make_op(data, "cross_entropy", (logits,), bwd)


def confusion_matrix(labels, preds, n_classes: int) -> np.ndarray:
    """Counts [true, predicted]."""
    labels = np.asarray(labels, dtype=np.int64)
    preds = np.asarray(preds, dtype=np.int64)
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def balanced_accuracy(confusion: np.ndarray) -> float:
    """Mean of per-class recalls; classes with zero support are an error."""
    confusion = np.asarray(confusion)
    support = confusion.sum(axis=1)
    if np.any(support == 0):
        missing = np.flatnonzero(support == 0).tolist()
        raise ValueError(f"balanced accuracy undefined: classes {missing} have no support")
    recalls = np.diag(confusion) / support
    return float(recalls.mean())


@dataclass
class EvalReport:
    per_class_recall: np.ndarray
    balanced_accuracy: float
    confusion: np.ndarray
    loss: float

    def to_dict(self) -> dict:
        return {
            "per_class_recall": [float(r) for r in self.per_class_recall],
            "balanced_accuracy": float(self.balanced_accuracy),
            "confusion": self.confusion.tolist(),
            "loss": float(self.loss),
        }


def evaluate(forward, inputs, labels, n_classes: int, batch_size: int = 64) -> EvalReport:
    """Run ``forward`` over batches without recording graphs and score it."""
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.shape[0]
    preds = np.empty(n, dtype=np.int64)
    total_loss = 0.0
    with no_grad():
        for start in range(0, n, batch_size):
            sl = slice(start, min(start + batch_size, n))
            logits = forward(_take(inputs, sl))
            loss = cross_entropy(logits, labels[sl])
            total_loss += loss.item() * (sl.stop - sl.start)
            preds[sl] = logits.data.argmax(axis=1)
    cm = confusion_matrix(labels, preds, n_classes)
    return EvalReport(
        per_class_recall=np.diag(cm) / cm.sum(axis=1),
        balanced_accuracy=balanced_accuracy(cm),
        confusion=cm,
        loss=total_loss / max(n, 1),
    )


def _take(inputs, index):
    if isinstance(inputs, (tuple, list)):
        return tuple(s[index] for s in inputs)
    return inputs[index]


# --------------------------------------------------------------------------
# optimizer and schedule
# --------------------------------------------------------------------------

class AdamState:
    """Bias-corrected Adam moments, keyed like the parameter dict."""

    def __init__(self, params: dict, betas=(0.9, 0.999), eps: float = 1e-8):
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.step = 0
        self.beta1, self.beta2 = betas
        self.eps = eps


def adam_step(state: AdamState, params: dict, lr: float) -> AdamState:
    """One Adam update, in place. Every parameter must carry a gradient."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = p.grad
        if g is None:
            raise RuntimeError(f"adam_step: parameter {name} has no gradient")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


def onecycle_lr(step, total_steps: int, cfg: TrainConfig) -> float:
    """Learning rate at ``step`` of a ``total_steps`` run.

    Cosine warmup from peak/div_factor reaching exactly peak_lr at
    pct_start * total_steps, then cosine annealing toward
    peak/final_div_factor at total_steps. Continuous and accepts fractional
    steps.
    """
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    oc = cfg.onecycle
    peak = cfg.peak_lr
    low = peak / oc.div_factor
    final = peak / oc.final_div_factor
    warm = oc.pct_start * total_steps
    if step <= warm and warm > 0:
        w = 0.5 * (1.0 - math.cos(math.pi * (step / warm)))
        return low * (1.0 - w) + peak * w
    denom = total_steps - warm
    w = 0.5 * (1.0 - math.cos(math.pi * ((step - warm) / denom)))
    return peak * (1.0 - w) + final * w


# --------------------------------------------------------------------------
# augmentation
# --------------------------------------------------------------------------

AUGMENT_FLAGS = ("hflip", "vflip", "rot90", "random_crop", "center_crop")


@dataclass(frozen=True)
class AugmentConfig:
    flags: tuple = ()
    out_size: int | None = None
    mean: tuple = (0.485, 0.456, 0.406)
    std: tuple = (0.229, 0.224, 0.225)
    normalize: bool = True

    def __post_init__(self):
        bad = [f for f in self.flags if f not in AUGMENT_FLAGS]
        if bad:
            raise ValueError(f"unknown augment flags {bad}; valid: {AUGMENT_FLAGS}")


def hflip(images: np.ndarray) -> np.ndarray:
    return images[..., ::-1]


def vflip(images: np.ndarray) -> np.ndarray:
    return images[..., ::-1, :]


def rot90(images: np.ndarray, quarters: int) -> np.ndarray:
    return np.rot90(images, k=quarters % 4, axes=(-2, -1))


def crop(images: np.ndarray, row: int, col: int, size: int) -> np.ndarray:
    if size > images.shape[-2] or size > images.shape[-1]:
        raise ValueError(f"crop size {size} larger than image {images.shape[-2:]}")
    return images[..., row:row + size, col:col + size]


def center_crop(images: np.ndarray, size: int) -> np.ndarray:
    return crop(images, (images.shape[-2] - size) // 2, (images.shape[-1] - size) // 2, size)


def normalize(images: np.ndarray, mean, std) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float64).reshape(1, -1, 1, 1)
    std = np.asarray(std, dtype=np.float64).reshape(1, -1, 1, 1)
    return (images - mean) / std


def random_crop_offsets(rng: Rng, n: int, max_row: int, max_col: int):
    """The seeded offset stream used by augment's random crops."""
    return rng.integers(0, max_row + 1, n), rng.integers(0, max_col + 1, n)


def augment(images: np.ndarray, rng: Rng, cfg: AugmentConfig) -> np.ndarray:
    """Seeded per-sample flips / quarter-turns / crops, then normalization.

    Flips and rot90 are exact pixel permutations (each applied to a random
    half / quarter of the batch); crops emit ``out_size`` with random offsets
    for random_crop and centered offsets otherwise. Normalization comes last.
    """
    out = np.ascontiguousarray(images, dtype=np.float64).copy()
    n = out.shape[0]
    flags = set(cfg.flags)
    if "hflip" in flags:
        take = rng.choice_bool(n)
        out[take] = hflip(out[take])
    if "vflip" in flags:
        take = rng.choice_bool(n)
        out[take] = vflip(out[take])
    if "rot90" in flags:
        quarters = rng.integers(0, 4, n)
        for k in (1, 2, 3):
            sel = quarters == k
            if np.any(sel):
                out[sel] = rot90(out[sel], k)
    size = cfg.out_size or out.shape[2]
    if size > out.shape[2] or size > out.shape[3]:
        raise ValueError(f"crop size {size} larger than image {out.shape[2:]}")
    if "random_crop" in flags:
        rows, cols = random_crop_offsets(rng, n, out.shape[2] - size, out.shape[3] - size)
        out = np.stack([crop(out[i], rows[i], cols[i], size) for i in range(n)])
    elif "center_crop" in flags or cfg.out_size is not None:
        out = center_crop(out, size).copy()
    if cfg.normalize:
        out = normalize(out, cfg.mean, cfg.std)
    return np.ascontiguousarray(out)


def eval_transform(images: np.ndarray, cfg: AugmentConfig) -> np.ndarray:
    """Inference-side counterpart of augment: center crop + normalization only."""
    out = np.ascontiguousarray(images, dtype=np.float64)
    if cfg.out_size is not None:
        out = center_crop(out, cfg.out_size)
    if cfg.normalize:
        out = normalize(out, cfg.mean, cfg.std)
    return np.ascontiguousarray(out)


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_balanced_acc: float
    lr: float


@dataclass
class TrainResult:
    best_state: dict
    best_score: float
    best_epoch: int
    history: list


def train_loop(model, data, cfg: TrainConfig, augment_cfg: AugmentConfig | None = None,
               log=None) -> TrainResult:
    """Seeded mini-batch training with scheduled Adam and early stopping.

    ``model`` provides forward / trainable / state_arrays / load_state (see
    DuoFormer); ``data`` provides train/val inputs and labels. The best
    validation snapshot is kept and returned; training stops after
    ``patience`` epochs without a balanced-accuracy improvement.
    """
    rng = Rng(cfg.seed)
    n_train = len(data.train_labels)
    if n_train == 0 or len(data.val_labels) == 0:
        raise ValueError("training requires nonempty train and validation splits")
    n_classes = model.cfg.n_classes
    trainable = model.trainable()
    adam = AdamState(trainable, betas=cfg.betas)
    steps_per_epoch = math.ceil(n_train / cfg.batch_size)
    total_steps = cfg.max_epochs * steps_per_epoch

    if augment_cfg is not None and not isinstance(data.val_inputs, tuple):
        val_inputs = eval_transform(data.val_inputs, augment_cfg)
    else:
        val_inputs = data.val_inputs

    best_state = model.state_arrays()
    best_score = -math.inf
    best_epoch = 0
    since_improved = 0
    history: list[EpochRecord] = []
    step = 0
    lr = 0.0

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.derive("epoch", epoch).permutation(n_train)
        aug_rng = rng.derive("augment", epoch)
        epoch_loss = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            batch_x = _take(data.train_inputs, idx)
            if augment_cfg is not None and not isinstance(batch_x, tuple):
                batch_x = augment(batch_x, aug_rng, augment_cfg)
            labels = data.train_labels[idx]
            lr = onecycle_lr(step, total_steps, cfg)
            logits, _ = model.forward(batch_x, train=True)
            loss = cross_entropy(logits, labels)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} step {step} (lr={lr:.3g})"
                )
            for p in trainable.values():
                p.grad = None
            backward(loss, accumulate=False)
            adam_step(adam, trainable, lr)
            epoch_loss += loss.item() * len(idx)
            step += 1

        val = evaluate(lambda xb: model.forward(xb, train=False)[0],
                       val_inputs, data.val_labels, n_classes,
                       batch_size=cfg.batch_size)
        rec = EpochRecord(epoch, epoch_loss / n_train, val.loss,
                          val.balanced_accuracy, lr)
        history.append(rec)
        if log is not None:
            log(rec)

        if val.balanced_accuracy > best_score:
            best_score = val.balanced_accuracy
            best_state = model.state_arrays()
            best_epoch = epoch
            since_improved = 0
        else:
            since_improved += 1
            if since_improved >= cfg.patience:
                break

    model.load_state(best_state)
    return TrainResult(best_state=best_state, best_score=best_score,
                       best_epoch=best_epoch, history=history)


HISTORY_FIELDS = ("epoch", "train_loss", "val_loss", "val_balanced_acc", "lr")


def write_history_csv(path, history):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_FIELDS)
        for rec in history:
            writer.writerow([
                rec.epoch,
                f"{rec.train_loss:.12g}",
                f"{rec.val_loss:.12g}",
                f"{rec.val_balanced_acc:.12g}",
                f"{rec.lr:.12g}",
            ])
