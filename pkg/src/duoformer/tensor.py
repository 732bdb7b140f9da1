"""Dense float64 tensors with eager reverse-mode differentiation.

A :class:`Tensor` wraps a contiguous row-major float64 numpy array. Every
differentiable operation records an :class:`OpNode` on its output, holding
the operation tag, the input tensors, and a backward closure over whatever
forward values the gradient needs. :func:`backward` walks the resulting DAG
once, in reverse topological order, and accumulates gradients into the
``grad`` field of the ``requires_grad`` leaves.

Tensors are immutable after creation except for gradient accumulation (the
training loop additionally owns parameter data updates between graphs).
Distinct graphs never share state and may run concurrently.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

from . import kernels

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class GraphError(RuntimeError):
    """Misuse of the operation graph (backward on non-scalars, reentry...)."""


class DegenerateBatchError(ValueError):
    """Batch statistics were requested for a batch too small to define them."""


_grad_state = threading.local()


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / data paths).

    The flag is thread-local: independent graphs running on other threads
    keep recording.
    """
    prev = grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = prev


def grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


class OpNode:
    """One recorded operation: tag, predecessor tensors, backward closure.

    The backward closure maps the output gradient to one gradient array per
    input (or None for inputs that do not need one). Saved forward values
    live in the closure.
    """

    __slots__ = ("kind", "inputs", "backward")

    def __init__(self, kind, inputs, backward):
        self.kind = kind
        self.inputs = inputs
        self.backward = backward


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None

    # -- introspection -----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _nonscalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor) or isinstance(other, np.ndarray):
            raise TypeError("tensor division is only defined by scalars")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def _nonscalar(t):
    raise GraphError(f"item() on non-scalar tensor of shape {t.data.shape}")


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def make_op(data, kind: str, inputs, backward) -> Tensor:
    """Wrap a forward result, recording the graph node when grads are live."""
    out = Tensor(data)
    inputs = tuple(inputs)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = OpNode(kind, inputs, backward)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise / structural operations
# --------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_op(data, "add", (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return make_op(data, "mul", (a, b), bwd)


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree for shapes {a.shape} and {b.shape}")
    try:
        data = a.data @ b.data
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions of {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data

    def bwd(g):
        da = _unbroadcast(g @ np.swapaxes(bd, -1, -2), a.shape)
        db = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, b.shape)
        return da, db

    return make_op(data, "matmul", (a, b), bwd)


def linear(x, weight, bias=None) -> Tensor:
    """Affine map over the last axis: x @ weight (+ bias)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(
            f"linear: input last dim {x.shape} does not match weight first dim {weight.shape}"
        )
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    data = x.data.reshape(shape)

    def bwd(g):
        return (g.reshape(old),)

    return make_op(data, "reshape", (x,), bwd)


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = np.ascontiguousarray(x.data.transpose(axes))

    def bwd(g):
        return (np.ascontiguousarray(g.transpose(inv)),)

    return make_op(data, "transpose", (x,), bwd)


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    data = np.broadcast_to(x.data, shape).copy()
    old = x.shape

    def bwd(g):
        return (_unbroadcast(g, old),)

    return make_op(data, "broadcast_to", (x,), bwd)


def concat(tensors, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty tensor list")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return make_op(data, "concat", tuple(tensors), bwd)


def getitem(x, idx) -> Tensor:
    """Basic (slice / integer) indexing. Fancy indexing is not supported."""
    x = as_tensor(x)
    data = x.data[idx]
    if isinstance(data, np.ndarray) and data.base is not None:
        data = data.copy()
    shape = x.shape

    def bwd(g):
        dx = np.zeros(shape, dtype=np.float64)
        dx[idx] += g
        return (dx,)

    return make_op(data, "getitem", (x,), bwd)


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)
    shape = x.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        gk = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gk, shape).copy(),)

    return make_op(data, "sum", (x,), bwd)


def tmean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis, keepdims), 1.0 / count)


# --------------------------------------------------------------------------
# activations and normalizers
# --------------------------------------------------------------------------

def relu(x) -> Tensor:
    x = as_tensor(x)
    data = np.maximum(x.data, 0.0)
    mask = x.data > 0.0

    def bwd(g):
        return (g * mask,)

    return make_op(data, "relu", (x,), bwd)


def gelu(x) -> Tensor:
    """Gaussian error linear unit, exact erf form."""
    x = as_tensor(x)
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    data = xd * cdf
    pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)

    def bwd(g):
        return (g * (cdf + xd * pdf),)

    return make_op(data, "gelu", (x,), bwd)


def softmax_lastdim(x) -> Tensor:
    """Softmax over the last axis, stabilized by max subtraction."""
    x = as_tensor(x)
    if x.ndim < 1 or x.shape[-1] < 1:
        raise ShapeError(f"softmax needs a non-empty last axis, got shape {x.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return make_op(y, "softmax", (x,), bwd)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize each last-axis slice to zero mean / unit population variance,
    then apply the elementwise affine (gain, bias)."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer_norm: gain {gain.shape} / bias {bias.shape} must both be ({d},) for input {x.shape}"
        )
    if not eps > 0:
        raise ValueError(f"layer_norm: eps must be positive, got {eps}")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = gain.data * xhat + bias.data
    gd = gain.data

    def bwd(g):
        reduce_axes = tuple(range(x.ndim - 1))
        dgain = (g * xhat).sum(axis=reduce_axes)
        dbias = g.sum(axis=reduce_axes)
        gg = g * gd
        m1 = gg.mean(axis=-1, keepdims=True)
        m2 = (gg * xhat).mean(axis=-1, keepdims=True)
        dx = (gg - m1 - xhat * m2) * inv
        return dx, dgain, dbias

    return make_op(data, "layer_norm", (x, gain, bias), bwd)


class RunningStats:
    """Per-channel running mean / population variance for batch norm."""

    def __init__(self, channels: int):
        self.mean = np.zeros(channels, dtype=np.float64)
        self.var = np.ones(channels, dtype=np.float64)

    def update(self, batch_mean, batch_var, momentum: float):
        self.mean = (1.0 - momentum) * self.mean + momentum * batch_mean
        self.var = (1.0 - momentum) * self.var + momentum * batch_var

    def copy(self) -> "RunningStats":
        out = RunningStats(self.mean.shape[0])
        out.mean = self.mean.copy()
        out.var = self.var.copy()
        return out

    def load(self, mean, var):
        self.mean = np.asarray(mean, dtype=np.float64).copy()
        self.var = np.asarray(var, dtype=np.float64).copy()


def batch_norm(x, gain, bias, running: RunningStats, mode: str,
               momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Batch normalization over axis 0 of a [batch, channels] tensor.

    Train mode normalizes with batch statistics (population variance) and
    updates the running stats in place: r <- (1 - momentum)*r + momentum*b.
    Eval mode applies the running statistics as a fixed affine. A train-mode
    batch of size 1 is rejected: its variance carries no information and
    silently emitting zeros hides misconfiguration.
    """
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.ndim != 2:
        raise ShapeError(f"batch_norm expects [batch, channels], got shape {x.shape}")
    c = x.shape[1]
    if gain.shape != (c,) or bias.shape != (c,) or running.mean.shape != (c,):
        raise ShapeError(
            f"batch_norm: gain {gain.shape} / bias {bias.shape} / stats ({running.mean.shape[0]},)"
            f" must all match channels ({c},)"
        )
    if mode not in ("train", "eval"):
        raise ValueError(f"batch_norm mode must be 'train' or 'eval', got {mode!r}")
    gd = gain.data

    if mode == "eval":
        inv = 1.0 / np.sqrt(running.var + eps)
        xhat = (x.data - running.mean) * inv
        data = gd * xhat + bias.data

        def bwd_eval(g):
            return g * gd * inv, (g * xhat).sum(axis=0), g.sum(axis=0)

        return make_op(data, "batch_norm_eval", (x, gain, bias), bwd_eval)

    n = x.shape[0]
    if n < 2:
        raise DegenerateBatchError(
            f"batch_norm train mode needs batch size >= 2, got {n}"
        )
    mu = x.data.mean(axis=0)
    var = x.data.var(axis=0)
    running.update(mu, var, momentum)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = gd * xhat + bias.data

    def bwd(g):
        dgain = (g * xhat).sum(axis=0)
        dbias = g.sum(axis=0)
        gg = g * gd
        m1 = gg.mean(axis=0)
        m2 = (gg * xhat).mean(axis=0)
        dx = (gg - m1 - xhat * m2) * inv
        return dx, dgain, dbias

    return make_op(data, "batch_norm", (x, gain, bias), bwd)


# --------------------------------------------------------------------------
# spatial operations (kernel-backed)
# --------------------------------------------------------------------------

def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of [n,c,h,w] with [c_out,c,kh,kw] weights."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input/weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"conv2d: input channels of {x.shape} do not match weight channels of {weight.shape}"
        )
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"conv2d: padding must be >= 0, got {padding}")
    kh, kw = weight.shape[2], weight.shape[3]
    if kh > x.shape[2] + 2 * padding or kw > x.shape[3] + 2 * padding:
        raise ShapeError(
            f"conv2d: kernel ({kh}x{kw}) larger than padded input "
            f"({x.shape[2] + 2 * padding}x{x.shape[3] + 2 * padding})"
        )
    data = kernels.conv2d_forward(x.data, weight.data, stride, padding)
    xd, wd = x.data, weight.data

    def bwd(g):
        dx, dw = kernels.conv2d_backward(xd, wd, g, stride, padding)
        return dx, dw

    out = make_op(data, "conv2d", (x, weight), bwd)
    if bias is None:
        return out
    bias = as_tensor(bias)
    if bias.shape != (weight.shape[0],):
        raise ShapeError(
            f"conv2d: bias {bias.shape} must be ({weight.shape[0]},)"
        )
    return add(out, reshape(bias, (1, weight.shape[0], 1, 1)))


def maxpool2d(x, kernel: int, stride: int | None = None) -> Tensor:
    """Per-window maximum; gradient routes to the first (row-major) argmax."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects [n,c,h,w], got shape {x.shape}")
    stride = kernel if stride is None else stride
    if kernel < 1 or stride < 1:
        raise ValueError(f"maxpool2d: kernel/stride must be >= 1, got {kernel}/{stride}")
    if kernel > x.shape[2] or kernel > x.shape[3]:
        raise ShapeError(
            f"maxpool2d: kernel {kernel} larger than input spatial size "
            f"{x.shape[2]}x{x.shape[3]}"
        )
    data, argmax = kernels.maxpool2d_forward(x.data, kernel, stride)
    shape = x.shape

    def bwd(g):
        return (kernels.maxpool2d_backward(shape, argmax, g, kernel, stride),)

    return make_op(data, "maxpool2d", (x,), bwd)


# --------------------------------------------------------------------------
# reverse-mode traversal
# --------------------------------------------------------------------------

def _topo_order(root: Tensor):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in visited:
            continue
        visited.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for inp in t.node.inputs:
                if id(inp) not in visited:
                    stack.append((inp, False))
    return order


def backward(loss: Tensor, accumulate: bool = True):
    """Populate ``grad`` on every requires_grad leaf reachable from ``loss``.

    Gradients add into existing ``grad`` buffers. With ``accumulate=False``
    a leaf that already holds a gradient raises instead, which catches a
    second backward pass issued without resetting gradients.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise GraphError(
            f"backward requires a scalar loss, got shape {getattr(loss, 'shape', None)}"
        )
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(_topo_order(loss)):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            if t.requires_grad:
                if t.grad is not None and not accumulate:
                    raise GraphError(
                        "backward called twice without a grad reset while accumulation is disabled"
                    )
                t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        input_grads = t.node.backward(g)
        for inp, ig in zip(t.node.inputs, input_grads):
            if ig is None or not inp.requires_grad:
                continue
            prev = grads.get(id(inp))
            grads[id(inp)] = ig if prev is None else prev + ig
