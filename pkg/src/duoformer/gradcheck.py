"""Finite-difference gradient oracle.

Central differences are the package-wide independent check for every
analytic gradient: (f(x + h*e_i) - f(x - h*e_i)) / (2h) per element. The
oracle only ever calls the forward function, so it stays independent of the
backward implementation it verifies.
"""

from __future__ import annotations

import numpy as np

from .rng import Rng
from .tensor import Tensor, backward, no_grad


def _scalar(v) -> float:
    return v.item() if isinstance(v, Tensor) else float(v)


def finite_diff_grad(f, x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar-valued ``f`` at ``x``.

    ``f`` receives a Tensor and must return a scalar Tensor (or float); it
    must be deterministic. Returns an array shaped like ``x``.
    """
    if not h > 0:
        raise ValueError(f"finite_diff_grad: h must be positive, got {h}")
    base = x.data
    out = np.empty(base.size, dtype=np.float64)
    flat = base.reshape(-1)
    with no_grad():
        for i in range(base.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = _scalar(f(Tensor(base)))
            flat[i] = orig - h
            fm = _scalar(f(Tensor(base)))
            flat[i] = orig
            out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(base.shape)


def finite_diff_grad_sampled(f, value: np.ndarray, indices, h: float = 1e-5) -> np.ndarray:
    """Central differences at selected flat indices of an in-place buffer.

    ``f`` takes no arguments and reads ``value`` (which is temporarily
    perturbed); used for whole-model checks where re-wiring inputs per
    element would dominate the cost.
    """
    flat = value.reshape(-1)
    out = np.empty(len(indices), dtype=np.float64)
    with no_grad():
        for k, i in enumerate(indices):
            orig = flat[i]
            flat[i] = orig + h
            fp = _scalar(f())
            flat[i] = orig - h
            fm = _scalar(f())
            flat[i] = orig
            out[k] = (fp - fm) / (2.0 * h)
    return out


def check_gradients(f, params: dict, h: float = 1e-5, rtol: float = 1e-5,
                    atol: float = 1e-8, max_per_param: int | None = None,
                    seed: int = 0) -> dict:
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` builds a fresh scalar loss from the tensors in ``params`` on every
    call. With ``max_per_param`` set, a seeded sample of that many elements
    per parameter is checked instead of every element. Returns per-parameter
    worst absolute/relative discrepancies; raises AssertionError on failure.
    """
    for p in params.values():
        p.grad = None
    loss = f()
    backward(loss)

    report = {}
    rng = Rng(seed)
    for name, p in params.items():
        if not p.requires_grad:
            continue
        if p.grad is None:
            raise AssertionError(f"parameter {name} received no gradient")
        n = p.data.size
        if max_per_param is not None and n > max_per_param:
            idx = np.sort(rng.derive(name).permutation(n)[:max_per_param])
        else:
            idx = np.arange(n)
        analytic = p.grad.reshape(-1)[idx]
        numeric = finite_diff_grad_sampled(f, p.data, idx, h)
        err = np.abs(analytic - numeric)
        bound = atol + rtol * np.abs(numeric)
        worst_rel = float((err / np.maximum(np.abs(numeric), atol / rtol)).max()) if n else 0.0
        report[name] = {
            "checked": int(len(idx)),
            "max_abs_err": float(err.max()) if len(idx) else 0.0,
            "max_rel_err": worst_rel,
        }
        if np.any(err > bound):
            bad = int(np.argmax(err - bound))
            raise AssertionError(
                f"gradient mismatch for {name}[flat {idx[bad]}]: "
                f"analytic {analytic[bad]:.12g}, finite-diff {numeric[bad]:.12g}"
            )
    return report
