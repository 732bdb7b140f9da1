"""Numba @njit kernel backend.

Kernels are serial (no prange): they release the GIL, so experiment-level
threads get real concurrency, and numba's threading layers are not safe when
parallel kernels are entered from several Python threads at once. Results
are bitwise reproducible.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _pad_input(x, padding):
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    xp[:, :, padding:padding + h, padding:padding + w] = x
    return xp


@njit(cache=True)
def _conv2d_forward(xp, w, stride, oh, ow):
    n = xp.shape[0]
    co, ci, kh, kw = w.shape
    out = np.empty((n, co, oh, ow), dtype=xp.dtype)
    for p in range(n * co):
        i = p // co
        o = p % co
        for r in range(oh):
            r0 = r * stride
            for q in range(ow):
                q0 = q * stride
                acc = 0.0
                for cc in range(ci):
                    for u in range(kh):
                        for v in range(kw):
                            acc += xp[i, cc, r0 + u, q0 + v] * w[o, cc, u, v]
                out[i, o, r, q] = acc
    return out


@njit(cache=True)
def _conv2d_backward_dx(w, grad, stride, n, ci, hp, wp):
    co, _, kh, kw = w.shape
    oh, ow = grad.shape[2], grad.shape[3]
    dxp = np.zeros((n, ci, hp, wp), dtype=grad.dtype)
    for i in range(n):
        for o in range(co):
            for r in range(oh):
                r0 = r * stride
                for q in range(ow):
                    q0 = q * stride
                    g = grad[i, o, r, q]
                    for cc in range(ci):
                        for u in range(kh):
                            for v in range(kw):
                                dxp[i, cc, r0 + u, q0 + v] += g * w[o, cc, u, v]
    return dxp


@njit(cache=True)
def _conv2d_backward_dw(xp, grad, stride, ci, kh, kw):
    n, co = grad.shape[0], grad.shape[1]
    oh, ow = grad.shape[2], grad.shape[3]
    dw = np.zeros((co, ci, kh, kw), dtype=grad.dtype)
    for o in range(co):
        for i in range(n):
            for r in range(oh):
                r0 = r * stride
                for q in range(ow):
                    q0 = q * stride
                    g = grad[i, o, r, q]
                    for cc in range(ci):
                        for u in range(kh):
                            for v in range(kw):
                                dw[o, cc, u, v] += g * xp[i, cc, r0 + u, q0 + v]
    return dw


@njit(cache=True)
def _maxpool2d_forward(x, kernel, stride, oh, ow):
    n, c = x.shape[0], x.shape[1]
    out = np.empty((n, c, oh, ow), dtype=x.dtype)
    argmax = np.empty((n, c, oh, ow), dtype=np.int64)
    for p in range(n * c):
        i = p // c
        cc = p % c
        for r in range(oh):
            r0 = r * stride
            for q in range(ow):
                q0 = q * stride
                best = x[i, cc, r0, q0]
                best_idx = 0
                for u in range(kernel):
                    for v in range(kernel):
                        val = x[i, cc, r0 + u, q0 + v]
                        if val > best:  # strict: first occurrence wins ties
                            best = val
                            best_idx = u * kernel + v
                out[i, cc, r, q] = best
                argmax[i, cc, r, q] = best_idx
    return out, argmax


@njit(cache=True)
def _maxpool2d_backward(argmax, grad, kernel, stride, h, w):
    n, c = grad.shape[0], grad.shape[1]
    oh, ow = grad.shape[2], grad.shape[3]
    dx = np.zeros((n, c, h, w), dtype=grad.dtype)
    for p in range(n * c):
        i = p // c
        cc = p % c
        for r in range(oh):
            for q in range(ow):
                idx = argmax[i, cc, r, q]
                dx[i, cc, r * stride + idx // kernel, q * stride + idx % kernel] += grad[i, cc, r, q]
    return dx


def conv2d_forward(x, w, stride, padding):
    xp = _pad_input(x, padding) if padding else np.ascontiguousarray(x)
    oh = (x.shape[2] + 2 * padding - w.shape[2]) // stride + 1
    ow = (x.shape[3] + 2 * padding - w.shape[3]) // stride + 1
    return _conv2d_forward(xp, np.ascontiguousarray(w), stride, oh, ow)


def conv2d_backward(x, w, grad, stride, padding):
    n, ci, h, wd = x.shape
    xp = _pad_input(x, padding) if padding else np.ascontiguousarray(x)
    grad = np.ascontiguousarray(grad)
    w = np.ascontiguousarray(w)
    dxp = _conv2d_backward_dx(w, grad, stride, n, ci, h + 2 * padding, wd + 2 * padding)
    dw = _conv2d_backward_dw(xp, grad, stride, ci, w.shape[2], w.shape[3])
    if padding:
        dxp = np.ascontiguousarray(dxp[:, :, padding:padding + h, padding:padding + wd])
    return dxp, dw


def maxpool2d_forward(x, kernel, stride):
    oh = (x.shape[2] - kernel) // stride + 1
    ow = (x.shape[3] - kernel) // stride + 1
    return _maxpool2d_forward(np.ascontiguousarray(x), kernel, stride, oh, ow)


def maxpool2d_backward(x_shape, argmax, grad, kernel, stride):
    return _maxpool2d_backward(
        argmax, np.ascontiguousarray(grad), kernel, stride, x_shape[2], x_shape[3]
    )
