"""Pure-numpy kernel backend (im2col / col2im style)."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _pad(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _windows(xp, kh, kw, stride):
    # [n, c, oh, ow, kh, kw], a read-only view
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def conv2d_forward(x, w, stride, padding):
    kh, kw = w.shape[2], w.shape[3]
    win = _windows(_pad(x, padding), kh, kw, stride)
    out = np.tensordot(win, w, axes=[(1, 4, 5), (1, 2, 3)])  # [n, oh, ow, co]
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_backward(x, w, grad, stride, padding):
    n, c, h, wd = x.shape
    co, _, kh, kw = w.shape
    oh, ow = grad.shape[2], grad.shape[3]

    win = _windows(_pad(x, padding), kh, kw, stride)
    # dw[o,c,u,v] = sum_{n,r,q} grad[n,o,r,q] * win[n,c,r,q,u,v]
    dw = np.tensordot(grad, win, axes=[(0, 2, 3), (0, 2, 3)])

    # dx: full correlation of the stride-upsampled grad with flipped weights
    # (transposed convolution), embedded into the padded-input frame.
    gu_h = (oh - 1) * stride + 1
    gu_w = (ow - 1) * stride + 1
    gu = np.zeros((n, co, gu_h + 2 * (kh - 1), gu_w + 2 * (kw - 1)), dtype=grad.dtype)
    gu[:, :, kh - 1:kh - 1 + gu_h:stride, kw - 1:kw - 1 + gu_w:stride] = grad
    win_g = sliding_window_view(gu, (kh, kw), axis=(2, 3))
    core = np.tensordot(win_g, w[:, :, ::-1, ::-1], axes=[(1, 4, 5), (0, 2, 3)])
    dxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=grad.dtype)
    dxp[:, :, :gu_h + kh - 1, :gu_w + kw - 1] = core.transpose(0, 3, 1, 2)
    dx = dxp[:, :, padding:padding + h, padding:padding + wd]
    return np.ascontiguousarray(dx), dw


def maxpool2d_forward(x, kernel, stride):
    n, c, h, w = x.shape
    win = _windows(x, kernel, kernel, stride)
    oh, ow = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, oh, ow, kernel * kernel)
    argmax = flat.argmax(axis=-1)  # first max in row-major window order
    out = np.take_along_axis(flat, argmax[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), argmax.astype(np.int64)


def maxpool2d_backward(x_shape, argmax, grad, kernel, stride):
    n, c, _, _ = x_shape
    oh, ow = grad.shape[2], grad.shape[3]
    dx = np.zeros(x_shape, dtype=grad.dtype)
    rows = (argmax // kernel) + stride * np.arange(oh)[None, None, :, None]
    cols = (argmax % kernel) + stride * np.arange(ow)[None, None, None, :]
    ni = np.arange(n)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    np.add.at(dx, (ni, ci, rows, cols), grad)
    return dx
