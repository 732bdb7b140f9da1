"""Forward-value oracles for the tensor operation set.

Expected values come from independent computations: naive loops, hand
arithmetic, or extended-precision evaluation with mpmath.
"""

import mpmath
import numpy as np
import pytest

from duoformer.gradcheck import finite_diff_grad
from duoformer.rng import Rng
from duoformer.tensor import (
    DegenerateBatchError,
    RunningStats,
    ShapeError,
    Tensor,
    backward,
    batch_norm,
    conv2d,
    gelu,
    layer_norm,
    linear,
    matmul,
    maxpool2d,
    relu,
    softmax_lastdim,
)


# --------------------------------------------------------------------------
# matmul
# --------------------------------------------------------------------------

def test_matmul_identity_cases():
    eye = Tensor(np.eye(2))
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(matmul(eye, a).data, a.data)
    np.testing.assert_array_equal(matmul(a, eye).data, a.data)
    col = Tensor([[0.0], [5.0]])
    np.testing.assert_array_equal(matmul(eye, col).data, col.data)


def test_matmul_matches_triple_loop():
    rng = Rng(100)
    a = rng.normal((3, 4))
    b = rng.normal((4, 2))
    expected = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                expected[i, j] += a[i, k] * b[k, j]
    # BLAS may fuse multiply-adds, so agreement is to rounding, not bitwise
    np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, expected,
                               rtol=0, atol=1e-15)


def test_matmul_batched_broadcast():
    rng = Rng(101)
    a = rng.normal((2, 3, 4, 5))
    b = rng.normal((5, 6))
    out = matmul(Tensor(a), Tensor(b))
    assert out.shape == (2, 3, 4, 6)
    np.testing.assert_allclose(out.data, a @ b, rtol=0, atol=0)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))


# --------------------------------------------------------------------------
# softmax
# --------------------------------------------------------------------------

def test_softmax_symmetry():
    np.testing.assert_array_equal(softmax_lastdim(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_softmax_shift_stability():
    out = softmax_lastdim(Tensor([1000.0, 1000.0, 1000.0])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_softmax_matches_extended_precision():
    x = [1.0, 2.0, 3.0]
    with mpmath.workdps(50):
        exps = [mpmath.e ** xi for xi in x]
        total = sum(exps)
        expected = np.array([float(e / total) for e in exps])
    np.testing.assert_allclose(softmax_lastdim(Tensor(x)).data, expected,
                               rtol=0, atol=1e-15)


def test_softmax_rows_sum_to_one_and_shift_invariant():
    rng = Rng(7)
    x = rng.normal((5, 4, 9), std=3.0)
    y = softmax_lastdim(Tensor(x)).data
    np.testing.assert_allclose(y.sum(axis=-1), np.ones((5, 4)), rtol=0, atol=1e-12)
    y_shift = softmax_lastdim(Tensor(x + 123.456)).data
    np.testing.assert_allclose(y, y_shift, rtol=0, atol=1e-12)


# --------------------------------------------------------------------------
# layer norm
# --------------------------------------------------------------------------

def test_layer_norm_constant_slice_maps_to_zero():
    x = Tensor(np.full((3, 5), 7.0))
    out = layer_norm(x, Tensor(np.ones(5)), Tensor(np.zeros(5)), eps=1e-5)
    np.testing.assert_array_equal(out.data, np.zeros((3, 5)))


def test_layer_norm_two_point_standardization():
    out = layer_norm(Tensor([1.0, 3.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                     eps=1e-14)
    np.testing.assert_allclose(out.data, [-1.0, 1.0], rtol=0, atol=1e-7)


def test_layer_norm_output_moments():
    rng = Rng(8)
    x = rng.normal((6, 32), std=4.0)
    out = layer_norm(Tensor(x), Tensor(np.ones(32)), Tensor(np.zeros(32)),
                     eps=1e-12).data
    np.testing.assert_allclose(out.mean(axis=-1), np.zeros(6), rtol=0, atol=1e-9)
    np.testing.assert_allclose(out.var(axis=-1), np.ones(6), rtol=1e-9, atol=1e-9)


def test_layer_norm_shape_error():
    with pytest.raises(ShapeError):
        layer_norm(Tensor(np.zeros((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(3)))


# --------------------------------------------------------------------------
# batch norm
# --------------------------------------------------------------------------

def test_batch_norm_eval_identity():
    rs = RunningStats(3)  # mean 0, var 1
    x = Rng(5).normal((4, 3))
    out = batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), rs,
                     "eval", eps=1e-12)
    np.testing.assert_allclose(out.data, x, rtol=0, atol=1e-10)


def test_batch_norm_train_two_point():
    rs = RunningStats(1)
    out = batch_norm(Tensor([[0.0], [2.0]]), Tensor(np.ones(1)), Tensor(np.zeros(1)),
                     rs, "train", eps=1e-14)
    np.testing.assert_allclose(out.data, [[-1.0], [1.0]], rtol=0, atol=1e-7)


def test_batch_norm_running_stats_one_step_recurrence():
    rng = Rng(6)
    x = rng.normal((5, 3), std=2.0)
    momentum = 0.1
    # hand-stepped recurrence oracle
    expected_mean = (1 - momentum) * np.zeros(3) + momentum * x.mean(axis=0)
    expected_var = (1 - momentum) * np.ones(3) + momentum * x.var(axis=0)
    rs = RunningStats(3)
    batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), rs, "train",
               momentum=momentum)
    np.testing.assert_allclose(rs.mean, expected_mean, rtol=0, atol=1e-15)
    np.testing.assert_allclose(rs.var, expected_var, rtol=0, atol=1e-15)


def test_batch_norm_rejects_batch_of_one_in_train_mode():
    with pytest.raises(DegenerateBatchError):
        batch_norm(Tensor([[1.0, 2.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                   RunningStats(2), "train")


# --------------------------------------------------------------------------
# conv / pool
# --------------------------------------------------------------------------

def _conv_loop_oracle(x, w, stride, pad):
    n, c, h, wd = x.shape
    co, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, co, oh, ow))
    for i in range(n):
        for o in range(co):
            for r in range(oh):
                for q in range(ow):
                    for cc in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                out[i, o, r, q] += (
                                    xp[i, cc, r * stride + u, q * stride + v] * w[o, cc, u, v]
                                )
    return out


def test_conv2d_one_by_one_identity():
    x = Rng(9).normal((1, 1, 4, 4))
    w = Tensor(np.ones((1, 1, 1, 1)))
    out = conv2d(Tensor(x), w)
    np.testing.assert_allclose(out.data, x, rtol=0, atol=0)


def test_conv2d_sum_pooling_case():
    x = Tensor([[[[1.0, 2.0], [3.0, 4.0]]]])
    w = Tensor(np.ones((1, 1, 2, 2)))
    out = conv2d(x, w, stride=2)
    np.testing.assert_array_equal(out.data, [[[[10.0]]]])


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (3, 0)])
def test_conv2d_matches_loop_oracle(stride, pad):
    rng = Rng(stride * 7 + pad)
    x = rng.normal((2, 3, 7, 7))
    w = rng.normal((4, 3, 3, 3))
    got = conv2d(Tensor(x), Tensor(w), stride=stride, padding=pad).data
    np.testing.assert_allclose(got, _conv_loop_oracle(x, w, stride, pad),
                               rtol=0, atol=1e-12)


def test_conv2d_kernel_too_large():
    with pytest.raises(ShapeError, match="larger than padded input"):
        conv2d(Tensor(np.zeros((1, 1, 3, 3))), Tensor(np.zeros((1, 1, 5, 5))))


def test_conv2d_channel_mismatch():
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


def test_maxpool_basic_and_constant():
    out = maxpool2d(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]]), 2)
    np.testing.assert_array_equal(out.data, [[[[4.0]]]])
    const = maxpool2d(Tensor(np.full((1, 2, 4, 4), 3.5)), 2).data
    np.testing.assert_array_equal(const, np.full((1, 2, 2, 2), 3.5))


def test_maxpool_gradient_hits_argmax_only():
    rng = Rng(12)
    xv = rng.normal((1, 1, 4, 4))
    x = Tensor(xv, requires_grad=True)
    backward(maxpool2d(x, 2).sum())
    # exactly one 1 per window, at the window maximum
    for wr in range(2):
        for wc in range(2):
            window = xv[0, 0, 2 * wr:2 * wr + 2, 2 * wc:2 * wc + 2]
            gw = x.grad[0, 0, 2 * wr:2 * wr + 2, 2 * wc:2 * wc + 2]
            assert gw.sum() == 1.0
            assert gw.reshape(-1)[window.reshape(-1).argmax()] == 1.0
    numeric = finite_diff_grad(lambda t: maxpool2d(t, 2).sum(), Tensor(xv))
    np.testing.assert_allclose(x.grad, numeric, rtol=0, atol=1e-9)


def test_maxpool_kernel_too_large():
    with pytest.raises(ShapeError):
        maxpool2d(Tensor(np.zeros((1, 1, 2, 2))), 3)


# --------------------------------------------------------------------------
# activations / linear
# --------------------------------------------------------------------------

def test_relu_values():
    out = relu(Tensor([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])


def test_gelu_anchors():
    assert gelu(Tensor([0.0])).data[0] == 0.0
    # large positive ~ identity, large negative ~ 0
    np.testing.assert_allclose(gelu(Tensor([10.0])).data, [10.0], rtol=1e-12)
    np.testing.assert_allclose(gelu(Tensor([-10.0])).data, [0.0], atol=1e-12)


def test_linear_identity_and_shape_error():
    x = Rng(13).normal((3, 4))
    out = linear(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.data, x)
    with pytest.raises(ShapeError):
        linear(Tensor(np.zeros((3, 4))), Tensor(np.zeros((5, 2))))


# --------------------------------------------------------------------------
# finite differences
# --------------------------------------------------------------------------

def test_finite_diff_sum_of_squares():
    grad = finite_diff_grad(lambda t: (t * t).sum(), Tensor([1.0, 2.0]), h=1e-5)
    np.testing.assert_allclose(grad, [2.0, 4.0], rtol=0, atol=1e-8)


def test_finite_diff_exact_for_linear_function():
    w = np.array([3.0, -1.5, 0.25])
    for h in (1e-3, 1e-5, 1e-7):
        grad = finite_diff_grad(lambda t: (t * w).sum(), Tensor([0.5, 1.5, -2.0]), h=h)
        np.testing.assert_allclose(grad, w, rtol=0, atol=1e-6)


def test_finite_diff_rejects_nonpositive_h():
    with pytest.raises(ValueError):
        finite_diff_grad(lambda t: t.sum(), Tensor([1.0]), h=0.0)
