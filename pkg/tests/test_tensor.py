import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from neurossm import tensor as tt
from neurossm.errors import DimensionError, GraphError, NonFiniteError
from neurossm.tensor import Tensor

from conftest import numeric_grad, rel_err


def test_matmul_identity_and_hand_case():
    a = Tensor([[1, 2], [3, 4]])
    np.testing.assert_array_equal(tt.matmul(a, Tensor(np.eye(2))).data, [[1, 2], [3, 4]])
    np.testing.assert_array_equal(tt.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data, [[11]])


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        tt.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_grad_matches_finite_differences():
    rng = np.random.default_rng(1)
    a_arr, b_arr = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    a, b = Tensor(a_arr, requires_grad=True), Tensor(b_arr, requires_grad=True)
    tt.matmul(a, b).sum().backward()
    # d sum(AB) / dA[i, k] = sum_j B[k, j]
    np.testing.assert_allclose(a.grad, np.broadcast_to(b_arr.sum(axis=1), (3, 4)), rtol=1e-12)
    fd = numeric_grad(lambda: float((a_arr @ b_arr).sum()), a_arr)
    assert np.max(np.abs(a.grad - fd) / np.abs(fd)) < 1e-6


def test_activation_fixed_points():
    assert tt.gelu(Tensor(0.0)).item() == 0.0
    assert tt.silu(Tensor(0.0)).item() == 0.0
    assert tt.sigmoid(Tensor(0.0)).item() == 0.5


def test_softplus_far_negative():
    with mpmath.workdps(50):
        expected = float(mpmath.log(1 + mpmath.exp(-20)))
    got = tt.softplus(Tensor(-20.0)).item()
    assert got > 0
    assert abs(got - expected) / expected < 1e-12
    assert abs(got - 2.06e-9) < 1e-11


def test_gelu_is_exact_erf_form():
    xs = np.linspace(-4, 4, 17)
    ref = [0.5 * x * (1 + math.erf(x / math.sqrt(2))) for x in xs]
    np.testing.assert_allclose(tt.gelu(Tensor(xs)).data, ref, rtol=1e-15, atol=1e-16)


@pytest.mark.parametrize("op", ["silu", "gelu", "softplus", "exp", "sigmoid"])
def test_unary_grads(op):
    arr = np.random.default_rng(2).standard_normal(7)
    x = Tensor(arr, requires_grad=True)
    tt.elementwise(op, x).sum().backward()
    fd = numeric_grad(lambda: float(tt.elementwise(op, Tensor(arr)).data.sum()), arr)
    assert rel_err(x.grad, fd) < 1e-8


@pytest.mark.parametrize("op", ["add", "sub", "mul"])
def test_binary_broadcast_grads(op):
    rng = np.random.default_rng(3)
    a_arr, b_arr = rng.standard_normal((4, 3)), rng.standard_normal(3)
    a, b = Tensor(a_arr, requires_grad=True), Tensor(b_arr, requires_grad=True)
    tt.elementwise(op, a, b).sum().backward()
    f = lambda: float(tt.elementwise(op, Tensor(a_arr), Tensor(b_arr)).data.sum())
    assert rel_err(a.grad, numeric_grad(f, a_arr)) < 1e-8
    assert rel_err(b.grad, numeric_grad(f, b_arr)) < 1e-8


def test_non_broadcastable():
    with pytest.raises(DimensionError):
        tt.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


def test_layer_norm_hand_cases():
    out = tt.layer_norm(Tensor([[1.0, 3.0]]), Tensor([1.0, 1.0]), Tensor([0.0, 0.0]), eps=0.0)
    np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-15)
    bias = np.array([0.5, -2.0, 3.0])
    out = tt.layer_norm(Tensor([[5.0, 5.0, 5.0]]), Tensor([2.0, 3.0, 4.0]), Tensor(bias), eps=1e-5)
    np.testing.assert_allclose(out.data[0], bias, atol=1e-12)


def test_layer_norm_row_statistics():
    x = np.random.default_rng(4).standard_normal((4, 8)) * 3 + 1
    out = tt.layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8)), eps=0.0).data
    assert np.max(np.abs(out.mean(axis=1))) < 1e-12
    assert np.max(np.abs(out.var(axis=1) - 1)) < 1e-6


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 6), elements=st.floats(-50, 50)))
def test_layer_norm_property(x):
    var = x.var(axis=1)
    if np.min(var) <= 1e-6:
        return
    ones, zeros = Tensor(np.ones(6)), Tensor(np.zeros(6))
    out = tt.layer_norm(Tensor(x), ones, zeros, eps=0.0).data
    assert np.max(np.abs(out.mean(axis=1))) < 1e-10
    assert np.max(np.abs(out.var(axis=1) - 1)) < 1e-4
    # with eps > 0 the normalized variance is var / (var + eps)
    out = tt.layer_norm(Tensor(x), ones, zeros, eps=1e-5).data
    assert np.max(np.abs(out.mean(axis=1))) < 1e-10
    np.testing.assert_allclose(out.var(axis=1), var / (var + 1e-5), rtol=1e-9)
    if np.min(var) > 0.1:
        assert np.max(np.abs(out.var(axis=1) - 1)) < 1e-4


def test_layer_norm_grads():
    rng = np.random.default_rng(5)
    x_arr, g_arr, b_arr = rng.standard_normal((3, 5)), rng.standard_normal(5), rng.standard_normal(5)
    w = rng.standard_normal((3, 5))
    x, g, b = (Tensor(v, requires_grad=True) for v in (x_arr, g_arr, b_arr))
    tt.mul(tt.layer_norm(x, g, b), Tensor(w)).sum().backward()
    f = lambda: float((tt.layer_norm(Tensor(x_arr), Tensor(g_arr), Tensor(b_arr)).data * w).sum())
    for t, arr in ((x, x_arr), (g, g_arr), (b, b_arr)):
        assert rel_err(t.grad, numeric_grad(f, arr)) < 1e-7


def test_backward_sum_and_quadratic():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))
    arr = np.random.default_rng(6).standard_normal((2, 3))
    y = Tensor(arr, requires_grad=True)
    (tt.mul(y, y).sum() * 0.5).backward()
    np.testing.assert_allclose(y.grad, arr, rtol=1e-15)


def test_backward_contract():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GraphError):
        tt.mul(x, 2.0).backward()
    loss = x.sum()
    loss.backward()
    with pytest.raises(GraphError):
        loss.backward()


def test_gradient_accumulation_is_additive():
    arr = np.random.default_rng(7).standard_normal(5)
    f = lambda t: tt.mul(t, t).sum()
    g = lambda t: tt.exp(t).sum()
    a = Tensor(arr, requires_grad=True)
    tt.add(f(a), g(a)).backward()
    b = Tensor(arr, requires_grad=True)
    f(b).backward()
    g(b).backward()
    assert np.max(np.abs(a.grad - b.grad)) < 1e-12


def test_checked_mode_rejects_nonfinite():
    with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
        tt.exp(Tensor([1000.0]))
    with np.errstate(over="ignore"), tt.checked(False):
        assert np.isinf(tt.exp(Tensor([1000.0])).data[0])


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with tt.no_grad():
        y = tt.mul(x, 3.0)
    assert not y.requires_grad


def test_shape_ops_grads():
    arr = np.random.default_rng(8).standard_normal((2, 5, 3))
    w = np.random.default_rng(9).standard_normal((2, 7, 3))

    def build(t):
        sl = tt.getitem(t, (..., slice(0, 4), slice(None)))
        padded = tt.pad_after(sl, -2, 3)
        return tt.mul(padded, Tensor(w)).sum()

    x = Tensor(arr, requires_grad=True)
    build(x).backward()
    fd = numeric_grad(lambda: float(build(Tensor(arr)).data), arr)
    assert rel_err(x.grad, fd) < 1e-9


def test_softmax_and_log_softmax():
    p = tt.softmax(Tensor([1000.0, -1000.0])).data
    np.testing.assert_allclose(p, [1.0, 0.0])
    arr = np.random.default_rng(10).standard_normal((3, 4))
    w = np.random.default_rng(11).standard_normal((3, 4))
    for op in (tt.softmax, tt.log_softmax):
        x = Tensor(arr, requires_grad=True)
        tt.mul(op(x), Tensor(w)).sum().backward()
        fd = numeric_grad(lambda: float((op(Tensor(arr)).data * w).sum()), arr)
        assert rel_err(x.grad, fd) < 1e-8
