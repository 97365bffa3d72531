import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from moaecr import diffcore as dc
from moaecr.diffcore import Tensor

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def leaf(a):
    return Tensor(a, requires_grad=True)


# ----------------------------------------------------------------- matmul

def test_matmul_identity():
    out = dc.matmul(Tensor(np.eye(2)), Tensor([[1, 2], [3, 4]]))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_orthogonal():
    assert dc.matmul(Tensor([[1, 0]]), Tensor([[0], [1]])).data.tolist() == [[0.0]]


def test_matmul_gradcheck_tight():
    rng = np.random.default_rng(7)
    a, b = leaf(rng.standard_normal((3, 4))), leaf(rng.standard_normal((4, 2)))
    w = rng.standard_normal((3, 2))
    rep = dc.gradcheck(lambda x, y: dc.tsum((x @ y) * w), [a, b], eps=1e-5, tol=1e-6)
    assert rep.passed, rep
    assert rep.checked == 12 + 8


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(dc.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        dc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# ----------------------------------------------------------------- softmax / logsumexp

def test_softmax_uniform():
    np.testing.assert_allclose(dc.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)


def test_softmax_large_logit_no_overflow():
    out = dc.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(out))
    assert out[0] == pytest.approx(1.0) and out[1] < 1e-300


def test_softmax_matches_high_precision():
    mpmath.mp.dps = 50
    logits = [1, 2, 3]
    denom = sum(mpmath.exp(v) for v in logits)
    expected = [float(mpmath.exp(v) / denom) for v in logits]
    np.testing.assert_allclose(dc.softmax(Tensor(logits)).data, expected, rtol=0, atol=1e-12)


def test_logsumexp_examples():
    assert dc.logsumexp(Tensor([0.0, 0.0])).item() == pytest.approx(math.log(2), abs=1e-15)
    assert dc.logsumexp(Tensor([-3.25])).item() == -3.25
    big = dc.logsumexp(Tensor([1e4, 0.0])).item()
    assert math.isfinite(big) and abs(big - 1e4) < 1e-9


def test_logsumexp_empty_axis():
    with pytest.raises(dc.DomainError):
        dc.logsumexp(Tensor(np.zeros((3, 0))), axis=1)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 5)), elements=finite),
       st.floats(-100, 100))
def test_softmax_normalised_and_shift_invariant(x, c):
    y = dc.softmax(Tensor(x), axis=1).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(dc.softmax(Tensor(x + c), axis=1).data, y, atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=finite))
def test_logsumexp_bounds(x):
    v = dc.logsumexp(Tensor(x)).item()
    assert v >= x.max() - 1e-12
    assert v <= x.max() + math.log(x.size) + 1e-12


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 6), elements=st.floats(-30, 30)))
def test_logsumexp_equals_naive(x):
    naive = math.log(np.exp(x).sum())
    assert dc.logsumexp(Tensor(x)).item() == pytest.approx(naive, abs=1e-9)


# ----------------------------------------------------------------- backward

def test_backward_sum_is_ones():
    x = leaf([1.0, -2.0, 3.0])
    dc.tsum(x).backward()
    np.testing.assert_array_equal(x.grad, [1, 1, 1])


def test_backward_quadratic():
    x = leaf([1.0, 2.0])
    dc.tsum(x * x).backward()
    np.testing.assert_array_equal(x.grad, [2, 4])


def test_backward_accumulates_without_reset():
    x = leaf([1.0, 2.0])
    dc.tsum(x * x).backward()
    dc.tsum(x * x).backward()
    np.testing.assert_array_equal(x.grad, [4, 8])


def test_backward_needs_scalar_root():
    with pytest.raises(ValueError, match="scalar"):
        (leaf([1.0, 2.0]) * 2.0).backward()


def test_diamond_fan_out_adds_path_gradients():
    # y = a*b + a*c with b = 2a, c = a^2  ->  dy/da = 4a + 3a^2
    a = leaf(1.5)
    b = a * 2.0
    c = dc.square(a)
    (a * b + a * c).backward()
    assert a.grad == pytest.approx(4 * 1.5 + 3 * 1.5 ** 2, rel=1e-15)


def test_shared_subexpression_visited_once():
    x = leaf([0.3, -0.7])
    s = dc.exp(x)
    out = dc.tsum(s * s + s)
    out.backward()
    np.testing.assert_allclose(x.grad, 2 * np.exp(2 * x.data) + np.exp(x.data), rtol=1e-14)


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with dc.no_grad():
        y = x * 3.0
    assert y._node is None


def test_topological_order_visits_each_tensor_once():
    x = leaf(2.0)
    y = x * x
    z = y + y * x
    order = dc._topo_order(z)
    assert len(order) == len({id(t) for t in order})
    assert order[0] is z and order[-1] is x


# ----------------------------------------------------------------- gradcheck

def test_gradcheck_sum_of_squares():
    x = leaf(np.random.default_rng(1).standard_normal(7))
    rep = dc.gradcheck(lambda t: dc.tsum(dc.square(t)), x, tol=1e-6)
    assert rep.passed, rep


def test_gradcheck_logsumexp_with_ties():
    x = leaf([0.5, 0.5, 0.5, -1.0])
    rep = dc.gradcheck(lambda t: dc.logsumexp(t), x, eps=1e-5, tol=1e-5)
    assert rep.passed, rep


def test_gradcheck_skips_hinge_kink():
    x = leaf([0.3, 1.0, -0.4])
    rep = dc.gradcheck(lambda t: dc.tsum(dc.hinge(t, 0.3)), x)
    assert rep.passed
    assert rep.skipped == [(0, 0, "non-differentiable point")]
    assert rep.checked == 2


def test_gradcheck_reports_nan():
    rep = dc.gradcheck(lambda t: dc.tsum(t * np.nan), leaf([1.0, 2.0]))
    assert not rep.passed
    assert "non-finite" in rep.failure


def test_gradcheck_catches_wrong_gradient(monkeypatch):
    monkeypatch.setattr(dc.Exp, "backward", staticmethod(lambda ctx, g: (2 * g * ctx["out"],)))
    rep = dc.gradcheck(lambda t: dc.tsum(dc.exp(t)), leaf([0.1, 0.2]))
    assert not rep.passed


def test_gradcheck_restores_input_state():
    x = Tensor([1.0, 2.0])
    dc.gradcheck(lambda t: dc.tsum(dc.square(t)), x)
    assert not x.requires_grad and x.grad is None
    np.testing.assert_array_equal(x.data, [1.0, 2.0])


# ----------------------------------------------------------------- misc primitives

def test_abs_subgradient_zero_at_origin():
    x = leaf([0.0, -2.0, 3.0])
    dc.tsum(dc.tabs(x)).backward()
    np.testing.assert_array_equal(x.grad, [0, -1, 1])


def test_hinge_kink_subgradient_is_zero():
    x = leaf([0.5, 0.7])
    dc.tsum(dc.hinge(x, 0.5)).backward()
    np.testing.assert_array_equal(x.grad, [0, 1])


def test_split_merge_heads_round_trip():
    x = Tensor(np.arange(24.0).reshape(2, 3, 4))
    heads = dc.split_heads(x, 2)
    assert heads.shape == (2, 2, 3, 2)
    np.testing.assert_array_equal(heads.data[:, 1], x.data[..., 2:])
    np.testing.assert_array_equal(dc.merge_heads(heads).data, x.data)


def test_split_heads_indivisible():
    with pytest.raises(dc.DimensionError):
        dc.split_heads(Tensor(np.ones((1, 2, 5))), 2)


def test_values_stay_finite_for_moderate_inputs():
    rng = np.random.default_rng(3)
    x = Tensor(rng.uniform(-1e4, 1e4, size=(4, 6)))
    for out in (dc.softmax(x), dc.logsumexp(x), dc.log_softmax(x), dc.l2_normalize(x)):
        assert np.all(np.isfinite(out.data))
