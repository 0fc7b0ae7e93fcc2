from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from opendg import numerics as nx
from opendg.errors import DimensionError, PreconditionError
from opendg.numerics import Tensor

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError) as exc:
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    assert "(2, 3)" in str(exc.value)


def test_sum_gradient_is_ones():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    nx.backward(nx.tsum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(PreconditionError):
        nx.backward(nx.scale(x, 2.0))


def test_reduce_empty_is_precondition_error():
    with pytest.raises(PreconditionError):
        nx.reduce("sum", Tensor(np.zeros((0, 3))))


def test_gradients_accumulate_across_backward_calls():
    x = Tensor(np.ones((1, 2)), requires_grad=True)
    nx.backward(nx.tsum(x))
    nx.backward(nx.tsum(x))
    np.testing.assert_array_equal(x.grad, 2 * np.ones((1, 2)))
    x.zero_grad()
    assert x.grad is None


def test_shared_subexpression_gets_both_paths():
    x = Tensor([[3.0]], requires_grad=True)
    y = nx.mul(x, x)
    nx.backward(nx.add(y, y))  # d/dx 2x^2 = 4x
    assert x.grad[0, 0] == pytest.approx(12.0)


def test_graph_topological_order_parents_first():
    a = Tensor(np.ones((1, 1)), requires_grad=True)
    b = nx.exp(a)
    c = nx.add(b, a)
    order = nx.Graph.from_output(c).nodes
    pos = {id(t): k for k, t in enumerate(order)}
    assert pos[id(a)] < pos[id(b)] < pos[id(c)]


def test_log_is_guarded_at_zero():
    x = Tensor(np.zeros((1, 2)), requires_grad=True)
    out = nx.log(x)
    assert np.all(np.isfinite(out.values))


def test_softmax_rows_are_stochastic_for_large_logits():
    p = nx.softmax_rows_array(np.array([[1000.0, 0.0, -1000.0], [5.0, 5.0, 5.0]]))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert p[0, 0] == pytest.approx(1.0)


def test_broadcast_row_vector_gradient_sums_over_rows():
    x = Tensor(np.ones((4, 3)), requires_grad=True)
    b = Tensor(np.zeros((1, 3)), requires_grad=True)
    nx.backward(nx.tsum(nx.add(x, b)))
    np.testing.assert_array_equal(b.grad, 4 * np.ones((1, 3)))


def test_pick_and_row_slice_gradients():
    x = Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
    nx.backward(nx.add(nx.pick(x, 2, 1), nx.tsum(nx.row_slice(x, 1, 3))))
    expected = np.zeros((4, 3))
    expected[1:3] = 1
    expected[2, 1] += 1
    np.testing.assert_array_equal(x.grad, expected)


@pytest.mark.parametrize(
    "f",
    [
        lambda x: nx.tsum(nx.exp(x)),
        lambda x: nx.mean(nx.mul(x, x)),
        lambda x: nx.tsum(nx.mul(nx.softmax_rows(x), x)),
        lambda x: nx.tsum(nx.matmul(x, nx.transpose(x))),
        lambda x: nx.tsum(nx.log(nx.add(nx.mul(x, x), Tensor(1.0)))),
        lambda x: nx.tsum(nx.reciprocal(nx.add(nx.mul(x, x), Tensor(1.0)))),
        lambda x: nx.tsum(nx.row_mean(x)),
    ],
)
def test_grad_check_on_primitives(f):
    x = np.random.default_rng(0).normal(size=(3, 4))
    rep = nx.grad_check(f, x)
    assert rep.passed, rep.max_rel_err


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 2), elements=finite), arrays(np.float64, (3, 2), elements=finite))
def test_add_is_commutative_with_matching_grads(a, b):
    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    nx.backward(nx.tsum(nx.mul(nx.add(ta, tb), nx.add(ta, tb))))
    np.testing.assert_allclose(ta.grad, tb.grad)
    np.testing.assert_array_equal(nx.add(Tensor(a), Tensor(b)).values, nx.add(Tensor(b), Tensor(a)).values)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 3), elements=finite))
def test_relu_grad_check_away_from_kink(x):
    x = np.where(np.abs(x) < 1e-3, 0.5, x)
    rep = nx.grad_check(lambda t: nx.tsum(nx.mul(nx.relu(t), t)), x)
    assert rep.passed
