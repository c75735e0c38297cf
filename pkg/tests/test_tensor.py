import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from doczsl import tensor as T
from doczsl.errors import DimensionError, GraphError
from doczsl.tensor import Tensor, grad_check

SEEDS = range(10)
finite = st.floats(-20, 20, allow_nan=False, allow_infinity=False)


def _weights(rng, shape):
    return Tensor(rng.normal(size=shape))


# -- forward values --------------------------------------------------------------
def test_matmul_example():
    out = T.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[5, 6], [7, 8]]))
    np.testing.assert_array_equal(out.data, [[19, 22], [43, 50]])


def test_matmul_inner_mismatch():
    with pytest.raises(DimensionError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_softmax_uniform_and_shift():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3)
    big = T.softmax(Tensor([1000.0, 1000.0])).data
    np.testing.assert_allclose(big, [0.5, 0.5])
    assert np.all(np.isfinite(big))


def test_softmax_mask_zeroes_entries():
    out = T.softmax(Tensor([[1.0, 2.0, 3.0]]), axis=-1, mask=np.array([[True, True, False]])).data
    assert out[0, 2] == 0.0
    assert out.sum() == pytest.approx(1.0)


def test_cross_entropy_uniform_is_log_k():
    assert T.cross_entropy(Tensor(np.zeros(7)), 3).item() == pytest.approx(math.log(7))


def test_cross_entropy_bad_target():
    with pytest.raises(IndexError):
        T.cross_entropy(Tensor(np.zeros(3)), 3)


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    s = Tensor(np.array([0.3, -1.0, 2.0]), requires_grad=True)
    T.cross_entropy(s, 1).backward()
    expect = np.exp(s.data) / np.exp(s.data).sum()
    expect[1] -= 1
    np.testing.assert_allclose(s.grad, expect, atol=1e-12)


def test_mean_of_single_row_is_identity():
    x = Tensor([[1.0, -2.0, 5.0]])
    np.testing.assert_array_equal(T.reduce_mean(x, axis=0).data, [1.0, -2.0, 5.0])


def test_max_gradient_goes_to_first_tie():
    x = Tensor(np.array([[1.0, 3.0], [3.0, 2.0], [3.0, 0.0]]), requires_grad=True)
    T.reduce_sum(T.reduce_max(x, axis=0)).backward()
    np.testing.assert_array_equal(x.grad, [[0, 1], [1, 0], [0, 0]])


def test_gelu_values():
    np.testing.assert_allclose(T.gelu(Tensor([0.0])).data, [0.0])
    assert T.gelu(Tensor([10.0])).item() == pytest.approx(10.0, abs=1e-9)


def test_layer_norm_zero_mean_unit_var():
    x = Tensor(np.random.default_rng(0).normal(size=(4, 6)) * 5 + 3)
    y = T.layer_norm(x, Tensor(np.ones(6)), Tensor(np.zeros(6))).data
    np.testing.assert_allclose(y.mean(axis=-1), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=-1), 1, atol=1e-4)


def test_broadcast_rejects_ambiguous_shapes():
    with pytest.raises(DimensionError):
        T.add(Tensor(np.ones((2, 1))), Tensor(np.ones((1, 3))))


# -- graph semantics ---------------------------------------------------------------
def test_backward_twice_raises():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = T.reduce_sum(T.mul(x, x))
    loss.backward()
    with pytest.raises(GraphError):
        loss.backward()


def test_backward_needs_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(GraphError):
        T.scale(x, 2.0).backward()


def test_gradients_accumulate_across_backward_calls():
    x = Tensor([1.0, 2.0], requires_grad=True)
    T.reduce_sum(T.scale(x, 3.0)).backward()
    T.reduce_sum(T.scale(x, 3.0)).backward()
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])


def test_shared_subexpression_gets_both_paths():
    x = Tensor([2.0], requires_grad=True)
    y = T.mul(x, x)
    T.reduce_sum(T.add(y, y)).backward()
    assert x.grad[0] == pytest.approx(8.0)


def test_no_grad_builds_no_graph():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = T.mul(x, x)
    assert not y.requires_grad


def test_batch_gradient_equals_sum_of_per_example_gradients(rng):
    w = rng.normal(size=(3, 4))
    xs = rng.normal(size=(2, 3))

    def loss_of(rows):
        wt = Tensor(w, requires_grad=True)
        T.reduce_sum(T.gelu(T.matmul(Tensor(rows), wt))).backward()
        return wt.grad

    np.testing.assert_allclose(loss_of(xs), loss_of(xs[:1]) + loss_of(xs[1:]), atol=1e-12)


# -- finite-difference suite over 10 seeds -----------------------------------------
def _cases(rng):
    a = rng.normal(size=(3, 4))
    b = _weights(rng, (4, 5))
    c = _weights(rng, (3, 4))
    mask = rng.random((3, 4)) > 0.3
    mask[:, 0] = True
    gain, bias = _weights(rng, (4,)), _weights(rng, (4,))
    tgt = [0, 4, 2]
    return {
        "matmul": (lambda x: T.reduce_sum(T.matmul(x, b)), a, 1e-6),
        "batched_matmul": (lambda x: T.reduce_sum(T.matmul(T.reshape(x, (3, 1, 4)),
                                                           T.reshape(c, (3, 4, 1)))), a, 1e-6),
        "add_broadcast": (lambda x: T.reduce_sum(T.mul(T.add(x, gain), c)), a, 1e-6),
        "sub_mul": (lambda x: T.reduce_sum(T.mul(T.sub(x, c), x)), a, 1e-6),
        "gelu": (lambda x: T.reduce_sum(T.mul(T.gelu(x), c)), a, 1e-5),
        "softmax": (lambda x: T.reduce_sum(T.mul(T.softmax(x, axis=-1), c)), a, 1e-6),
        "masked_softmax": (lambda x: T.reduce_sum(T.mul(T.softmax(x, axis=-1, mask=mask), c)), a, 1e-6),
        "mean": (lambda x: T.reduce_sum(T.mul(T.reduce_mean(x, axis=0), gain)), a, 1e-6),
        "max": (lambda x: T.reduce_sum(T.mul(T.reduce_max(x, axis=0), gain)), a, 1e-6),
        "layer_norm": (lambda x: T.reduce_sum(T.mul(T.layer_norm(x, gain, bias), c)), a, 1e-5),
        "cross_entropy": (lambda x: T.cross_entropy(T.matmul(x, b), np.array(tgt)), a, 1e-6),
        "shape_ops": (lambda x: T.reduce_sum(T.mul(T.transpose(T.concat([x, T.reshape(x, (3, 4))], axis=0)),
                                                   T.broadcast_to(T.reshape(bias, (4, 1)), (4, 6)))), a, 1e-6),
        "getitem_stack": (lambda x: T.reduce_sum(T.mul(T.stack([x[0], x[2]]), c[1:])), a, 1e-6),
    }


@pytest.mark.parametrize("seed", SEEDS)
def test_every_op_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    for name, (fn, x, tol) in _cases(rng).items():
        err = grad_check(fn, x)
        assert err < tol, f"{name}: relative error {err:.2e}"


# -- properties ------------------------------------------------------------------------
@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite))
def test_softmax_rows_sum_to_one(x):
    out = T.softmax(Tensor(x), axis=-1).data
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(out >= 0)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=finite), st.floats(-50, 50))
def test_softmax_shift_invariant(x, c):
    np.testing.assert_allclose(T.softmax(Tensor(x)).data, T.softmax(Tensor(x + c)).data, atol=1e-10)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(2, 8), elements=finite), st.data())
def test_cross_entropy_nonnegative(x, data):
    t = data.draw(st.integers(0, len(x) - 1))
    assert T.cross_entropy(Tensor(x), t).item() >= -1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 10_000))
def test_matmul_matches_numpy(m, k, n, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(m, k)), rng.normal(size=(k, n))
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b)).data, a @ b)
