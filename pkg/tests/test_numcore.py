import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from sscnn import numcore as nc
from sscnn.numcore import Tape, Tensor

from oracles import causal_conv


def test_matmul_examples():
    assert np.array_equal(nc.matmul(np.eye(2), [[1.0], [2.0]]).value, [[1.0], [2.0]])
    assert nc.matmul([[1.0, 1.0]], [[3.0], [4.0]]).value.tolist() == [[7.0]]
    assert not nc.matmul(np.zeros((2, 2)), np.arange(6.0).reshape(2, 3)).value.any()


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
        nc.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_softmax_examples():
    assert nc.masked_row_softmax([0.0, 0.0]).value.tolist() == [0.5, 0.5]
    np.testing.assert_allclose(nc.masked_row_softmax([math.log(2), 0.0]).value, [2 / 3, 1 / 3], atol=1e-15)
    out = nc.masked_row_softmax([math.log(2), 0.0], [True, False]).value
    assert out.tolist() == [1.0, 0.0]


def test_softmax_rejects_empty_row():
    with pytest.raises(ValueError):
        nc.masked_row_softmax(np.zeros((2, 2)), [[True, False], [False, False]])


@given(arrays(np.float64, (4, 6), elements=st.floats(-50, 50)),
       arrays(bool, (4, 6)))
def test_softmax_rows_sum_to_one(logits, mask):
    mask[:, 0] |= ~mask.any(axis=1)
    out = nc.masked_row_softmax(logits, mask).value
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)
    assert not out[~mask].any()


def test_causal_conv_examples():
    x = np.array([[1.0], [2.0], [3.0]])
    out = nc.causal_conv1d(x, np.ones((2, 1, 1)), np.zeros(1)).value
    assert out.ravel().tolist() == [1.0, 3.0, 5.0]
    eye = np.eye(3)[None]
    y = np.random.default_rng(0).normal(size=(5, 3))
    np.testing.assert_array_equal(nc.causal_conv1d(y, eye, np.zeros(3)).value, y)
    assert not nc.causal_conv1d(y, np.zeros((2, 3, 2)), np.zeros(2)).value.any()


@given(st.integers(1, 12), st.integers(1, 4), st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**31))
def test_causal_conv_matches_loop_and_keeps_length(steps, k, c_in, c_out, seed):
    rng = np.random.default_rng(seed)
    x, kern, b = rng.normal(size=(steps, c_in)), rng.normal(size=(k, c_in, c_out)), rng.normal(size=c_out)
    out = nc.causal_conv1d(x, kern, b).value
    assert out.shape == (steps, c_out)
    np.testing.assert_allclose(out, causal_conv(x, kern, b), atol=1e-12)


def test_backward_square():
    x = Tensor(3.0, requires_grad=True)
    with Tape() as tape:
        loss = x * x
    assert nc.backward(tape, loss)[x] == 6.0


def test_backward_constant_loss_has_no_gradients():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = nc.tsum(Tensor(np.ones(3)))
    assert nc.backward(tape, loss) == {}
    assert x.grad is None


def test_backward_softmax_sum_is_zero():
    w = Tensor(np.random.default_rng(1).normal(size=5), requires_grad=True)
    with Tape() as tape:
        loss = nc.tsum(nc.masked_row_softmax(w))
    np.testing.assert_allclose(nc.backward(tape, loss)[w], 0.0, atol=1e-15)


def test_backward_rejects_vector_loss():
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ValueError):
        nc.backward(tape, y)


def test_grad_check_examples():
    rep = nc.grad_check(lambda a: a[0] * a[0], [np.array(1.0)], h=1e-5)
    assert rep.max_rel_error < 1e-6 and rep.passed
    rep = nc.grad_check(lambda a: nc.tsum(a[0] * 0.0) + 3.0, [np.array([1.0, 2.0])])
    assert not rep.analytic.any() and not rep.numeric.any()
    rep = nc.grad_check(lambda a: nc.tsum(nc.masked_row_softmax(a[0])), [np.array([0.3, -1.0, 2.0])])
    np.testing.assert_allclose(rep.analytic, 0.0, atol=1e-12)
    np.testing.assert_allclose(rep.numeric, 0.0, atol=1e-9)


def _composites(rng):
    """Scalar functions touching every op the model uses."""
    mask = np.tril(np.ones((4, 4), dtype=bool))
    idx = np.array([[0, -1, 2], [3, 1, -1]])
    return [
        (lambda a: nc.tsum(nc.matmul(a[0], a[1]) ** 2.0), [rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 2))]),
        (lambda a: nc.tsum(nc.masked_row_softmax(a[0], mask) * a[1]), [rng.normal(size=(4, 4)), rng.normal(size=(4, 4))]),
        (lambda a: nc.tmean(nc.causal_conv1d(a[0], a[1], a[2]) ** 2.0),
         [rng.normal(size=(2, 5, 3)), rng.normal(size=(2, 3, 2)), rng.normal(size=2)]),
        (lambda a: nc.tsum(nc.sqrt(a[0] * a[0] + 1.0) / (nc.exp(a[1]) + 2.0)), [rng.normal(size=3), rng.normal(size=3)]),
        (lambda a: nc.tsum(nc.gather(a[0], idx) * a[1]), [rng.normal(size=(2, 2)), rng.normal(size=(2, 3))]),
        (lambda a: nc.tsum(nc.swapaxes(nc.reshape(a[0], (3, 2)), 0, 1) * a[1] - a[1]),
         [rng.normal(size=6), rng.normal(size=(2, 3))]),
        (lambda a: nc.tmean(nc.concat([a[0], a[1]], axis=0), axis=0).sum() + nc.absolute(a[0] + 5.0).sum(),
         [rng.normal(size=(2, 3)), rng.normal(size=(1, 3))]),
    ]


@pytest.mark.parametrize("seed", range(15))
def test_composite_ops_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    for f, point in _composites(rng):
        rep = nc.grad_check(f, point, h=1e-5, tol=1e-4)
        assert rep.passed, rep.max_rel_error


def test_broadcast_gradients_unbroadcast():
    rep = nc.grad_check(lambda a: nc.tsum((a[0] + a[1]) * a[2]),
                        [np.ones((3, 1)), np.arange(4.0), np.arange(12.0).reshape(3, 4)])
    assert rep.passed


def test_ops_are_deterministic():
    rng = np.random.default_rng(5)
    a, k, b = rng.normal(size=(3, 7, 4)), rng.normal(size=(2, 4, 4)), rng.normal(size=4)
    assert np.array_equal(nc.causal_conv1d(a, k, b).value, nc.causal_conv1d(a, k, b).value)


def test_tapes_nest_and_stay_separate():
    x = Tensor(2.0, requires_grad=True)
    with Tape() as outer:
        y = x * 3.0
        with Tape() as inner:
            z = y * y
    assert len(outer) == 1 and len(inner) == 1
    assert z.op == "mul"
