import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sotglp import numcore as nc
from sotglp.errors import ContractError, DegenerateInputError, DimensionError, NonFiniteError

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def mats(rows, cols):
    return arrays(np.float64, (rows, cols), elements=finite)


def triple_loop(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


# ---- matmul -------------------------------------------------------------


def test_matmul_identity():
    x = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(nc.matmul(nc.Mat(np.eye(2)), nc.Mat(x)).value, x)


def test_matmul_hand_sum():
    out = nc.matmul(nc.Mat([[1.0, 2.0], [3.0, 4.0]]), nc.Mat([[1.0], [1.0]]))
    assert out.value.tolist() == [[3.0], [7.0]]


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
    assert np.allclose(nc.matmul(nc.Mat(a), nc.Mat(b)).value, triple_loop(a, b), atol=1e-12)


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        nc.matmul(nc.Mat(np.ones((2, 3))), nc.Mat(np.ones((2, 3))))


@given(mats(3, 4), mats(4, 2), mats(2, 5))
def test_matmul_associative(a, b, c):
    A, B, C = nc.Mat(a), nc.Mat(b), nc.Mat(c)
    left = nc.matmul(nc.matmul(A, B), C).value
    right = nc.matmul(A, nc.matmul(B, C)).value
    assert np.allclose(left, right, atol=1e-10, rtol=1e-10)


def test_no_implicit_broadcasting():
    with pytest.raises(DimensionError):
        nc.add(nc.Mat(np.ones((2, 3))), nc.Mat(np.ones((1, 3))))
    out = nc.add(nc.Mat(np.ones((2, 3))), nc.broadcast_to(nc.Mat(np.ones((1, 3))), (2, 3)))
    assert out.shape == (2, 3)


# ---- softmax ------------------------------------------------------------


def test_softmax_examples():
    assert np.allclose(nc.softmax_rows(nc.Mat([[0.0, 0.0, 0.0]])).value, [[1 / 3] * 3], atol=1e-15)
    assert np.allclose(nc.softmax_rows(nc.Mat([[1000.0, 1000.0]])).value, [[0.5, 0.5]], atol=1e-15)
    out = nc.softmax_rows(nc.Mat([[math.log(1.0), math.log(3.0)]])).value
    assert np.allclose(out, [[0.25, 0.75]], atol=1e-15)


@given(mats(4, 6), st.floats(-100, 100))
def test_softmax_rows_sum_to_one_and_shift_invariant(x, shift):
    p = nc.softmax_rows(nc.Mat(x)).value
    assert np.all(p >= 0)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert np.allclose(nc.softmax_rows(nc.Mat(x + shift)).value, p, atol=1e-12)


# ---- l2norm -------------------------------------------------------------


def test_l2norm_examples(rng):
    assert np.allclose(nc.l2norm_rows(nc.Mat([[3.0, 4.0]])).value, [[0.6, 0.8]], atol=1e-15)
    unit = nc.l2norm_rows(nc.Mat(rng.normal(size=(5, 7)))).value
    assert np.allclose(nc.l2norm_rows(nc.Mat(unit)).value, unit, atol=1e-15)
    assert np.allclose(np.linalg.norm(unit, axis=1), 1.0, atol=1e-12)


def test_l2norm_zero_row():
    with pytest.raises(DegenerateInputError):
        nc.l2norm_rows(nc.Mat([[1.0, 0.0], [0.0, 0.0]]))


# ---- tape / backward ----------------------------------------------------


def test_backward_sum_is_ones():
    tape = nc.Tape()
    w = tape.leaf(np.arange(6.0).reshape(2, 3))
    g = nc.backward(nc.sum(w), tape)
    assert np.array_equal(g[w.node_id], np.ones((2, 3)))


def test_backward_inner_product():
    tape = nc.Tape()
    x = np.array([[1.5, -2.0, 0.25]])
    w = tape.leaf(np.array([[0.3, 0.1, -0.7]]))
    loss = nc.sum(nc.mul(w, nc.Mat(x)))
    assert np.allclose(nc.backward(loss, tape)[w.node_id], x)


def test_backward_untracked_loss():
    tape = nc.Tape()
    with pytest.raises(ContractError):
        nc.backward(nc.sum(nc.Mat(np.ones(3))), tape)


def test_backward_needs_scalar():
    tape = nc.Tape()
    w = tape.leaf(np.ones((2, 2)))
    with pytest.raises(ContractError):
        nc.backward(nc.scale(w, 2.0), tape)


def test_unreached_leaf_gets_zero_gradient():
    tape = nc.Tape()
    a = tape.leaf(np.ones(3))
    b = tape.leaf(np.ones((2, 2)))
    g = nc.backward(nc.sum(a), tape)
    assert np.array_equal(g[b.node_id], np.zeros((2, 2)))


def test_mixing_tapes_is_rejected():
    a = nc.Tape().leaf(np.ones(2))
    b = nc.Tape().leaf(np.ones(2))
    with pytest.raises(ContractError):
        nc.add(a, b)


def test_nonfinite_results_raise():
    with pytest.raises(DegenerateInputError):
        nc.log(nc.Mat([0.0, 1.0]))
    with pytest.raises(NonFiniteError):
        nc.exp(nc.Mat([1000.0]))


def test_values_are_read_only():
    m = nc.Mat(np.ones(3))
    with pytest.raises(ValueError):
        m.value[0] = 2.0


# ---- finite differences -------------------------------------------------


def test_finite_diff_square():
    (g,) = nc.finite_diff_grad(lambda xs: float(xs[0][0] ** 2), [np.array([3.0])], h=1e-5)
    assert abs(g[0] - 6.0) <= 1e-6


def test_finite_diff_constant():
    (g,) = nc.finite_diff_grad(lambda xs: 4.2, [np.ones((2, 3))])
    assert np.array_equal(g, np.zeros((2, 3)))


def test_finite_diff_rejects_bad_step():
    with pytest.raises(ContractError):
        nc.finite_diff_grad(lambda xs: 0.0, [np.ones(2)], h=0.0)


def _composite(tape_or_none, w, b, x):
    """A composite touching most ops: softmax attention, norms, lse, gathers."""
    mk = (lambda v: tape_or_none.leaf(v)) if tape_or_none is not None else nc.Mat
    W, B = mk(w), mk(b)
    h = nc.matmul(nc.Mat(x), W)  # (4, 3)
    h = nc.add(h, nc.broadcast_to(nc.reshape(B, (1, 3)), (4, 3)))
    att = nc.softmax_rows(nc.scale(nc.matmul(h, nc.transpose(h)), 0.5))
    z = nc.l2norm_rows(nc.matmul(att, h))
    picked = nc.take_along_axis(z, np.array([[0], [2], [1], [0]]), axis=1)
    tail = nc.take(z, [1, 3], axis=0)
    out = nc.add(nc.mean(nc.logsumexp(nc.scale(z, 3.0), axis=1)), nc.sum(picked))
    out = nc.add(out, nc.sum(nc.exp(nc.neg(nc.concat([tail, z], axis=0)))))
    return out, (W, B)


@pytest.mark.parametrize("seed", range(10))
def test_backward_matches_finite_differences(seed):
    r = np.random.default_rng(seed)
    w, b, x = r.normal(size=(5, 3)), r.normal(size=3), r.normal(size=(4, 5))
    tape = nc.Tape()
    loss, leaves = _composite(tape, w, b, x)
    grads = nc.backward(loss, tape)
    fd = nc.finite_diff_grad(lambda ps: _composite(None, ps[0], ps[1], x)[0].item(), [w, b])
    for leaf, ref in zip(leaves, fd):
        got = grads[leaf.node_id]
        assert np.linalg.norm(got - ref) <= 1e-4 * max(np.linalg.norm(ref), 1e-8)


@pytest.mark.parametrize("axis", [-1, -2])
def test_softmin_dual_value_and_gradient(rng, axis):
    c0 = rng.uniform(0, 2, size=(2, 3, 4))
    d0 = rng.normal(size=(2, 4) if axis == -1 else (2, 3))
    eps = 0.3
    other = -2 if axis == -1 else -1
    ref = -eps * np.log(np.sum(np.exp((np.expand_dims(d0, other) - c0) / eps), axis=axis))
    assert np.allclose(nc.softmin_dual(nc.Mat(d0), nc.Mat(c0), eps, axis).value, ref, atol=1e-12)
    u = rng.normal(size=ref.shape)
    tape = nc.Tape()
    d, c = tape.leaf(d0), tape.leaf(c0)
    grads = nc.backward(nc.sum(nc.mul(nc.softmin_dual(d, c, eps, axis), nc.Mat(u))), tape)
    fd = nc.finite_diff_grad(lambda xs: float(np.sum(nc.softmin_dual(nc.Mat(xs[0]), nc.Mat(xs[1]), eps, axis).value * u)), [d0, c0])
    assert np.allclose(grads[d.node_id], fd[0], atol=1e-7)
    assert np.allclose(grads[c.node_id], fd[1], atol=1e-7)


def test_softmin_dual_shape_checked():
    with pytest.raises(DimensionError):
        nc.softmin_dual(nc.Mat(np.zeros(3)), nc.Mat(np.zeros((3, 4))), 0.1, -1)
