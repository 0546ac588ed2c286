import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from clvsa import diffcore as dc


def leaf(tape, x):
    return tape.leaf(np.asarray(x, dtype=np.float64))


# -- construction -------------------------------------------------------------

def test_rejects_non_finite_values(tape):
    with pytest.raises(ValueError):
        tape.leaf(np.array([1.0, np.nan]))
    with pytest.raises(ValueError):
        dc.as_tensor([np.inf])


def test_operands_from_different_tapes_rejected():
    a, b = dc.Tape(), dc.Tape()
    with pytest.raises(dc.TapeError):
        dc.add(leaf(a, [1.0]), leaf(b, [1.0]))


def test_grad_starts_at_zero(tape):
    x = leaf(tape, [[1.0, 2.0]])
    assert x.grad.shape == x.value.shape
    assert not x.grad.any()


# -- elementwise ---------------------------------------------------------------

def test_sigmoid_at_zero(tape):
    assert dc.sigmoid(leaf(tape, [0.0])).value[0] == 0.5


def test_hadamard_hand_values(tape):
    out = dc.hadamard(leaf(tape, [1.0, 2.0]), leaf(tape, [3.0, 4.0]))
    np.testing.assert_array_equal(out.value, [3.0, 8.0])


def test_add_zero_is_identity(tape):
    x = np.array([0.3, -1.2, 7.0])
    np.testing.assert_array_equal(dc.add(leaf(tape, x), leaf(tape, np.zeros(3))).value, x)


def test_elementwise_dispatch(tape):
    a, b = leaf(tape, [1.0, -2.0]), leaf(tape, [3.0, 4.0])
    np.testing.assert_array_equal(dc.elementwise("add", a, b).value, [4.0, 2.0])
    np.testing.assert_array_equal(dc.elementwise("relu", a).value, [1.0, 0.0])
    with pytest.raises(ValueError):
        dc.elementwise("add", a)
    with pytest.raises(ValueError):
        dc.elementwise("cosine", a)


def test_binary_shape_mismatch(tape):
    with pytest.raises(ValueError):
        dc.hadamard(leaf(tape, [1.0, 2.0]), leaf(tape, [1.0]))


def test_sigmoid_saturates_without_overflow(tape):
    out = dc.sigmoid(leaf(tape, [-800.0, 800.0])).value
    np.testing.assert_array_equal(out, [0.0, 1.0])


# -- affine --------------------------------------------------------------------

def test_affine_identity(tape):
    out = dc.affine(leaf(tape, np.eye(2)), leaf(tape, [2.0, 3.0]), leaf(tape, [0.0, 0.0]))
    np.testing.assert_array_equal(out.value, [2.0, 3.0])


def test_affine_hand_value(tape):
    out = dc.affine(leaf(tape, [[1.0, 1.0]]), leaf(tape, [2.0, 3.0]), leaf(tape, [1.0]))
    np.testing.assert_array_equal(out.value, [6.0])


def test_affine_zero_weights_give_bias(tape):
    out = dc.affine(leaf(tape, np.zeros((2, 3))), leaf(tape, [5.0, -1.0, 2.0]),
                    leaf(tape, [0.25, -4.0]))
    np.testing.assert_array_equal(out.value, [0.25, -4.0])


def test_affine_dimension_mismatch(tape):
    with pytest.raises(ValueError):
        dc.affine(leaf(tape, np.zeros((2, 3))), leaf(tape, [1.0, 2.0]))


# -- convolution ---------------------------------------------------------------

def _kernel(tape, taps, bias=0.0):
    w = np.asarray(taps, dtype=np.float64).reshape(len(taps), 1, 1)
    return dc.Kernel(leaf(tape, w), leaf(tape, [bias]))


def test_conv_hand_value_with_zero_padding(tape):
    x = leaf(tape, np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 4, 1))
    out = dc.conv1d_row_shared(x, _kernel(tape, [1.0, 1.0, 1.0]))
    np.testing.assert_array_equal(out.value.ravel(), [3.0, 6.0, 9.0, 7.0])


def test_conv_delta_kernel_is_identity(tape, rng):
    xv = rng.standard_normal((3, 6, 1))
    out = dc.conv1d_row_shared(leaf(tape, xv), _kernel(tape, [0.0, 1.0, 0.0]))
    np.testing.assert_array_equal(out.value, xv)


def test_conv_zero_kernel(tape, rng):
    out = dc.conv1d_row_shared(leaf(tape, rng.standard_normal((2, 5, 6, 1))),
                               _kernel(tape, [0.0, 0.0, 0.0]))
    assert not out.value.any()


def test_conv_taps_are_ordered_in_time(tape):
    # kernel [a, b, c] at position t reads x[t-1], x[t], x[t+1]
    x = leaf(tape, np.array([0.0, 1.0, 0.0, 0.0]).reshape(1, 4, 1))
    out = dc.conv1d_row_shared(x, _kernel(tape, [1.0, 10.0, 100.0]))
    np.testing.assert_array_equal(out.value.ravel(), [100.0, 10.0, 1.0, 0.0])


def test_conv_shares_weights_across_rows(tape, rng):
    row = rng.standard_normal((6, 2))
    x = np.stack([row, rng.standard_normal((6, 2)), row])
    k = dc.Kernel(leaf(tape, rng.standard_normal((3, 2, 4))), leaf(tape, rng.standard_normal(4)))
    out = dc.conv1d_row_shared(leaf(tape, x), k).value
    np.testing.assert_array_equal(out[0], out[2])
    assert not np.array_equal(out[0], out[1])


def test_conv_channel_mismatch(tape):
    k = dc.Kernel(leaf(tape, np.zeros((3, 2, 1))), leaf(tape, [0.0]))
    with pytest.raises(ValueError):
        dc.conv1d_row_shared(leaf(tape, np.zeros((5, 6, 3))), k)


def test_kernel_width_must_be_odd(tape):
    with pytest.raises(ValueError):
        dc.Kernel(leaf(tape, np.zeros((2, 1, 1))), leaf(tape, [0.0]))


# -- softmax -------------------------------------------------------------------

def test_softmax_uniform(tape):
    np.testing.assert_allclose(dc.softmax_last(leaf(tape, [0.0, 0.0, 0.0])).value, [1 / 3] * 3,
                               rtol=0, atol=1e-15)


def test_softmax_hand_value(tape):
    out = dc.softmax_last(leaf(tape, [math.log(2.0), 0.0])).value
    np.testing.assert_allclose(out, [2 / 3, 1 / 3], rtol=0, atol=1e-15)


def test_softmax_extreme_logits_stay_finite(tape):
    out = dc.softmax_last(leaf(tape, [1000.0, -1000.0, 0.0])).value
    np.testing.assert_allclose(out, [1.0, 0.0, 0.0])


finite = st.floats(-50, 50, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6),
                  elements=finite),
       st.floats(-100, 100))
def test_softmax_normalized_and_shift_invariant(v, c):
    tape = dc.Tape()
    p = dc.softmax_last(tape.leaf(v)).value
    q = dc.softmax_last(tape.leaf(v + c)).value
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(-1), 1.0, rtol=0, atol=1e-12)
    np.testing.assert_allclose(p, q, rtol=0, atol=1e-12)


# -- concat / stack / reshape ----------------------------------------------------

def test_concat_hand_value(tape):
    out = dc.concat_last(leaf(tape, [1.0, 2.0]), leaf(tape, [3.0]))
    np.testing.assert_array_equal(out.value, [1.0, 2.0, 3.0])


def test_concat_with_empty_is_identity(tape):
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = dc.concat_last(leaf(tape, x), leaf(tape, np.zeros((2, 0))))
    np.testing.assert_array_equal(out.value, x)


def test_concat_routes_gradients_to_halves(tape):
    a, b = leaf(tape, [1.0, 2.0]), leaf(tape, [3.0])
    w = leaf(tape, [[10.0, 20.0, 30.0]])
    tape.backward(dc.reshape(dc.affine(w, dc.concat_last(a, b)), ()))
    np.testing.assert_array_equal(a.grad, [10.0, 20.0])
    np.testing.assert_array_equal(b.grad, [30.0])


def test_stack_and_reshape_round_trip(tape, rng):
    xs = [leaf(tape, rng.standard_normal((2, 3))) for _ in range(4)]
    s = dc.stack(xs, axis=1)
    assert s.shape == (2, 4, 3)
    np.testing.assert_array_equal(dc.reshape(s, (8, 3)).value, s.value.reshape(8, 3))


# -- losses and sampling -----------------------------------------------------------

def test_cross_entropy_hand_values(tape):
    assert dc.cross_entropy(leaf(tape, [[1.0, 0.0, 0.0]]), [0]).value == 0.0
    ce = dc.cross_entropy(leaf(tape, [[1 / 3] * 3]), [2]).value
    assert abs(ce - math.log(3)) < 1e-12
    ce = dc.cross_entropy(leaf(tape, [[0.5, 0.25, 0.25]]), [0]).value
    assert abs(ce - math.log(2)) < 1e-12


def test_cross_entropy_floor_and_ignore(tape):
    ce = dc.cross_entropy(leaf(tape, [[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]]), [0, dc.IGNORE_INDEX])
    assert ce.value == pytest.approx(-math.log(dc.LOG_FLOOR))
    with pytest.raises(ValueError):
        dc.cross_entropy(leaf(tape, [[0.5, 0.5]]), [2])
    with pytest.raises(ValueError):
        dc.cross_entropy(leaf(tape, [[0.5, 0.5]]), [dc.IGNORE_INDEX])


def test_reparameterize_cases(tape):
    mu = leaf(tape, [0.7, -1.1])
    np.testing.assert_array_equal(dc.reparameterize(mu, leaf(tape, [0.3, 2.0]), np.zeros(2)).value,
                                  mu.value)
    z = dc.reparameterize(leaf(tape, [0.0]), leaf(tape, [0.0]), np.array([1.0]))
    np.testing.assert_array_equal(z.value, [1.0])
    with pytest.raises(ValueError):
        dc.reparameterize(mu, leaf(tape, [0.0, 0.0]), np.zeros(3))


def test_reparameterize_sample_mean():
    rng = np.random.default_rng(5)
    n = 100_000
    mu, logvar = 1.5, math.log(0.49)
    tape = dc.Tape()
    z = dc.reparameterize(tape.leaf(np.full(n, mu)), tape.leaf(np.full(n, logvar)),
                          rng.standard_normal(n)).value
    assert abs(z.mean() - mu) < 3 * 0.7 / math.sqrt(n)


def test_reparameterize_gradient_skips_eps(tape):
    mu, lv = leaf(tape, [0.0]), leaf(tape, [0.0])
    z = dc.reparameterize(mu, lv, np.array([2.0]))
    tape.backward(dc.reshape(z, ()))
    assert mu.grad[0] == 1.0
    assert lv.grad[0] == pytest.approx(0.5 * 2.0)


def test_dropout_identity_cases(tape, rng):
    x = leaf(tape, rng.standard_normal(10))
    assert dc.dropout(x, 0.0, True, rng) is x
    assert dc.dropout(x, 0.5, False, rng) is x
    with pytest.raises(ValueError):
        dc.dropout(x, 1.0, True, rng)


def test_dropout_rate_and_scaling(tape):
    rng = np.random.default_rng(9)
    out = dc.dropout(leaf(tape, np.ones(100_000)), 0.3, True, rng).value
    assert abs(np.mean(out == 0) - 0.3) < 0.01
    np.testing.assert_allclose(np.unique(out[out != 0]), [1 / 0.7])


# -- backward ------------------------------------------------------------------------

def test_backward_square(tape):
    x = leaf(tape, [3.0])
    tape.backward(dc.reshape(dc.hadamard(x, x), ()))
    assert x.grad[0] == 6.0


def test_backward_sigmoid_at_zero(tape):
    x = leaf(tape, [0.0])
    tape.backward(dc.reshape(dc.sigmoid(x), ()))
    assert x.grad[0] == 0.25


def test_backward_through_softmax_sum_is_zero(tape, rng):
    v = leaf(tape, rng.standard_normal(5))
    ones = leaf(tape, np.ones((1, 5)))
    tape.backward(dc.reshape(dc.affine(ones, dc.softmax_last(v)), ()))
    np.testing.assert_allclose(v.grad, 0.0, atol=1e-16)


def test_backward_twice_requires_reset(tape):
    x = leaf(tape, [2.0])
    loss = dc.sum_squares(x)
    tape.backward(loss)
    with pytest.raises(dc.TapeError):
        tape.backward(loss)
    tape.reset()
    tape.backward(loss)
    assert x.grad[0] == 4.0


def test_backward_rejects_non_scalar(tape):
    with pytest.raises(dc.TapeError):
        tape.backward(leaf(tape, [1.0, 2.0]))


def test_gradients_accumulate_over_fanout(tape):
    x = leaf(tape, [1.5])
    y = dc.add_n([x, x, dc.scale(x, 2.0)])
    tape.backward(dc.reshape(y, ()))
    assert x.grad[0] == 4.0


def test_replay_is_bit_identical(rng):
    def run():
        r = np.random.default_rng(42)
        tape = dc.Tape()
        w = tape.leaf(r.standard_normal((4, 3)))
        x = tape.leaf(r.standard_normal((5, 3)))
        h = dc.dropout(dc.tanh(dc.affine(w, x)), 0.2, True, r)
        loss = dc.cross_entropy(dc.softmax_last(dc.reshape(h, (5, 4))), r.integers(0, 4, 5))
        tape.backward(loss)
        return loss.value, w.grad.copy()

    (l1, g1), (l2, g2) = run(), run()
    assert l1 == l2
    assert np.array_equal(g1, g2)


# -- gradient checker ------------------------------------------------------------------

def test_grad_check_quadratic_is_tight():
    A = np.array([[2.0, 0.5], [0.5, 1.0]])

    def f(tape, p):
        Ax = dc.affine(tape.constant(A), p["x"])
        return dc.reshape(dc.affine(dc.reshape(p["x"], (1, 2)), Ax), ())

    res = dc.grad_check(f, {"x": np.array([0.3, -1.7])})
    assert res.max_error < 1e-9
    assert res.checked == 2


def test_grad_check_rejects_nondeterministic_f():
    rng = np.random.default_rng(0)

    def f(tape, p):
        return dc.sum_squares(dc.scale(p["x"], float(rng.random())))

    with pytest.raises(ValueError):
        dc.grad_check(f, {"x": np.ones(2)})


def test_grad_check_detects_wrong_rule(monkeypatch):
    monkeypatch.setitem(dc.GRAD_RULES, "tanh", lambda node, g: [g])

    def f(tape, p):
        return dc.sum_squares(dc.tanh(p["x"]))

    assert dc.grad_check(f, {"x": np.array([0.5, -1.0])}).max_error > 1e-2
