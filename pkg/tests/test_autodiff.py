import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.special import ndtr

from credtrans import autodiff as ad
from credtrans.autodiff import Parameter
from gradcheck import check_gradients, projected, projection

finite = st.floats(-20, 20, allow_nan=False)


# ------------------------------------------------------------------ softmax


def test_softmax_uniform_row():
    out = ad.softmax_rows(np.zeros((1, 4))).value
    np.testing.assert_allclose(out, 0.25)


def test_softmax_hand_values():
    out = ad.softmax_rows(np.log([[1.0, 2.0, 3.0]])).value
    np.testing.assert_allclose(out, [[1 / 6, 2 / 6, 3 / 6]], rtol=1e-14)


def test_softmax_empty_raises():
    with pytest.raises(ValueError, match="empty tensor"):
        ad.softmax_rows(np.zeros((0, 3)))


@given(arrays(np.float64, (3, 5), elements=finite), st.floats(-50, 50))
def test_softmax_rows_sum_to_one_and_shift_invariant(x, c):
    y = ad.softmax_rows(x).value
    assert np.all(y > 0) and np.all(y < 1)
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(ad.softmax_rows(x + c).value, y, atol=1e-12)


def test_softmax_large_logits_are_stable():
    y = ad.softmax_rows(np.array([[1000.0, 1000.0, -1000.0]])).value
    np.testing.assert_allclose(y, [[0.5, 0.5, 0.0]])


# --------------------------------------------------------------- layer norm


def test_layer_norm_constant_row_returns_beta():
    out = ad.layer_norm(np.array([[1.0, 1.0]]), np.ones(2), np.zeros(2), eps=1e-5).value
    np.testing.assert_allclose(out, 0.0, atol=1e-12)


def test_layer_norm_already_normalised():
    out = ad.layer_norm(np.array([[-1.0, 1.0]]), np.ones(2), np.zeros(2), eps=0.0).value
    np.testing.assert_allclose(out, [[-1.0, 1.0]], rtol=1e-14)


def test_layer_norm_against_direct_formula():
    x = np.array([0.0, 2.0, 4.0])
    expected = 2.0 * (x - x.mean()) / math.sqrt(x.var()) + 1.0
    out = ad.layer_norm(x[None], np.full(3, 2.0), np.ones(3), eps=0.0).value[0]
    np.testing.assert_allclose(out, expected, rtol=1e-14)
    # population std of (0, 2, 4) is sqrt(8/3), so the standardised ends are -+sqrt(3/2)
    r = math.sqrt(3 / 2)
    np.testing.assert_allclose(out, [1 - 2 * r, 1, 1 + 2 * r], rtol=1e-14)


def test_layer_norm_degenerate_variance():
    with pytest.raises(ValueError, match="degenerate variance"):
        ad.layer_norm(np.array([[3.0, 3.0, 3.0]]), np.ones(3), np.zeros(3), eps=0.0)


@settings(max_examples=50)
@given(arrays(np.float64, (2, 6), elements=finite), st.floats(0.1, 10), st.floats(-10, 10))
def test_layer_norm_affine_invariance(x, a, b):
    if np.min(x.std(axis=1)) < 1e-3:
        return
    g, z = np.ones(6), np.zeros(6)
    base = ad.layer_norm(x, g, z, eps=0.0).value
    moved = ad.layer_norm(a * x + b, g, z, eps=0.0).value
    np.testing.assert_allclose(moved, base, atol=1e-6)
    np.testing.assert_allclose(base.mean(axis=1), 0.0, atol=1e-6)
    np.testing.assert_allclose(base.var(axis=1), 1.0, atol=1e-6)


# -------------------------------------------------------------- activations


def test_activation_values():
    assert ad.gelu(np.array(0.0)).value == 0.0
    assert ad.silu(np.array(0.0)).value == 0.0
    assert ad.sigmoid(np.array(0.0)).value == 0.5
    assert abs(ad.gelu(np.array([1.0])).value[0] - ndtr(1.0)) < 1e-15
    assert abs(ad.gelu(np.array([1.0])).value[0] - 0.841345) < 1e-6


def test_gelu_is_exact_erf_form():
    x = np.linspace(-6, 6, 101)
    np.testing.assert_allclose(ad.gelu(x).value, x * ndtr(x), rtol=1e-13, atol=1e-300)


@pytest.mark.parametrize("name", ad.ACTIVATIONS)
def test_activation_gradients(name, rng):
    p = Parameter(rng.normal(size=(4, 3)))
    w = projection((4, 3), rng)
    assert check_gradients(lambda: projected(ad.activation(name, p), w), [p], rng) < 1e-6


def test_unknown_activation():
    with pytest.raises(ValueError):
        ad.activation("relu6", np.zeros(2))


# ----------------------------------------------------------------- backward


def test_linear_map_gradient_is_input():
    W = Parameter(np.ones((3, 2)))
    x = np.array([[1.0, 2.0, 3.0]])
    with ad.Tape() as tape:
        loss = ad.sum(ad.matmul(x, W))
    ad.backward(tape, loss)
    np.testing.assert_array_equal(W.grad, np.repeat(x.T, 2, axis=1))


def test_softmax_sum_has_zero_gradient():
    v = Parameter(np.array([[0.3, -1.2, 2.0]]))
    with ad.Tape() as tape:
        loss = ad.sum(ad.softmax_rows(v))
    ad.backward(tape, loss)
    np.testing.assert_allclose(v.grad, 0.0, atol=1e-15)


def test_gradients_accumulate_and_reset():
    p = Parameter(np.array([2.0]))
    for _ in range(2):
        with ad.Tape() as tape:
            loss = ad.sum(ad.mul(p, p))
        ad.backward(tape, loss)
    np.testing.assert_allclose(p.grad, [8.0])
    p.zero_grad()
    np.testing.assert_array_equal(p.grad, [0.0])


def test_disconnected_parameter_keeps_zero_grad():
    p, q = Parameter(np.ones(2)), Parameter(np.ones(2))
    with ad.Tape() as tape:
        loss = ad.sum(ad.exp(p))
    ad.backward(tape, loss)
    np.testing.assert_array_equal(q.grad, 0.0)


def test_backward_before_forward():
    with pytest.raises(RuntimeError):
        ad.backward(ad.Tape(), ad.Tensor(np.array(1.0)))


def test_backward_needs_scalar():
    p = Parameter(np.ones(3))
    with ad.Tape() as tape:
        out = ad.exp(p)
    with pytest.raises(ValueError):
        ad.backward(tape, out)


def test_no_recording_outside_tape():
    p = Parameter(np.ones(2))
    out = ad.exp(p)
    assert not out.requires_grad


def test_parameter_ids_are_stable_and_distinct():
    a, b = Parameter(np.zeros(1)), Parameter(np.zeros(1))
    assert a.id != b.id and a.id == a.id
    assert a.grad.shape == a.value.shape


# ------------------------------------------------------------------ dropout


def test_dropout_identity_cases(rng):
    x = rng.normal(size=(5, 5))
    np.testing.assert_array_equal(ad.dropout(x, 0.0, True, rng).value, x)
    np.testing.assert_array_equal(ad.dropout(x, 0.5, False, rng).value, x)


def test_dropout_rate_and_mean():
    rng = np.random.default_rng(0)
    x = np.ones(1_000_000)
    y = ad.dropout(x, 0.01, True, rng).value
    assert abs(np.mean(y == 0) - 0.01) < 0.001
    assert abs(y.mean() - 1.0) < 0.005


@pytest.mark.parametrize("rate", [-0.1, 1.0, 1.5])
def test_dropout_bad_rate(rate, rng):
    with pytest.raises(ValueError):
        ad.dropout(np.ones(3), rate, True, rng)


def test_dropout_is_reproducible():
    x = np.ones((50, 4))
    a = ad.dropout(x, 0.3, True, np.random.default_rng(7)).value
    b = ad.dropout(x, 0.3, True, np.random.default_rng(7)).value
    np.testing.assert_array_equal(a, b)


# ------------------------------------------------------------- primitives


def _primitive_cases(rng):
    A = Parameter(rng.normal(size=(2, 3, 4)))
    B = Parameter(rng.normal(size=(2, 4, 3)))
    C = Parameter(rng.normal(size=(2, 3, 4)))
    pos = Parameter(rng.uniform(0.5, 2.0, size=(3, 4)))
    W = Parameter(rng.normal(size=(4, 5)))
    g, be = Parameter(rng.normal(size=4)), Parameter(rng.normal(size=4))
    table = Parameter(rng.normal(size=(6, 3)))
    return {
        "matmul": (lambda: ad.matmul(A, B), [A, B]),
        "matmul_shared_weight": (lambda: ad.matmul(A, W), [A, W]),
        "transpose": (lambda: ad.transpose(A), [A]),
        "concat_rows": (lambda: ad.concat([A, C], axis=-2), [A, C]),
        "concat_cols": (lambda: ad.concat([A, C], axis=-1), [A, C]),
        "select_row": (lambda: ad.select(A, 1, axis=-2), [A]),
        "add_sub_mul": (lambda: ad.mul(ad.add(A, C), ad.sub(A, C)), [A, C]),
        "scale": (lambda: ad.scale(A, -2.5), [A]),
        "exp_log": (lambda: ad.log(ad.exp(ad.mul(pos, pos))), [pos]),
        "softmax": (lambda: ad.softmax_rows(A), [A]),
        "layer_norm": (lambda: ad.layer_norm(A, g, be), [A, g, be]),
        "sum_mean": (lambda: ad.add(ad.sum(A, axis=1), ad.mean(C, axis=1)), [A, C]),
        "take_rows": (lambda: ad.take_rows(table, np.array([0, 5, 5, 2])), [table]),
        "cumsum_broadcast": (lambda: ad.broadcast_to(ad.cumsum(g), (3, 4)), [g]),
        "stack_reshape": (lambda: ad.reshape(ad.stack([A, C], axis=1), (4, 12)), [A, C]),
    }


@pytest.mark.parametrize("name", list(_primitive_cases(np.random.default_rng(0))))
def test_primitive_gradients(name):
    for point in range(10):
        rng = np.random.default_rng(100 + point)
        fn, params = _primitive_cases(rng)[name]
        w = projection(fn().shape, rng)
        assert check_gradients(lambda: projected(fn(), w), params, rng, max_coords=25) < 1e-4


def test_forward_is_deterministic(rng):
    x = rng.normal(size=(3, 4))
    runs = [ad.layer_norm(ad.gelu(x), np.ones(4), np.zeros(4)).value for _ in range(2)]
    np.testing.assert_array_equal(*runs)
