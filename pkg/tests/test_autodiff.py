import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from seamil.autodiff import (
    ContractError,
    DimensionError,
    Parameter,
    Tape,
    Tensor,
    activation,
    bce_loss,
    conv2d,
    dense,
    global_pool,
    max_pool2d,
    mean,
    sgd_step,
    sigmoid,
    softmax,
    tsum,
)

from gradcheck import analytic_grads, check, projected

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


# -- conv2d -----------------------------------------------------------------


def test_conv_identity_kernel_is_bit_exact():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 7, 3))
    k = np.eye(3).reshape(1, 1, 3, 3)
    assert np.array_equal(conv2d(Tensor(x), Tensor(k)).data, x)


def test_conv_ones_kernel_valid_sums_one_to_nine():
    x = np.arange(1, 10, dtype=float).reshape(3, 3, 1)
    out = conv2d(Tensor(x), Tensor(np.ones((3, 3, 1, 1))), padding="valid")
    assert out.shape == (1, 1, 1)
    assert out.data.item() == 45.0


@pytest.mark.parametrize("k,stride,padding", [(1, 1, "same"), (3, 1, "same"), (3, 2, "same"), (2, 1, "valid"), (3, 2, "valid")])
def test_conv_output_shape(k, stride, padding):
    h, w = 7, 6
    x = Tensor(np.zeros((h, w, 2)))
    out = conv2d(x, Tensor(np.zeros((k, k, 2, 4))), stride, padding)
    pad = k - 1 if padding == "same" else 0
    assert out.shape == ((h + pad - k) // stride + 1, (w + pad - k) // stride + 1, 4)


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 5, 6, 3))
    k = rng.normal(size=(3, 3, 3, 2))
    out = conv2d(Tensor(x), Tensor(k)).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros((2, 5, 6, 2))
    for i in range(5):
        for j in range(6):
            ref[:, i, j] = np.einsum("nabc,abcd->nd", xp[:, i : i + 3, j : j + 3], k)
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv_channel_mismatch_names_axes():
    with pytest.raises(DimensionError, match="channel"):
        conv2d(Tensor(np.zeros((4, 4, 3))), Tensor(np.zeros((3, 3, 2, 1))))


@pytest.mark.parametrize("seed", range(5))
def test_conv_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(4, 4, 2))
    k = rng.normal(size=(3, 3, 2, 2))
    fn = projected(lambda a, b: conv2d(a, b, 1, "same"), rng.normal(size=(4, 4, 2)))
    assert check(fn, [x, k]) <= 1e-5


def test_conv_kernel_grad_of_sum():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(5, 5, 1))
    k = rng.normal(size=(3, 3, 1, 1))
    assert check(lambda a, b: tsum(conv2d(a, b, 2, "valid")), [x, k]) <= 1e-5


# -- pooling ------------------------------------------------------------------


@pytest.mark.parametrize("mode", ["avg", "max"])
def test_global_pool_constant(mode):
    out = global_pool(Tensor(np.full((3, 4, 5), 2.5)), mode)
    assert out.shape == (1, 1, 5)
    assert np.all(out.data == 2.5)


def test_global_pool_two_by_two():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(2, 2, 1))
    assert global_pool(x, "max").data.item() == 4.0
    assert global_pool(x, "avg").data.item() == 2.5


def test_global_max_routes_gradient_to_first_argmax():
    x = Tensor(np.array([[5.0, 1.0], [5.0, 5.0]]).reshape(2, 2, 1), requires_grad=True)
    with Tape() as tape:
        loss = tsum(global_pool(x, "max"))
    tape.backward(loss)
    assert x.grad[:, :, 0].tolist() == [[1.0, 0.0], [0.0, 0.0]]


def test_max_pool_tie_goes_to_first():
    x = Tensor(np.ones((2, 2, 1)), requires_grad=True)
    with Tape() as tape:
        loss = tsum(max_pool2d(x))
    tape.backward(loss)
    assert x.grad[:, :, 0].tolist() == [[1.0, 0.0], [0.0, 0.0]]


@pytest.mark.parametrize("mode", ["avg", "max"])
def test_global_pool_gradient(mode):
    rng = np.random.default_rng(4)
    x = rng.normal(size=(3, 3, 4))
    fn = projected(lambda a: global_pool(a, mode), rng.normal(size=(1, 1, 4)))
    assert check(fn, [x]) <= 1e-6


def test_max_pool_gradient():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(4, 4, 2))
    assert check(projected(max_pool2d, rng.normal(size=(2, 2, 2))), [x]) <= 1e-6


def test_global_pool_empty_is_dimension_error():
    with pytest.raises(DimensionError):
        global_pool(Tensor(np.zeros((0, 3, 2))))


# -- dense ----------------------------------------------------------------------


def test_dense_zero_weights():
    out = dense(Tensor([[1.0, 2.0]]), Tensor(np.zeros((2, 3))), Tensor(np.zeros(3)))
    assert np.all(out.data == 0.0)


def test_dense_hand_example():
    out = dense(Tensor([[1.0, 2.0]]), Tensor(np.eye(2)), Tensor([[1.0, 1.0]]))
    assert out.data.tolist() == [[2.0, 3.0]]


def test_dense_gradient():
    rng = np.random.default_rng(6)
    x, w, b = rng.normal(size=(1, 4)), rng.normal(size=(4, 3)), rng.normal(size=(1, 3))
    assert check(projected(dense, rng.normal(size=(1, 3))), [x, w, b]) <= 1e-6


def test_dense_mismatch():
    with pytest.raises(DimensionError):
        dense(Tensor(np.zeros((1, 3))), Tensor(np.zeros((2, 2))))


# -- activations ----------------------------------------------------------------


def test_activation_values():
    assert activation(Tensor([0.0, 0.0]), "softmax").data.tolist() == [0.5, 0.5]
    assert activation(Tensor(0.0), "sigmoid").item() == 0.5
    assert activation(Tensor(0.0), "tanh").item() == 0.0
    assert activation(Tensor(-1.0), "relu").item() == 0.0
    np.testing.assert_allclose(softmax(Tensor([math.log(1), math.log(3)])).data, [0.25, 0.75], atol=1e-15)


def test_softmax_large_inputs_stay_finite():
    out = softmax(Tensor([1000.0, 1000.0, -1000.0])).data
    np.testing.assert_allclose(out, [0.5, 0.5, 0.0])


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=finite), finite)
def test_softmax_sums_to_one_and_ignores_shifts(x, c):
    p = softmax(Tensor(x)).data
    assert abs(p.sum() - 1.0) <= 1e-9
    np.testing.assert_allclose(softmax(Tensor(x + c)).data, p, atol=1e-9)


@pytest.mark.parametrize("kind", ["relu", "sigmoid", "tanh", "softmax"])
def test_activation_gradients(kind):
    rng = np.random.default_rng(7)
    x = rng.normal(size=(3, 5))
    x[np.abs(x) < 1e-3] = 0.5  # keep relu away from its kink
    assert check(projected(lambda a: activation(a, kind), rng.normal(size=(3, 5))), [x]) <= 1e-6


def test_unknown_activation():
    with pytest.raises(ValueError):
        activation(Tensor([1.0]), "gelu")


# -- bce ------------------------------------------------------------------------


def test_bce_values():
    assert bce_loss(Tensor(0.5), 1).item() == pytest.approx(math.log(2), abs=1e-12)
    assert bce_loss(Tensor(1 - 1e-7), 1).item() == pytest.approx(1e-7, rel=1e-3)
    assert math.isfinite(bce_loss(Tensor(0.0), 1).item())


def test_bce_derivative_at_half():
    (g,) = analytic_grads(lambda p: bce_loss(p, 1.0), [np.array(0.5)])
    assert g == pytest.approx(-2.0, abs=1e-12)
    assert check(lambda p: bce_loss(p, 1.0), [np.array(0.5)]) <= 1e-6


# -- backward / tape ------------------------------------------------------------


def test_backward_sum_gives_ones():
    x = Tensor(np.zeros((2, 3, 4)), requires_grad=True)
    with Tape() as tape:
        loss = tsum(x)
    tape.backward(loss)
    assert np.array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_composite_matches_finite_differences():
    rng = np.random.default_rng(8)
    args = [rng.normal(size=(1, 4)), rng.normal(size=(4, 1)), rng.normal(size=(1, 1))]
    assert check(lambda x, w, b: tsum(sigmoid(dense(x, w, b))), args) <= 1e-5


def test_backward_twice_is_contract_error():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = tsum(x)
    tape.backward(loss)
    with pytest.raises(ContractError):
        tape.backward(loss)


def test_backward_non_scalar_is_contract_error():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ContractError):
        tape.backward(y)


def test_shared_input_gradients_accumulate():
    x = Tensor([3.0], requires_grad=True)
    with Tape() as tape:
        loss = tsum(x * x + x)
    tape.backward(loss)
    assert x.grad.tolist() == [7.0]


def test_mean_gradient():
    rng = np.random.default_rng(9)
    assert check(mean, [rng.normal(size=(3, 4))]) <= 1e-6


# -- sgd --------------------------------------------------------------------------


def _param_with_grad(value, grad, frozen=False):
    p = Parameter("p", np.array([value]), frozen=frozen)
    p.tensor.grad = np.array([grad])
    return p


def test_sgd_single_step():
    p = _param_with_grad(1.0, 1.0)
    sgd_step([p], 0.001)
    assert p.data.item() == pytest.approx(0.999, abs=1e-15)
    assert p.grad is None


def test_sgd_frozen_untouched():
    p = _param_with_grad(1.0, 5.0, frozen=True)
    sgd_step([p], 0.001)
    assert p.data.item() == 1.0


def test_sgd_two_steps_constant_grad():
    p = _param_with_grad(1.0, 0.3)
    sgd_step([p], 0.01)
    p.tensor.grad = np.array([0.3])
    sgd_step([p], 0.01)
    assert p.data.item() == pytest.approx(1.0 - 2 * 0.01 * 0.3, abs=1e-15)


def test_sgd_missing_grad():
    with pytest.raises(ContractError, match="p"):
        sgd_step([Parameter("p", np.ones(2))], 0.1)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 6), elements=finite), arrays(np.float64, st.integers(1, 6), elements=finite))
def test_sgd_zero_lr_is_identity(values, grads):
    n = min(len(values), len(grads))
    p = Parameter("p", values[:n].copy())
    before = p.data.copy()
    p.tensor.grad = grads[:n]
    sgd_step([p], 0.0)
    assert np.array_equal(p.data, before)
