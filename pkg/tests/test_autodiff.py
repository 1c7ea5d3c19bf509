import numpy as np
import pytest

from gcdlab.autodiff import (
    AdamState,
    Tape,
    adam_step,
    eval_and_backprop,
    finite_diff_check,
)
from gcdlab.errors import NumericError, ShapeError
from helpers import random_mlp_tape


def square_tape():
    tape = Tape()
    x = tape.param("x", ())
    loss = tape.mul(x, x)
    return tape, loss


def test_square_loss_and_gradient():
    tape, loss = square_tape()
    val, grads = eval_and_backprop(tape, {"x": np.asarray(3.0)}, loss)
    assert val == 9.0
    assert grads["x"] == 6.0


def test_constant_wrt_param_has_zero_gradient():
    tape = Tape()
    tape.param("x", ())
    c = tape.constant(5.0)
    loss = tape.mul(c, c)
    val, grads = eval_and_backprop(tape, {"x": np.asarray(3.0)}, loss)
    assert val == 25.0
    assert grads["x"] == 0.0


def test_two_layer_perceptron_matches_finite_differences():
    rng = np.random.default_rng(7)
    tape = Tape()
    x = tape.input("x", (1, 10))
    w1 = tape.param("w1", (10, 6))
    b1 = tape.param("b1", (6,))
    w2 = tape.param("w2", (6, 1))
    h = tape.tanh(tape.add(tape.matmul(x, w1), b1))
    out = tape.matmul(h, w2)
    loss = tape.reduce_sum(tape.mul(out, out))
    values = {
        "x": rng.normal(size=(1, 10)),
        "w1": rng.normal(size=(10, 6)) * 0.5,
        "b1": rng.normal(size=(6,)) * 0.1,
        "w2": rng.normal(size=(6, 1)) * 0.5,
    }
    assert finite_diff_check(tape, values, loss, step=1e-5) < 1e-4


def test_finite_diff_quadratic_is_near_exact():
    tape, loss = square_tape()
    assert finite_diff_check(tape, {"x": np.asarray(3.0)}, loss, step=1e-5) < 1e-8


def test_finite_diff_softmax_sum_of_squares():
    tape = Tape()
    x = tape.param("x", (1, 5))
    s = tape.softmax(x)
    loss = tape.reduce_sum(tape.mul(s, s))
    rng = np.random.default_rng(3)
    err = finite_diff_check(tape, {"x": rng.normal(size=(1, 5))}, loss, step=1e-5)
    assert err < 1e-4


def test_finite_diff_identity_is_zero_error():
    # x and step chosen exactly representable so the central difference is exact
    tape = Tape()
    x = tape.param("x", ())
    loss = tape.scale(x, 1.0)
    assert finite_diff_check(tape, {"x": np.asarray(1.5)}, loss, step=0.5) < 1e-12


def test_finite_diff_rejects_nonscalar_loss():
    tape = Tape()
    x = tape.param("x", (3,))
    y = tape.mul(x, x)
    with pytest.raises(ShapeError):
        eval_and_backprop(tape, {"x": np.ones(3)}, y)


def test_random_tapes_match_finite_differences():
    rng = np.random.default_rng(2024)
    for _ in range(25):
        tape, values, loss = random_mlp_tape(rng)
        assert finite_diff_check(tape, values, loss, step=1e-5) < 1e-4


def test_replay_is_bit_identical():
    rng = np.random.default_rng(11)
    tape, values, loss = random_mlp_tape(rng)
    a = tape.forward(values)[loss]
    b = tape.forward(values)[loss]
    assert float(a) == float(b)


def test_softmax_rows_sum_to_one():
    tape = Tape()
    x = tape.input("x", (8, 7))
    s = tape.softmax(x)
    rng = np.random.default_rng(5)
    out = tape.forward({"x": rng.normal(size=(8, 7)) * 10})[s]
    assert np.max(np.abs(out.sum(axis=-1) - 1.0)) < 1e-12


def test_layer_norm_moments():
    tape = Tape()
    x = tape.input("x", (6, 9))
    y = tape.layer_norm(x)
    rng = np.random.default_rng(6)
    out = tape.forward({"x": rng.normal(size=(6, 9)) * 3 + 1})[y]
    assert np.max(np.abs(out.mean(axis=-1))) < 1e-9
    assert np.max(np.abs(out.var(axis=-1) - 1.0)) < 1e-9


def test_shape_mismatch_raises_structured_error():
    tape = Tape()
    tape.input("x", (2, 3))
    with pytest.raises(ShapeError):
        tape.forward({"x": np.zeros((3, 2))})


def test_nonfinite_intermediate_names_op():
    tape = Tape()
    x = tape.input("x", ())
    y = tape.log(x)
    with pytest.raises(NumericError, match="log"):
        tape.forward({"x": np.asarray(-1.0)})
    del y


def test_gather_gradient_scatters():
    tape = Tape()
    x = tape.param("x", (4, 2))
    idx = np.array([0, 0, 3])
    g = tape.gather(x, idx)
    loss = tape.reduce_sum(g)
    _, grads = eval_and_backprop(tape, {"x": np.ones((4, 2))}, loss)
    expected = np.array([[2.0, 2.0], [0.0, 0.0], [0.0, 0.0], [1.0, 1.0]])
    assert np.array_equal(grads["x"], expected)


def test_batched_matmul_gradient():
    tape = Tape()
    a = tape.param("a", (3, 2, 4))
    b = tape.param("b", (4, 5))
    c = tape.matmul(a, b)
    loss = tape.reduce_sum(tape.mul(c, c))
    rng = np.random.default_rng(8)
    values = {"a": rng.normal(size=(3, 2, 4)), "b": rng.normal(size=(4, 5))}
    assert finite_diff_check(tape, values, loss, step=1e-5) < 1e-4


# -- Adam ---------------------------------------------------------------------


def test_adam_zero_gradient_keeps_params():
    params = {"w": np.array([1.0, -2.0])}
    state = AdamState(lr=0.1)
    adam_step(params, {"w": np.zeros(2)}, state)
    assert np.array_equal(params["w"], [1.0, -2.0])
    assert state.step_count == 1


def test_adam_first_step_is_bias_corrected_unit_step():
    # m_hat = 1, v_hat = 1 after one step with g = 1, so the update is
    # lr / (1 + eps) which is 0.1 up to eps.
    params = {"w": np.array(0.0)}
    state = AdamState(lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
    adam_step(params, {"w": np.array(1.0)}, state)
    assert abs(float(params["w"]) + 0.1) < 1e-8


def test_adam_identical_params_get_identical_updates():
    params = {"a": np.array([0.5]), "b": np.array([0.5])}
    grads = {"a": np.array([0.3]), "b": np.array([0.3])}
    state = AdamState(lr=0.05)
    adam_step(params, grads, state)
    assert params["a"][0] == params["b"][0]


def test_adam_rejects_nan_gradient():
    params = {"w": np.array(0.0)}
    state = AdamState()
    with pytest.raises(NumericError, match="w"):
        adam_step(params, {"w": np.array(np.nan)}, state)
