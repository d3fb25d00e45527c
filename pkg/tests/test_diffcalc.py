import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sqdf_lab.diffcalc import (
    CheckpointError,
    ContractError,
    MlpParams,
    NumericError,
    OptimizerState,
    ShapeError,
    Tape,
    adamw_step,
    affine,
    backward,
    concat,
    exp,
    finite_diff_check,
    load_checkpoint,
    log,
    mlp_forward,
    params_digest,
    safe_sqrt,
    save_checkpoint,
    seed_rng,
    softplus,
    spawn_rng,
    sqrt,
    square,
    tanh,
    tensor,
    vmean,
    vsum,
)


def test_tensor_validation():
    assert tensor([1, 2, 3, 4], (2, 2)).shape == (2, 2)
    with pytest.raises(ShapeError):
        tensor([1, 2, 3], (2, 2))
    with pytest.raises(NumericError):
        tensor([1.0, np.nan])


def test_add_mul_gradients_by_hand():
    tape = Tape()
    a = tape.param(np.array([1.0, 2.0]), "a")
    b = tape.param(np.array([3.0, -1.0]), "b")
    g = backward(tape, vsum(a * b + a))
    np.testing.assert_array_equal(g["a"], [4.0, 0.0])
    np.testing.assert_array_equal(g["b"], [1.0, 2.0])


def test_numpy_on_left_defers_to_var():
    tape = Tape()
    a = tape.param(np.array([2.0]), "a")
    out = np.array([3.0]) * a - np.array([1.0])
    assert out.value[0] == 5.0
    assert backward(tape, vsum(out))["a"][0] == 3.0


def test_backward_requires_scalar():
    tape = Tape()
    a = tape.param(np.ones(3), "a")
    with pytest.raises(ContractError):
        backward(tape, a * 2.0)


def test_param_name_collision_rejected():
    tape = Tape()
    tape.param(np.ones(2), "w")
    with pytest.raises(ContractError):
        tape.param(np.ones(2), "w")


def test_unused_param_gets_zero_grad():
    tape = Tape()
    a = tape.param(np.ones(2), "a")
    tape.param(np.ones(3), "b")
    g = backward(tape, vsum(a))
    np.testing.assert_array_equal(g["b"], np.zeros(3))


def test_input_leaf_grad():
    tape = Tape()
    x = tape.input(np.array([[1.0, 2.0]]))
    backward(tape, vsum(square(x)))
    np.testing.assert_array_equal(x.grad, [[2.0, 4.0]])


def _fd_scalar(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        g.flat[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


@pytest.mark.parametrize("op,npf,lo", [
    (tanh, np.tanh, -2.0),
    (softplus, lambda v: np.logaddexp(0, v), -3.0),
    (exp, np.exp, -1.0),
    (log, np.log, 0.5),
    (sqrt, np.sqrt, 0.5),
    (square, np.square, -2.0),
])
def test_unary_ops_match_central_differences(op, npf, lo):
    x0 = np.linspace(lo, lo + 2.5, 6).reshape(2, 3)
    tape = Tape()
    x = tape.param(x0.copy(), "x")
    g = backward(tape, vsum(op(x) * np.arange(1.0, 7.0).reshape(2, 3)))["x"]
    fd = _fd_scalar(lambda v: float(np.sum(npf(v) * np.arange(1.0, 7.0).reshape(2, 3))), x0)
    np.testing.assert_allclose(g, fd, rtol=1e-7, atol=1e-8)


def test_safe_sqrt_zero_gradient_at_zero():
    tape = Tape()
    x = tape.param(np.array([0.0, 4.0]), "x")
    g = backward(tape, vsum(safe_sqrt(x)))["x"]
    np.testing.assert_array_equal(g, [0.0, 0.25])


def test_broadcast_matmul_concat_getitem():
    rng = seed_rng(3)
    W0 = rng.standard_normal((3, 4))
    b0 = rng.standard_normal(4)
    x0 = rng.standard_normal((5, 3))

    def loss(tape):
        W = tape.param(W0, "W")
        b = tape.param(b0, "b")
        h = tanh(affine(x0, W, b))
        h2 = concat([h, h[:, :1] * 2.0], axis=1)
        return vmean(square(h2 @ np.ones((5, 1)) + b[0]))

    assert finite_diff_check({"W": W0, "b": b0}, loss) < 1e-7


def _scalar_mlp(params: MlpParams, x):
    """Plain-python forward pass: the independent oracle for the vectorised one."""
    h = list(x)
    for layer, (W, b) in enumerate(zip(params.weights, params.biases)):
        out = []
        for j in range(W.shape[1]):
            s = float(b[j])
            for i in range(W.shape[0]):
                s += h[i] * float(W[i, j])
            out.append(math.tanh(s) if layer < len(params.weights) - 1 else s)
        h = out
    return h


def test_mlp_seed42_matches_scalar_loop():
    net = MlpParams.init((5, 8, 8, 2), seed_rng(42))
    net.biases = [seed_rng(43).standard_normal(b.shape) for b in net.biases]
    x = seed_rng(44).standard_normal((4, 5))
    fast = mlp_forward(net, x)
    taped = mlp_forward(net, x, Tape()).value
    for row, f, t in zip(x, fast, taped):
        ref = _scalar_mlp(net, row)
        np.testing.assert_allclose(f, ref, rtol=0, atol=1e-13)
        np.testing.assert_array_equal(f, t)


def test_mlp_gradient_fd():
    net = MlpParams.init((3, 4, 2), seed_rng(0))
    x = seed_rng(1).standard_normal((6, 3))
    y = seed_rng(2).standard_normal((6, 2))
    err = finite_diff_check(net.named("n."), lambda tape: vmean(square(mlp_forward(net, x, tape, "n.") - y)))
    assert err < 1e-6


def test_mlp_shape_error():
    net = MlpParams.init((3, 4, 2), seed_rng(0))
    with pytest.raises(ShapeError):
        mlp_forward(net, np.zeros((2, 4)))


def test_finite_diff_step_bounds():
    with pytest.raises(ContractError):
        finite_diff_check({}, lambda t: None, h=0.1)


def _adamw_reference(p, grads, lr, b1, b2, wd, eps):
    """Scalar AdamW written straight from the update rule."""
    p = float(p)
    m = v = 0.0
    out = []
    for k, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p * (1 - lr * wd)
        p = p - lr * (m / (1 - b1**k)) / (math.sqrt(v / (1 - b2**k)) + eps)
        out.append(p)
    return out


def test_adamw_matches_scalar_reference():
    grads = [0.3, -1.2, 0.05, 2.0, -0.7]
    state = OptimizerState(lr=1e-2, weight_decay=0.1)
    p = {"w": np.array([0.8])}
    got = []
    for g in grads:
        adamw_step(state, p, {"w": np.array([g])})
        got.append(p["w"][0])
    np.testing.assert_allclose(got, _adamw_reference(0.8, grads, 1e-2, 0.9, 0.999, 0.1, 1e-8), rtol=1e-14)


def test_adamw_rejects_nan():
    with pytest.raises(NumericError):
        adamw_step(OptimizerState(), {"w": np.ones(1)}, {"w": np.array([np.nan])})


def test_philox_frozen_vector():
    np.testing.assert_allclose(seed_rng(7).random(4), [0.46881749, 0.42614584, 0.3629817, 0.23735391], atol=1e-8)
    np.testing.assert_array_equal(spawn_rng(7, "a", 3).integers(0, 1000, 5), [917, 817, 159, 366, 495])


def test_spawn_streams_independent_and_stable():
    a = spawn_rng(1, "rollout").random(3)
    b = spawn_rng(1, "update").random(3)
    assert not np.allclose(a, b)
    np.testing.assert_array_equal(a, spawn_rng(1, "rollout").random(3))


def test_checkpoint_roundtrip(tmp_path):
    arrays = {"w": seed_rng(0).standard_normal((3, 2)), "s": np.array(2.5), "v": np.arange(4.0)}
    save_checkpoint(tmp_path / "c.sqdf", arrays)
    back = load_checkpoint(tmp_path / "c.sqdf")
    assert list(back) == list(arrays)
    for k in arrays:
        assert back[k].shape == arrays[k].shape
        np.testing.assert_array_equal(back[k], arrays[k])
    assert params_digest(back) == params_digest(arrays)


def test_checkpoint_bad_magic_and_version(tmp_path):
    p = tmp_path / "bad.sqdf"
    p.write_bytes(b"NOPE\x01\x00\x00\x00")
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
    p.write_bytes(b"SQDF\x02\x00\x00\x00")
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
    save_checkpoint(p, {"w": np.ones(10)})
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(p)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 2), elements=st.floats(-3, 3)), arrays(np.float64, (2, 2), elements=st.floats(-3, 3)))
def test_affine_gradient_property(x0, W0):
    # d/dW sum(x W) = x^T 1 exactly
    tape = Tape()
    W = tape.param(W0.copy(), "W")
    g = backward(tape, vsum(affine(x0, W, np.zeros(2))))["W"]
    np.testing.assert_allclose(g, x0.T @ np.ones((3, 2)), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (4,), elements=st.floats(-5, 5)))
def test_tanh_gradient_property(x0):
    tape = Tape()
    x = tape.param(x0.copy(), "x")
    g = backward(tape, vsum(tanh(x)))["x"]
    np.testing.assert_allclose(g, 1 - np.tanh(x0) ** 2, atol=1e-15)


def test_zero_and_identity_networks():
    z = MlpParams([np.zeros((2, 3)), np.zeros((3, 2))], [np.zeros(3), np.zeros(2)])
    np.testing.assert_array_equal(mlp_forward(z, np.array([[3.0, -7.0]])), [[0.0, 0.0]])
    ident = MlpParams([np.eye(2)], [np.zeros(2)])
    np.testing.assert_array_equal(mlp_forward(ident, np.array([[1.0, 2.0]])), [[1.0, 2.0]])


def test_mlp_seed42_frozen_output():
    net = MlpParams.init((2, 8, 2), seed_rng(42))
    x = np.array([[0.5, -0.5]])
    frozen = [0.35292817089526096, -0.19358319372754637]
    np.testing.assert_allclose(mlp_forward(net, x)[0], frozen, rtol=0, atol=1e-15)
    np.testing.assert_allclose(_scalar_mlp(net, x[0]), frozen, rtol=0, atol=1e-15)


def test_simple_gradients():
    tape = Tape()
    x = tape.param(np.array([3.0]), "x")
    assert backward(tape, vsum(square(x)))["x"][0] == 6.0
    tape = Tape()
    x = tape.param(np.array([3.0, 1.0]), "x")
    assert np.all(backward(tape, vsum(x * 0.0 + 5.0))["x"] == 0.0)


def test_fd_check_quadratic_and_tanh_mlp():
    w = np.array([1.0, -2.0, 0.5])
    assert finite_diff_check({"w": w}, lambda tape: vsum(square(tape.param(w, "w")))) < 1e-8
    net = MlpParams.init((2, 6, 1), seed_rng(7))
    x = seed_rng(8).standard_normal((5, 2))
    assert finite_diff_check(net.named("m."), lambda tape: vmean(square(mlp_forward(net, x, tape, "m.")))) < 1e-4


def test_adamw_single_step_cases():
    st = OptimizerState(lr=0.1, weight_decay=0.0)
    p = {"p": np.array([1.0])}
    adamw_step(st, p, {"p": np.array([1.0])})
    assert p["p"][0] == pytest.approx(0.9, abs=1e-7)

    st = OptimizerState(lr=0.1, weight_decay=0.0)
    p = {"p": np.array([2.0])}
    adamw_step(st, p, {"p": np.array([0.0])})
    assert p["p"][0] == 2.0 and st.step == 1

    st = OptimizerState(lr=0.1, weight_decay=0.1)
    p = {"p": np.array([2.0])}
    adamw_step(st, p, {"p": np.array([0.0])})
    assert p["p"][0] == pytest.approx(2.0 * (1 - 0.01), rel=1e-15)
