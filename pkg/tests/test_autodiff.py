import math
import zlib

import numpy as np
import pytest

from recurrent_iptw import autodiff as ad

N_CONFIGS = 100
TOL = 1e-4


def _shape(rng):
    return tuple(int(s) for s in rng.integers(1, 4, size=int(rng.integers(1, 3))))


def _unary_cases():
    return {
        "sigmoid": (ad.sigmoid, None),
        "log_sigmoid": (ad.log_sigmoid, None),
        "tanh": (ad.tanh, None),
        "exp": (ad.exp, None),
        "log": (ad.log, "positive"),
        "softmax": (lambda x: ad.softmax(x, axis=-1), None),
        "log_softmax": (lambda x: ad.log_softmax(x, axis=-1), None),
        "neg": (lambda x: -x, None),
        "sum_axis0": (lambda x: ad.sum(x, axis=0), None),
        "mean": (lambda x: ad.mean(x), None),
    }


@pytest.mark.parametrize("name", list(_unary_cases()))
def test_unary_ops_match_finite_differences(name):
    op, domain = _unary_cases()[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = 0.0
    for _ in range(N_CONFIGS):
        shape = _shape(rng)
        x = rng.uniform(0.2, 2.0, size=shape) if domain == "positive" else rng.normal(size=shape)
        probe = rng.normal(size=np.shape(op(ad.Tape().constant(x)).value))

        def loss(P):
            return ad.sum(op(P["x"]) * probe)

        worst = max(worst, ad.grad_check(loss, {"x": x}))
    assert worst < TOL


BINARY = {
    "add": ad.add, "sub": ad.sub, "mul": ad.mul,
    "radd": lambda a, b: 1.5 + a + b, "rsub": lambda a, b: 2.0 - a - b, "rmul": lambda a, b: 3.0 * a * b,
}


@pytest.mark.parametrize("name", list(BINARY))
def test_broadcasting_binary_ops_match_finite_differences(name):
    op = BINARY[name]
    rng = np.random.default_rng(len(name))
    worst = 0.0
    for _ in range(N_CONFIGS):
        shape = _shape(rng)
        other = tuple(s if rng.random() < 0.6 else 1 for s in shape)[-int(rng.integers(1, len(shape) + 1)):]
        a, b = rng.normal(size=shape), rng.normal(size=other)
        probe = rng.normal(size=shape)
        worst = max(worst, ad.grad_check(lambda P: ad.sum(op(P["a"], P["b"]) * probe), {"a": a, "b": b}))
    assert worst < TOL


def test_matmul_matches_finite_differences():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(N_CONFIGS):
        n, m, k = rng.integers(1, 5, size=3)
        kind = int(rng.integers(0, 3))
        A = rng.normal(size=(n, m)) if kind != 2 else rng.normal(size=m)
        B = rng.normal(size=(m, k)) if kind != 1 else rng.normal(size=m)
        out_shape = np.shape(A @ B)
        probe = rng.normal(size=out_shape)
        worst = max(worst, ad.grad_check(lambda P: ad.sum(ad.matmul(P["A"], P["B"]) * probe), {"A": A, "B": B}))
    assert worst < TOL


def test_where_and_concat_match_finite_differences():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(N_CONFIGS):
        shape = _shape(rng)
        cond = rng.random(shape) < 0.5
        a, b = rng.normal(size=shape), rng.normal(size=shape)
        probe_w = rng.normal(size=shape)
        probe_c = rng.normal(size=shape[:-1] + (2 * shape[-1],))

        def loss(P):
            return (ad.sum(ad.where(cond, P["a"], P["b"]) * probe_w)
                    + ad.sum(ad.concat([P["a"], ad.tanh(P["b"])], axis=-1) * probe_c))

        worst = max(worst, ad.grad_check(loss, {"a": a, "b": b}))
    assert worst < TOL


def test_sigmoid_gradient_at_zero_is_quarter():
    tape = ad.Tape()
    w = tape.param("w", np.array(0.0))
    assert ad.backward(ad.sigmoid(w * 1.0))["w"] == pytest.approx(0.25, abs=1e-15)


def test_two_layer_network_gradients():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(5, 3))
    params = {"W1": rng.normal(size=(3, 4)), "W2": rng.normal(size=(4, 1))}
    err = ad.grad_check(lambda P: ad.mean(ad.sigmoid(ad.tanh(X @ P["W1"]) @ P["W2"])), params)
    assert err < 1e-7


def test_matmul_shape_mismatch_names_op_and_shapes():
    tape = ad.Tape()
    a = tape.param("a", np.ones((2, 3)))
    b = tape.param("b", np.ones((2, 3)))
    with pytest.raises(ad.ShapeError) as info:
        ad.matmul(a, b)
    assert "matrix-multiply" in str(info.value) and "(2, 3)" in str(info.value)


def test_add_incompatible_broadcast_raises_shape_error():
    tape = ad.Tape()
    with pytest.raises(ad.ShapeError):
        ad.add(tape.param("a", np.ones((2, 3))), tape.param("b", np.ones((4,))))


def test_log_of_non_positive_is_domain_error():
    tape = ad.Tape()
    with pytest.raises(ad.DomainError):
        ad.log(tape.param("x", np.array([1.0, 0.0])))


def test_unreachable_parameter_gets_zero_gradient():
    tape = ad.Tape()
    x = tape.param("x", np.array([1.0, 2.0]))
    y = tape.param("y", np.array([[3.0]]))
    grads = ad.backward(ad.sum(x * x))
    np.testing.assert_array_equal(grads["x"], [2.0, 4.0])
    np.testing.assert_array_equal(grads["y"], np.zeros((1, 1)))


def test_non_scalar_loss_rejected():
    tape = ad.Tape()
    x = tape.param("x", np.ones(3))
    with pytest.raises(ad.ShapeError):
        ad.backward(x * 2.0)


def test_reused_node_accumulates_gradient():
    tape = ad.Tape()
    x = tape.param("x", np.array(3.0))
    h = x * x
    loss = h + h * x  # d/dx (x^2 + x^3) = 2x + 3x^2
    assert float(ad.backward(loss)["x"]) == pytest.approx(2 * 3 + 3 * 9)


def test_adam_first_step_moves_by_learning_rate():
    params = {"w": np.array(0.5)}
    state = ad.AdamState(lr=1e-3)
    new, state = ad.adam_step(params, {"w": np.array(1.0)}, state)
    # m_hat = 1, v_hat = 1 -> step = lr / (1 + eps)
    assert float(new["w"]) == pytest.approx(0.5 - 1e-3 / (1.0 + 1e-8), abs=1e-15)


def test_adam_matches_hand_evaluation_over_steps():
    rng = np.random.default_rng(3)
    grads = rng.normal(size=(5, 4))
    p = rng.normal(size=4)
    state = ad.AdamState(lr=0.01, beta1=0.8, beta2=0.95, eps=1e-6)
    params = {"p": p.copy()}
    m = np.zeros(4)
    v = np.zeros(4)
    expected = p.copy()
    for t, g in enumerate(grads, start=1):
        params, state = ad.adam_step(params, {"p": g}, state)
        m = 0.8 * m + 0.2 * g
        v = 0.95 * v + 0.05 * g * g
        expected = expected - 0.01 * (m / (1 - 0.8 ** t)) / (np.sqrt(v / (1 - 0.95 ** t)) + 1e-6)
    np.testing.assert_allclose(params["p"], expected, rtol=0, atol=1e-14)


def test_adam_missing_gradient_is_error():
    with pytest.raises(KeyError):
        ad.adam_step({"a": np.zeros(2), "b": np.zeros(1)}, {"a": np.zeros(2)}, ad.AdamState())


def test_clip_grad_norm_rescales_to_max():
    grads = {"a": np.array([3.0]), "b": np.array([[4.0]])}
    clipped, norm = ad.clip_grad_norm(grads, 1.0)
    assert norm == pytest.approx(5.0)
    total = math.sqrt(sum(float(np.sum(g * g)) for g in clipped.values()))
    assert total == pytest.approx(1.0)
    same, _ = ad.clip_grad_norm(grads, 10.0)
    assert same is grads


def test_numpy_arrays_on_the_left_stay_on_tape():
    tape = ad.Tape()
    W = tape.param("W", np.eye(2))
    out = np.array([[1.0, 2.0]]) @ W
    assert isinstance(out, ad.Tensor)
    np.testing.assert_array_equal(ad.backward(ad.sum(out))["W"], [[1.0, 1.0], [2.0, 2.0]])


def test_small_forward_examples():
    tape = ad.Tape()
    assert float(ad.sigmoid(tape.constant(0.0)).value) == 0.5
    M = np.random.default_rng(0).normal(size=(3, 3))
    np.testing.assert_array_equal(ad.matmul(tape.constant(np.eye(3)), tape.constant(M)).value, M)
    np.testing.assert_array_equal(ad.softmax(tape.constant(np.zeros(2))).value, [0.5, 0.5])


def test_sum_gradient_is_ones():
    tape = ad.Tape()
    p = tape.param("p", np.array([1.0, 2.0, 3.0]))
    np.testing.assert_array_equal(ad.backward(ad.sum(p))["p"], [1.0, 1.0, 1.0])


def test_adam_zero_gradient_leaves_parameters():
    params = {"w": np.array([1.0, -2.0])}
    state = ad.AdamState()
    for _ in range(10):
        params, state = ad.adam_step(params, {"w": np.zeros(2)}, state)
    np.testing.assert_array_equal(params["w"], [1.0, -2.0])


def test_adam_converges_on_quadratic_bowl():
    params, state = {"w": np.array(0.0)}, ad.AdamState(lr=1e-2)
    for _ in range(5000):
        tape = ad.Tape()
        w = tape.param("w", params["w"])
        d = w - 3.0
        params, state = ad.adam_step(params, ad.backward(d * d), state)
    assert abs(float(params["w"]) - 3.0) < 1e-2


def test_grad_check_linear_and_constant():
    x = np.array([0.3, -1.2, 2.0])
    assert ad.grad_check(lambda P: ad.sum(P["w"] * x), {"w": np.array([1.0, 2.0, 3.0])}) < 1e-8
    assert ad.grad_check(lambda P: ad.sum(P["w"] * 0.0) + 1.0, {"w": np.ones(2)}) == 0.0
