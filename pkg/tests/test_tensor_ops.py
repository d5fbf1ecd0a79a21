import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmfedsim.tensor_ops import (
    MLPSpec,
    NumericError,
    OptimizerState,
    finite_diff_grad,
    init_params,
    mlp_backward,
    mlp_forward,
    optimizer_step,
    relative_error,
    unpack,
)


def naive_forward(spec, params, x):
    """Loop-based re-implementation used as an independent oracle."""
    h = list(x)
    pos = 0
    sizes = spec.layer_sizes
    for layer, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        W = [[params[pos + i * b + j] for j in range(b)] for i in range(a)]
        pos += a * b
        bias = params[pos:pos + b]
        pos += b
        out = []
        for j in range(b):
            s = bias[j] + sum(h[i] * W[i][j] for i in range(a))
            if layer < len(sizes) - 2:
                if spec.activation == "relu":
                    s = max(s, 0.0)
                elif spec.activation == "tanh":
                    s = np.tanh(s)
            out.append(s)
        h = out
    return np.array(h)


def test_param_count_and_layout():
    spec = MLPSpec((3, 4, 2))
    assert spec.n_params == 3 * 4 + 4 + 4 * 2 + 2
    p = np.arange(spec.n_params, dtype=float)
    (W1, b1), (W2, b2) = unpack(spec, p)
    assert W1.shape == (3, 4) and b1.shape == (4,)
    assert W2.shape == (4, 2)
    assert W1[0, 1] == 1.0  # row-major (fan_in, fan_out)


def test_bad_specs_rejected():
    with pytest.raises(ValueError):
        MLPSpec((3,))
    with pytest.raises(ValueError):
        MLPSpec((3, 0, 2))
    with pytest.raises(ValueError):
        MLPSpec((3, 2), activation="gelu")


def test_init_is_seeded_and_bounded():
    spec = MLPSpec((5, 7, 3))
    a, b = init_params(spec, 4), init_params(spec, 4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, init_params(spec, 5))
    for (W, bias), fan_in in zip(unpack(spec, a), (5, 7)):
        assert np.all(np.abs(W) <= 1 / np.sqrt(fan_in))
        assert np.all(bias == 0)


def test_init_mean_monte_carlo():
    spec = MLPSpec((4, 1))
    n = 10_000
    draws = np.array([init_params(spec, s)[0] for s in range(n)])
    se = (0.5 / np.sqrt(3)) / np.sqrt(n)  # uniform(-1/2, 1/2) has sd 1/sqrt(12)
    assert abs(draws.mean()) < 3 * se


def test_identity_network_is_affine():
    spec = MLPSpec((2, 2), activation="identity")
    p = np.array([1.0, 0.0, 0.0, 1.0, 0.5, -0.5])
    y, _ = mlp_forward(spec, p, np.array([2.0, 3.0]))
    assert np.allclose(y, [2.5, 2.5])


def test_hand_example_relu():
    spec = MLPSpec((2, 2, 1))
    # W1 = [[1, -1], [1, 1]], b1 = [0, -10]; W2 = [[2], [3]], b2 = [1]
    p = np.array([1.0, -1.0, 1.0, 1.0, 0.0, -10.0, 2.0, 3.0, 1.0])
    y, _ = mlp_forward(spec, p, np.array([1.0, 2.0]))
    # hidden pre = [3, -9] -> relu [3, 0]; out = 6 + 1
    assert y.shape == (1,) and y[0] == pytest.approx(7.0)


@pytest.mark.parametrize("activation", ["relu", "tanh", "identity"])
def test_forward_matches_loop_oracle(activation):
    rng = np.random.default_rng(3)
    spec = MLPSpec((4, 5, 3, 2), activation)
    p = rng.standard_normal(spec.n_params)
    X = rng.standard_normal((6, 4))
    Y, _ = mlp_forward(spec, p, X)
    for x, y in zip(X, Y):
        assert np.allclose(y, naive_forward(spec, p, x), atol=1e-12)


def test_single_vector_and_batch_agree():
    rng = np.random.default_rng(0)
    spec = MLPSpec((3, 4, 2))
    p = init_params(spec, 0)
    X = rng.standard_normal((5, 3))
    Y, _ = mlp_forward(spec, p, X)
    y2, _ = mlp_forward(spec, p, X[2])
    assert np.allclose(Y[2], y2)


@pytest.mark.parametrize("activation", ["tanh", "identity", "relu"])
@pytest.mark.parametrize("seed", range(4))
def test_backward_matches_finite_differences(activation, seed):
    rng = np.random.default_rng(seed)
    spec = MLPSpec((3, 5, 4, 2), activation)
    p = rng.standard_normal(spec.n_params)
    X = rng.standard_normal((4, 3))
    G = rng.standard_normal((4, 2))

    def f(q):
        return float(np.sum(mlp_forward(spec, q, X)[0] * G))

    _, cache = mlp_forward(spec, p, X)
    g, _ = mlp_backward(spec, p, cache, G)
    assert relative_error(g, finite_diff_grad(f, p)) < 1e-5


def test_input_gradient_matches_finite_differences():
    rng = np.random.default_rng(9)
    spec = MLPSpec((3, 4, 2), "tanh")
    p = rng.standard_normal(spec.n_params)
    x = rng.standard_normal(3)
    gout = np.array([0.3, -1.2])
    _, cache = mlp_forward(spec, p, x)
    _, gx = mlp_backward(spec, p, cache, gout)
    fd = finite_diff_grad(lambda v: float(mlp_forward(spec, p, v)[0] @ gout), x)
    assert relative_error(gx, fd) < 1e-6


def test_backward_is_linear_in_output_gradient():
    rng = np.random.default_rng(1)
    spec = MLPSpec((3, 6, 2))
    p = rng.standard_normal(spec.n_params)
    _, cache = mlp_forward(spec, p, rng.standard_normal((5, 3)))
    g1, g2 = rng.standard_normal((2, 5, 2))
    a = mlp_backward(spec, p, cache, 2.0 * g1 - g2)[0]
    b = 2.0 * mlp_backward(spec, p, cache, g1)[0] - mlp_backward(spec, p, cache, g2)[0]
    assert np.allclose(a, b, atol=1e-12)


def test_stale_cache_rejected():
    spec = MLPSpec((2, 3, 1))
    p = init_params(spec, 0)
    _, cache = mlp_forward(spec, p, np.ones(2))
    with pytest.raises(ValueError):
        mlp_backward(spec, p + 1.0, cache, np.ones(1))


def test_shape_errors():
    spec = MLPSpec((2, 3, 1))
    with pytest.raises(ValueError):
        mlp_forward(spec, init_params(spec, 0), np.ones(3))
    with pytest.raises(ValueError):
        mlp_forward(spec, np.zeros(4), np.ones(2))


def test_finite_diff_exact_on_quadratic():
    A = np.array([[2.0, 0.5], [0.5, 1.0]])
    p = np.array([0.3, -0.7])
    fd = finite_diff_grad(lambda q: 0.5 * q @ A @ q, p)
    assert np.allclose(fd, A @ p, atol=1e-9)


def test_finite_diff_flags_non_finite():
    with pytest.raises(NumericError):
        finite_diff_grad(lambda q: np.inf if q[0] < 0 else 0.0, np.array([0.0]))


def test_adam_first_step_is_learning_rate():
    st_ = OptimizerState("adam", 1e-3)
    p = optimizer_step(st_, np.array([0.0]), np.array([1.0]))
    # bias-corrected m/sqrt(v) = 1, so the move is lr / (1 + eps)
    assert p[0] == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)


def test_adam_two_steps_hand_computed():
    st_ = OptimizerState("adam", 0.1)
    p = optimizer_step(st_, np.array([1.0]), np.array([2.0]))
    p = optimizer_step(st_, p, np.array([-1.0]))
    m = 0.9 * 0.2 + 0.1 * -1.0
    v = 0.999 * 0.004 + 0.001 * 1.0
    expected = 1.0 - 0.1 * (2.0 / (2.0 + 1e-8)) - 0.1 * (m / 0.19) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    assert p[0] == pytest.approx(expected, rel=1e-12)


def test_sgd_momentum_hand_computed():
    st_ = OptimizerState("sgd_momentum", 0.1, momentum=0.5)
    p = optimizer_step(st_, np.array([1.0]), np.array([1.0]))  # v=1, p=0.9
    p = optimizer_step(st_, p, np.array([1.0]))  # v=1.5, p=0.75
    assert p[0] == pytest.approx(0.75)
    st_.reset()
    assert st_.m is None and st_.step == 0


def test_optimizer_rejects_bad_input():
    with pytest.raises(ValueError):
        OptimizerState("rmsprop", 0.1)
    with pytest.raises(ValueError):
        OptimizerState("adam", 0.0)
    st_ = OptimizerState("adam", 0.1)
    with pytest.raises(NumericError):
        optimizer_step(st_, np.zeros(2), np.array([np.nan, 0.0]))
    with pytest.raises(ValueError):
        optimizer_step(st_, np.zeros(2), np.zeros(3))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=2, max_size=4), st.integers(0, 2**31 - 1))
def test_param_count_matches_layout(sizes, seed):
    spec = MLPSpec(tuple(sizes))
    assert sum(fi * fo + fo for _, _, fi, fo in spec.layer_slices()) == spec.n_params
    p = init_params(spec, seed)
    assert p.shape == (spec.n_params,)
