import math

import numpy as np
import pytest

from gradcheck import numeric_grad, rel_error
from trinity import nn
from trinity.errors import ContractError, NumericError

TOL = 1e-4
SEEDS = range(10)


def _shape(rng):
    return int(rng.integers(1, 6)), int(rng.integers(1, 7))


def _proj(rng, shape):
    # random projection turns any output into a scalar objective
    return rng.normal(size=shape)


@pytest.mark.parametrize("seed", SEEDS)
def test_affine_gradients(seed):
    rng = np.random.default_rng(seed)
    n, i = _shape(rng)
    o = int(rng.integers(1, 6))
    x, W, b = rng.normal(size=(n, i)), rng.normal(size=(i, o)), rng.normal(size=o)
    R = _proj(rng, (n, o))
    f = lambda: float((nn.affine_forward(x, W, b)[0] * R).sum())  # noqa: E731
    dx, dW, db = nn.affine_backward(R, nn.affine_forward(x, W, b)[1])
    for a, p in ((dx, x), (dW, W), (db, b)):
        assert rel_error(a, numeric_grad(f, p)) < TOL


@pytest.mark.parametrize("kind", ["elu", "sigmoid", "softmax"])
@pytest.mark.parametrize("seed", SEEDS)
def test_activation_gradients(kind, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(scale=2.0, size=_shape(rng))
    x[np.abs(x) < 1e-3] = 0.5   # keep ELU away from its kink
    fwd, bwd = nn.LAYERS[kind]
    R = _proj(rng, x.shape)
    f = lambda: float((fwd(x)[0] * R).sum())  # noqa: E731
    assert rel_error(bwd(R, fwd(x)[1]), numeric_grad(f, x)) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_mul_gradients_with_broadcast(seed):
    rng = np.random.default_rng(seed)
    n, f_, d = 3, int(rng.integers(1, 5)), int(rng.integers(1, 4))
    a, b = rng.normal(size=(n, f_, d)), rng.normal(size=(n, f_, 1))
    R = _proj(rng, (n, f_, d))
    f = lambda: float((nn.mul_forward(a, b)[0] * R).sum())  # noqa: E731
    da, db = nn.mul_backward(R, nn.mul_forward(a, b)[1])
    assert rel_error(da, numeric_grad(f, a)) < TOL
    assert rel_error(db, numeric_grad(f, b)) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_concat_and_reduce_gradients(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(3, 2)), rng.normal(size=(3, int(rng.integers(1, 5))))
    R = _proj(rng, (3, 2 + b.shape[1]))
    f = lambda: float((nn.concat_forward([a, b])[0] * R).sum())  # noqa: E731
    da, db = nn.concat_backward(R, nn.concat_forward([a, b])[1])
    assert rel_error(da, numeric_grad(f, a)) < TOL and rel_error(db, numeric_grad(f, b)) < TOL

    x = rng.normal(size=(3, 4, int(rng.integers(1, 5))))
    R2 = _proj(rng, (3, 4))
    g = lambda: float((nn.reduce_mean_per_field_forward(x)[0] * R2).sum())  # noqa: E731
    dx = nn.reduce_mean_per_field_backward(R2, nn.reduce_mean_per_field_forward(x)[1])
    assert rel_error(dx, numeric_grad(g, x)) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_embedding_gradient_matches_one_hot_matmul(seed):
    rng = np.random.default_rng(seed)
    rows, dim = int(rng.integers(3, 9)), int(rng.integers(1, 5))
    table = rng.normal(size=(rows, dim))
    ids = rng.integers(0, rows, size=(4, 3))
    R = _proj(rng, (4, 3, dim))
    out, cache = nn.embedding_forward(ids, table)
    grad = nn.embedding_backward(R, cache)
    one_hot = np.eye(rows)[ids.ravel()]                  # (12, rows)
    assert np.allclose(grad, one_hot.T @ R.reshape(-1, dim), atol=1e-14)
    f = lambda: float((nn.embedding_forward(ids, table)[0] * R).sum())  # noqa: E731
    assert rel_error(grad, numeric_grad(f, table)) < TOL
    untouched = np.setdiff1d(np.arange(rows), ids)
    assert np.all(grad[untouched] == 0)


def test_forward_examples():
    assert nn.elu_forward(np.array([0.0]))[0][0] == 0.0
    assert nn.elu_forward(np.array([1.0]))[0][0] == 1.0
    assert nn.sigmoid_forward(np.array([0.0]))[0][0] == 0.5
    x = np.random.default_rng(0).normal(size=(3, 4))
    assert np.array_equal(nn.affine_forward(x, np.eye(4), np.zeros(4))[0], x)
    out, cache = nn.sigmoid_forward(np.array([0.0]))
    assert nn.sigmoid_backward(np.array([1.0]), cache)[0] == 0.25


def test_bce_examples():
    for y in (0, 1):
        assert nn.loss_bce(np.array([0.5]), np.array([y]))[0] == pytest.approx(math.log(2), abs=1e-15)
    y = np.array([0, 1, 1, 0])
    assert nn.loss_bce(y.astype(float), y)[0] <= 1e-6


def test_bce_through_sigmoid_gives_p_minus_y(rng):
    z = rng.normal(size=6)
    y = rng.integers(0, 2, 6).astype(float)
    p, cache = nn.sigmoid_forward(z)
    _, dp = nn.loss_bce(p, y)
    dz = nn.sigmoid_backward(dp, cache)
    assert np.allclose(dz, (p - y) / 6, atol=1e-12)
    f = lambda: nn.loss_bce(nn.sigmoid_forward(z)[0], y)[0]  # noqa: E731
    assert rel_error(dz, numeric_grad(f, z)) < TOL


def test_softmax_ce_gradient(rng):
    z = rng.normal(size=(5, 4))
    y = rng.integers(0, 4, 5)
    probs = nn.softmax_forward(z)[0]
    _, dz = nn.loss_softmax_ce(probs, y)
    f = lambda: nn.loss_softmax_ce(nn.softmax_forward(z)[0], y)[0]  # noqa: E731
    assert rel_error(dz, numeric_grad(f, z)) < TOL


def test_adam_zero_gradient_fixed_point():
    params = {"w": np.array([1.0, -2.0])}
    state = nn.AdamState.for_params(params)
    nn.adam_step(params, {"w": np.zeros(2)}, state)
    assert np.array_equal(params["w"], [1.0, -2.0])


def test_adam_first_step_size():
    params = {"w": np.array([0.0])}
    state = nn.AdamState.for_params(params)
    nn.adam_step(params, {"w": np.array([1.0])}, state)
    # m_hat = v_hat = 1 -> step = lr / (1 + eps)
    assert params["w"][0] == pytest.approx(-1e-4 / (1 + 1e-6), rel=1e-12)


def test_adam_descends_on_quadratic():
    params = {"w": np.array([1.0])}
    state = nn.AdamState.for_params(params, lr=0.01)
    trace = []
    for _ in range(100):
        nn.adam_step(params, {"w": 2 * params["w"]}, state)
        trace.append(abs(params["w"][0]))
    windows = [trace[i] for i in range(0, 100, 10)]
    assert all(b < a for a, b in zip(windows, windows[1:]))
    assert np.all(state.v["w"] >= 0) and state.t == 100


def test_non_finite_raises_naming_layer():
    with pytest.raises(NumericError) as exc:
        nn.affine_forward(np.array([[np.inf]]), np.ones((1, 1)), np.zeros(1), "tower_click_0")
    assert exc.value.layer == "tower_click_0"


def test_contract_errors():
    with pytest.raises(ContractError):
        nn.affine_forward(np.ones((2, 3)), np.ones((4, 1)), np.zeros(1))
    with pytest.raises(ContractError):
        nn.embedding_forward(np.array([5]), np.ones((3, 2)))
    with pytest.raises(ContractError):
        nn.affine_backward(np.ones((1, 1)), None)


def test_training_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(7)
        params = {"w": rng.normal(size=(4, 3)), "b": np.zeros(3)}
        state = nn.AdamState.for_params(params, lr=0.01)
        x = rng.normal(size=(16, 4))
        for _ in range(20):
            out, c = nn.affine_forward(x, params["w"], params["b"])
            _, gw, gb = nn.affine_backward(out / 16, c)
            nn.adam_step(params, {"w": gw, "b": gb}, state)
        return params["w"].tobytes()
    assert run() == run()
