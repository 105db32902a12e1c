import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from giva.adapters import AdapterConfig, LoraState, VectorAdapterState, attach_adapters
from giva.errors import ContractError, DimensionError, NumericalError, RankError
from giva.nnmodel import (
    Batch,
    Dense,
    LinearLayer,
    Model,
    SelfAttention,
    adapter_backward,
    forward,
    frozen_tensors,
    linear_model,
    loss_and_full_grad,
    loss_and_grads,
    loss_value,
    mlp,
    trainable_parameters,
)
from giva.oracle import fd_param_grad, random_adapted_model, relative_error


def _vector_state(m, d, r, rng, gamma=None, lam=None):
    A = np.linalg.qr(rng.standard_normal((d, r)))[0].T
    B = np.linalg.qr(rng.standard_normal((m, r)))[0]
    gamma = np.zeros(m) if gamma is None else gamma
    lam = np.ones(r) if lam is None else lam
    return VectorAdapterState(A, B, lam, gamma, "giva")


def test_zero_gamma_preserves_output():
    rng = np.random.default_rng(0)
    W = rng.standard_normal((5, 4))
    model = linear_model(W)
    model.layer("0").attach(_vector_state(5, 4, 2, rng))
    X = rng.standard_normal((4, 6))
    np.testing.assert_array_equal(forward(model, X)[0], W @ X)


def test_identity_adapter_adds_identity():
    rng = np.random.default_rng(1)
    W = rng.standard_normal((3, 3))
    model = linear_model(W)
    model.layer("0").attach(VectorAdapterState(np.eye(3), np.eye(3), np.ones(3), np.ones(3), "giva"))
    X = rng.standard_normal((3, 4))
    np.testing.assert_allclose(forward(model, X)[0], (W + np.eye(3)) @ X, atol=1e-14)


def test_two_layer_relu_matches_scalar_reference():
    rng = np.random.default_rng(2)
    W1, b1 = rng.standard_normal((4, 3)), rng.standard_normal(4)
    W2, b2 = rng.standard_normal((2, 4)), rng.standard_normal(2)
    model = Model([Dense(LinearLayer(W1, b1), "relu"), Dense(LinearLayer(W2, b2))])
    X = rng.standard_normal((3, 5))
    out = forward(model, X)[0]
    for col in range(5):
        hidden = []
        for i in range(4):
            s = b1[i]
            for j in range(3):
                s += W1[i, j] * X[j, col]
            hidden.append(max(s, 0.0))
        for k in range(2):
            s = b2[k]
            for i in range(4):
                s += W2[k, i] * hidden[i]
            assert out[k, col] == pytest.approx(s, abs=1e-13)


def test_shape_mismatch_names_layer():
    model = mlp([3, 4, 2])
    with pytest.raises(DimensionError, match="'0'"):
        forward(model, np.zeros((5, 2)))
    with pytest.raises(DimensionError):
        Model([Dense(LinearLayer(np.ones((4, 3)))), Dense(LinearLayer(np.ones((2, 5))))])


def test_mse_single_example_gradient():
    rng = np.random.default_rng(3)
    W = rng.standard_normal((3, 4))
    x, y = rng.standard_normal((4, 1)), rng.standard_normal((3, 1))
    loss, grads = loss_and_full_grad(linear_model(W), Batch(x, y))
    np.testing.assert_allclose(grads.weight["0"], (W @ x - y) @ x.T, atol=1e-14)
    assert loss == pytest.approx(0.5 * np.sum((W @ x - y) ** 2))


def test_cross_entropy_uniform_logits():
    n = 4
    model = Model([Dense(LinearLayer(np.zeros((3, 2))), "softmax")], "cross_entropy")
    labels = np.array([0, 1, 2, 0])
    X = np.random.default_rng(4).standard_normal((2, n))
    loss, grads = loss_and_full_grad(model, Batch(X, labels))
    assert loss == pytest.approx(np.log(3.0))
    dlogits = np.full((3, n), 1 / 3)
    dlogits[labels, np.arange(n)] -= 1
    np.testing.assert_allclose(grads.weight["0"], (dlogits / n) @ X.T, atol=1e-15)


def test_cross_entropy_without_softmax_block_matches_fused():
    rng = np.random.default_rng(5)
    W = rng.standard_normal((3, 4))
    X, labels = rng.standard_normal((4, 6)), rng.integers(0, 3, 6)
    fused = Model([Dense(LinearLayer(W.copy()), "softmax")], "cross_entropy")
    logits = Model([Dense(LinearLayer(W.copy()))], "cross_entropy")
    la, ga = loss_and_full_grad(fused, Batch(X, labels))
    lb, gb = loss_and_full_grad(logits, Batch(X, labels))
    assert la == pytest.approx(lb, rel=1e-14)
    np.testing.assert_allclose(ga.weight["0"], gb.weight["0"], atol=1e-15)


def test_non_finite_loss_raises():
    model = linear_model(np.full((2, 2), 1e200))
    with pytest.raises(NumericalError), np.errstate(over="ignore"):
        loss_and_full_grad(model, Batch(np.full((2, 1), 1e200), np.zeros((2, 1))))


def test_lambda_gradient_zero_at_gamma_zero():
    rng = np.random.default_rng(6)
    model = linear_model(rng.standard_normal((6, 5)))
    layer = model.layer("0")
    layer.attach(_vector_state(6, 5, 3, rng))
    _, g = loss_and_grads(model, Batch(rng.standard_normal((5, 8)), rng.standard_normal((6, 8))))
    assert np.array_equal(g.adapter["0"]["lam"], np.zeros(3))


def test_gamma_gradient_is_diagonal_of_projected_gradient():
    rng = np.random.default_rng(7)
    W = rng.standard_normal((6, 5))
    batch = Batch(rng.standard_normal((5, 8)), rng.standard_normal((6, 8)))
    G = loss_and_full_grad(linear_model(W), batch)[1].weight["0"]
    model = linear_model(W)
    state = _vector_state(6, 5, 3, rng)
    model.layer("0").attach(state)
    _, g = loss_and_grads(model, batch)
    np.testing.assert_allclose(g.adapter["0"]["gamma"], np.diag(G @ state.A.T @ state.B.T), atol=1e-14)
    # merged-weight gradient at a function-preserving init equals the full fine-tuning gradient
    assert np.max(np.abs(g.weight["0"] - G)) <= 1e-12


METHODS = ["giva", "vera", "osora", "lora"]


@pytest.mark.parametrize("method", METHODS)
@pytest.mark.parametrize("kind", ["mlp", "attention"])
def test_gradients_match_finite_differences(method, kind):
    rng = np.random.default_rng([METHODS.index(method), kind == "attention"])
    for _ in range(3):
        model, batch = random_adapted_model(rng, method, kind)
        _, grads = loss_and_grads(model, batch)
        for name, layer in model.adapted_layers():
            for p, arr in layer.adapter.trainable().items():
                fd = fd_param_grad(model, batch, arr, 1e-5)
                assert relative_error(grads.adapter[name][p], fd) < 1e-6, (name, p)


def test_weight_gradients_match_finite_differences():
    rng = np.random.default_rng(8)
    for kind in ("mlp", "attention"):
        model, batch = random_adapted_model(rng, "vera", kind)
        _, grads = loss_and_grads(model, batch)
        for name, layer in model.layers():
            fd = fd_param_grad(model, batch, layer.weight, 1e-5)
            assert relative_error(grads.weight[name], fd) < 1e-6


def test_adapter_backward_direct_and_contracts():
    rng = np.random.default_rng(9)
    W = rng.standard_normal((4, 5))
    layer = LinearLayer(W, name="L")
    state = _vector_state(4, 5, 2, rng, gamma=rng.standard_normal(4), lam=rng.standard_normal(2))
    layer.attach(state)
    model = Model([Dense(layer)])
    batch = Batch(rng.standard_normal((5, 3)), rng.standard_normal((4, 3)))
    out, _ = forward(model, batch)
    upstream = (out - batch.targets) / 3
    g = adapter_backward(layer, state, upstream, batch.inputs)
    _, full = loss_and_grads(model, batch)
    np.testing.assert_allclose(g["gamma"], full.adapter["L"]["gamma"], atol=1e-14)
    np.testing.assert_allclose(g["lam"], full.adapter["L"]["lam"], atol=1e-14)
    Gp = upstream @ batch.inputs.T
    np.testing.assert_allclose(g["gamma"], np.diag(Gp @ state.A.T @ np.diag(state.lam) @ state.B.T), atol=1e-14)
    np.testing.assert_allclose(g["lam"], np.diag(state.B.T @ np.diag(state.gamma) @ Gp @ state.A.T), atol=1e-14)
    with pytest.raises(ContractError):
        adapter_backward(layer, state, upstream, None)
    other = _vector_state(4, 5, 2, rng)
    with pytest.raises(ContractError):
        adapter_backward(layer, other, upstream, batch.inputs)


def test_stale_cache_rejected():
    from giva.nnmodel import backward

    rng = np.random.default_rng(10)
    model = linear_model(rng.standard_normal((3, 3)))
    batch = Batch(rng.standard_normal((3, 2)), rng.standard_normal((3, 2)))
    _, cache = forward(model, batch)
    model.layer("0").attach(_vector_state(3, 3, 1, rng))
    with pytest.raises(ContractError):
        backward(model, cache, batch)


def test_attach_validates_shape_and_rank():
    rng = np.random.default_rng(11)
    layer = LinearLayer(np.zeros((4, 3)))
    with pytest.raises(DimensionError):
        layer.attach(_vector_state(3, 4, 1, rng))
    with pytest.raises(RankError):
        VectorAdapterState(np.ones((4, 3)), np.ones((4, 4)), np.ones(4), np.zeros(4), "giva")


def test_attention_model_layers_and_softmax_rules():
    rng = np.random.default_rng(12)
    e = 3
    att = SelfAttention(*[LinearLayer(rng.standard_normal((e, e))) for _ in range(4)], seq_len=2)
    model = Model([att, Dense(LinearLayer(rng.standard_normal((2, 6))))])
    assert [n for n, _ in model.layers()] == ["0.q", "0.k", "0.v", "0.o", "1"]
    with pytest.raises(ValueError):
        Model([Dense(LinearLayer(np.ones((2, 2))), "softmax")], "mse")


def test_trainable_and_frozen_views():
    rng = np.random.default_rng(13)
    model = mlp([4, 5, 3], seed=1)
    attach_adapters(model, AdapterConfig(method="lora", rank=2))
    params = trainable_parameters(model)
    assert sorted(params) == ["0.A", "0.B", "1.A", "1.B"]
    params["0.B"] += 1.0
    assert np.all(model.layer("0").adapter.B == 1.0)
    frozen = frozen_tensors(model)
    assert {"0.weight", "0.bias", "1.weight", "1.bias"} <= set(frozen)
    assert isinstance(model.layer("0").adapter, LoraState)
    assert loss_value(model, Batch(rng.standard_normal((4, 2)), rng.standard_normal((3, 2)))) >= 0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_batch_target_validation(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 6))
    X = rng.standard_normal((3, n))
    with pytest.raises(DimensionError):
        Batch(X, rng.standard_normal((2, n + 1)))
    assert Batch(X, rng.integers(0, 3, n)).targets.dtype == np.intp
