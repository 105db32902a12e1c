import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from giva.adapters import (
    AdapterConfig,
    BasisPool,
    LoraState,
    VectorAdapterState,
    attach_adapters,
    delta_w,
    init_giva,
    init_lora,
    init_osora,
    init_vera,
    merge,
    merge_model,
    trainable_param_count,
)
from giva.errors import DegeneracyError, DimensionError, RankError
from giva.linalg import orthonormality_residual
from giva.nnmodel import Batch, LinearLayer, forward, linear_model, loss_and_grads, mlp
from giva.oracle import best_rank_r_error, objective_value
from giva.trainer import TrainConfig, train
from giva.datasets import gen_teacher_student

STRATS = ["v_r_u_r", "v_r_u_2r", "v_r_q"]


def test_giva_diagonal_gradient():
    layer = LinearLayer(np.eye(3))
    state = init_giva(layer, np.diag([3.0, 2.0, 1.0]), AdapterConfig(rank=1, svd="full"))
    np.testing.assert_allclose(np.abs(state.A), [[1, 0, 0]], atol=1e-15)
    np.testing.assert_allclose(np.abs(state.B), [[1], [0], [0]], atol=1e-15)
    assert np.array_equal(state.gamma, np.zeros(3)) and np.array_equal(state.lam, np.ones(1))
    assert state.init == "v_r_u_r"


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(STRATS), st.sampled_from(["full", "lowrank", "auto"]))
def test_giva_bases_orthonormal_and_optimal(seed, strategy, svd):
    rng = np.random.default_rng(seed)
    m, d = int(rng.integers(4, 30)), int(rng.integers(4, 30))
    r = int(rng.integers(1, min(m, d) // 2 + 1))
    G = rng.standard_normal((m, d))
    W = rng.standard_normal((m, d))
    layer = LinearLayer(W.copy())
    state = init_giva(layer, G, AdapterConfig(rank=r, init=strategy, seed=seed, svd=svd))
    assert orthonormality_residual(state.A.T) < 1e-10
    assert orthonormality_residual(state.B) < 1e-10
    assert np.array_equal(layer.weight, W)
    if svd == "full":
        assert objective_value(G, state.A, state.B) == pytest.approx(best_rank_r_error(G, r), rel=1e-10)


def test_giva_errors():
    layer = LinearLayer(np.ones((4, 4)))
    with pytest.raises(RankError):
        init_giva(layer, np.random.default_rng(0).standard_normal((4, 4)), AdapterConfig(rank=3, init="v_r_u_2r"))
    with pytest.raises(DegeneracyError):
        init_giva(layer, np.zeros((4, 4)), AdapterConfig(rank=1))
    with pytest.raises(DimensionError):
        init_giva(layer, np.ones((3, 4)), AdapterConfig(rank=1))
    with pytest.raises(ValueError):
        AdapterConfig(init="nope")


def test_strategies_give_equal_objectives():
    G = np.random.default_rng(1).standard_normal((20, 16))
    vals = [objective_value(G, s.A, s.B) for s in
            (init_giva(LinearLayer(np.zeros((20, 16))), G, AdapterConfig(rank=4, init=k, svd="full")) for k in STRATS)]
    assert max(vals) - min(vals) < 1e-9


def test_vera_shared_bases_and_d_initial():
    pool = BasisPool(seed=3)
    cfg = AdapterConfig(method="vera", rank=2, d_initial=0.1)
    a, b = init_vera((5, 4), cfg, pool), init_vera((5, 4), cfg, pool)
    assert a.A is b.A and a.B is b.B
    np.testing.assert_array_equal(a.lam, np.full(2, 0.1))
    assert np.array_equal(a.gamma, np.zeros(5))
    assert pool.materialized == 1
    init_vera((6, 4), cfg, pool)
    assert pool.materialized == 2
    bound = np.sqrt(6 / 4)
    assert np.max(np.abs(a.A)) <= bound and np.max(np.abs(a.B)) <= np.sqrt(6 / 2)


def test_vera_pool_is_order_independent_and_unshared_mode():
    p1, p2 = BasisPool(7), BasisPool(7)
    p1.get(3, 3, 1)
    np.testing.assert_array_equal(p1.get(5, 4, 2)[0], p2.get(5, 4, 2)[0])
    fresh = BasisPool(7, shared=False)
    a, b = fresh.get(5, 4, 2), fresh.get(5, 4, 2)
    assert not np.array_equal(a[0], b[0]) and fresh.materialized == 2


def test_vera_one_pair_for_many_layers():
    model = mlp([6, 6, 6, 6], seed=0)
    states = attach_adapters(model, AdapterConfig(method="vera", rank=3))
    assert len({id(s.A) for s in states.values()}) == 1


def test_osora_diagonal():
    layer = LinearLayer(np.diag([3.0, 2.0, 1.0]))
    state = init_osora(layer, AdapterConfig(method="osora", rank=2))
    np.testing.assert_allclose(layer.weight, np.diag([0.0, 0, 1]), atol=1e-14)
    np.testing.assert_allclose(state.lam, [3, 2], atol=1e-14)
    assert np.array_equal(state.gamma, np.ones(3))


def test_osora_reconstructs_pretrained():
    rng = np.random.default_rng(2)
    W = rng.standard_normal((9, 7))
    layer = LinearLayer(W.copy())
    layer.attach(init_osora(layer, AdapterConfig(method="osora", rank=3)))
    assert np.max(np.abs(merge(layer).weight - W)) < 1e-9
    X = rng.standard_normal((7, 5))
    assert np.max(np.abs(forward(linear_model(W), X)[0] - forward(_wrap(layer), X)[0])) < 1e-9


def _wrap(layer):
    from giva.nnmodel import Dense, Model
    return Model([Dense(layer)])


def test_lora_init():
    cfg = AdapterConfig(method="lora", rank=4)
    state = init_lora((6, 5), cfg)
    assert np.array_equal(delta_w(state), np.zeros((6, 5)))
    assert state.scaling == 2.0 and cfg.alpha == 8.0
    W = np.random.default_rng(3).standard_normal((6, 5))
    layer = LinearLayer(W.copy())
    layer.attach(state)
    X = np.random.default_rng(4).standard_normal((5, 3))
    assert np.array_equal(forward(_wrap(layer), X)[0], W @ X)
    with pytest.raises(ValueError):
        LoraState(np.ones((2, 3)), np.ones((4, 2)), alpha=0.0)


def test_delta_w_examples():
    rng = np.random.default_rng(5)
    z = VectorAdapterState(np.eye(3), np.eye(3), np.ones(3), np.zeros(3), "giva")
    assert np.array_equal(delta_w(z), np.zeros((3, 3)))
    one = VectorAdapterState(np.eye(3), np.eye(3), np.ones(3), np.ones(3), "giva")
    np.testing.assert_array_equal(delta_w(one), np.eye(3))
    m, d, r = 4, 5, 2
    s = VectorAdapterState(rng.standard_normal((r, d)), rng.standard_normal((m, r)), rng.standard_normal(r),
                           rng.standard_normal(m), "vera")
    ref = np.zeros((m, d))
    for i in range(m):
        for j in range(d):
            for k in range(r):
                ref[i, j] += s.gamma[i] * s.B[i, k] * s.lam[k] * s.A[k, j]
    np.testing.assert_allclose(delta_w(s), ref, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["giva", "vera", "osora", "lora"]))
def test_delta_w_rank_bounded(seed, method):
    rng = np.random.default_rng(seed)
    m, d = int(rng.integers(3, 12)), int(rng.integers(3, 12))
    r = int(rng.integers(1, min(m, d) + 1))
    layer = LinearLayer(rng.standard_normal((m, d)))
    cfg = AdapterConfig(method=method, rank=r, init="v_r_q", seed=seed)
    state = attach_adapters(_wrap(layer), cfg, gradients={"0": rng.standard_normal((m, d))})["0"]
    for arr in state.trainable().values():
        arr[...] = rng.standard_normal(arr.shape)
    s = np.linalg.svd(delta_w(state), compute_uv=False)
    assert np.all(s[r:] < 1e-10 * max(s[0], 1.0))


def test_merge_examples_and_errors():
    rng = np.random.default_rng(6)
    W = rng.standard_normal((5, 4))
    model = linear_model(W.copy())
    G = rng.standard_normal((5, 4))
    attach_adapters(model, AdapterConfig(rank=2), gradients={"0": G})
    assert np.array_equal(merge(model.layer("0")).weight, W)
    with pytest.raises(DimensionError):
        merge(LinearLayer(np.ones((3, 3))), model.layer("0").adapter)


@pytest.mark.parametrize("method", ["giva", "vera", "osora", "lora"])
def test_merge_after_training(method):
    train_set, val_set, hidden = gen_teacher_student(12, 10, 2, 256, 0.01, seed=1)
    model = linear_model(hidden.W_pt.copy())
    from giva.gradprobe import estimate_first_step_gradient

    g = estimate_first_step_gradient(model, train_set, 1, 64, 0).gradients
    attach_adapters(model, AdapterConfig(method=method, rank=3), gradients=g)
    train(model, train_set, val_set, TrainConfig(lr=0.02, steps=60, batch_size=32))
    merged = merge_model(model)
    rng = np.random.default_rng(0)
    for _ in range(10):
        X = rng.standard_normal((10, 7))
        assert np.max(np.abs(forward(model, X)[0] - forward(merged, X)[0])) < 1e-9


def test_param_counts():
    big = AdapterConfig(rank=8)
    v = VectorAdapterState(np.zeros((8, 768)), np.zeros((768, 8)), np.ones(8), np.zeros(768), "vera")
    assert trainable_param_count(v) == 776
    lora = init_lora((768, 768), AdapterConfig(method="lora", rank=4))
    assert trainable_param_count(lora) == 6144
    g = VectorAdapterState(np.zeros((64, 2048)), np.zeros((2048, 64)), np.ones(64), np.zeros(2048), "giva")
    ve = VectorAdapterState(np.zeros((1024, 2048)), np.zeros((2048, 1024)), np.ones(1024), np.zeros(2048), "vera")
    assert trainable_param_count(g) < trainable_param_count(ve)
    assert big.alpha == 16.0


def test_frozen_bases_read_only():
    s = init_vera((4, 4), AdapterConfig(method="vera", rank=2))
    with pytest.raises(ValueError):
        s.A[0, 0] = 1.0
    model = linear_model(np.eye(4))
    model.layer("0").attach(s)
    _, g = loss_and_grads(model, Batch(np.eye(4), np.ones((4, 4))))
    assert set(g.adapter["0"]) == {"gamma", "lam"}
