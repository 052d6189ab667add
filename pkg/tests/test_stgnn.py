"""Temporal cell, graph layers, and the composed encoder."""
import numpy as np
import pytest
from scipy.special import expit

import stockdistill.ndgrad as nd
from stockdistill import marketdata as md
from stockdistill.stgnn import (
    STConfig,
    STModel,
    bind_params,
    gat_attention_weights,
    spatial_aggregate,
    st_forward,
    st_forward_bound,
    temporal_encode,
)


def make_model(spatial="gcn", hidden=4, out=4, layers=1, input_dim=3, seed=0):
    cfg = STConfig(spatial_kind=spatial, hidden_dim=hidden,
                   spatial_layers=layers, output_dim=out)
    return STModel.init(cfg, input_dim, np.random.default_rng(seed))


def gru_step_numpy(params, x, h):
    r = expit(x @ params["temporal.0.wxr"] + h @ params["temporal.0.whr"] + params["temporal.0.br"])
    z = expit(x @ params["temporal.0.wxz"] + h @ params["temporal.0.whz"] + params["temporal.0.bz"])
    n = np.tanh(x @ params["temporal.0.wxn"] + r * (h @ params["temporal.0.whn"]) + params["temporal.0.bn"])
    return (1 - z) * n + z * h


# ---------------------------------------------------------------------------
# temporal cell

def test_single_step_equals_cell_from_zero_state():
    model = make_model()
    history = np.random.default_rng(1).normal(size=(5, 1, 3))
    out = temporal_encode(bind_params(model.params, None), history).data
    expected = gru_step_numpy(model.params, history[:, 0, :], np.zeros((5, 4)))
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_two_step_hand_unroll():
    model = make_model(input_dim=1, hidden=3)
    history = np.array([[[0.5], [-1.25]]])  # 1 stock, 2 steps, 1 feature
    out = temporal_encode(bind_params(model.params, None), history).data
    h = np.zeros((1, 3))
    h = gru_step_numpy(model.params, history[:, 0, :], h)
    h = gru_step_numpy(model.params, history[:, 1, :], h)
    np.testing.assert_allclose(out, h, atol=1e-12)


def test_temporal_stock_equivariance():
    model = make_model()
    history = np.random.default_rng(2).normal(size=(6, 4, 3))
    perm = np.random.default_rng(3).permutation(6)
    out = temporal_encode(bind_params(model.params, None), history).data
    out_p = temporal_encode(bind_params(model.params, None), history[perm]).data
    np.testing.assert_allclose(out_p, out[perm], atol=1e-12)


def test_temporal_rejects_nan():
    model = make_model()
    history = np.full((2, 3, 3), np.nan)
    with pytest.raises(nd.ComputeError):
        temporal_encode(bind_params(model.params, None), history)


# ---------------------------------------------------------------------------
# spatial layers

def test_gcn_identity_adjacency_no_mixing():
    # identity A, identity-shaped weights: output is relu of the states
    model = make_model(hidden=4, out=4)
    model.params["spatial.0.w"] = np.eye(4)
    model.params["proj.0.w"] = np.eye(4)
    states = np.random.default_rng(4).normal(size=(1, 5, 4))
    out = spatial_aggregate(model.config, bind_params(model.params, None),
                            nd.constant(states), np.eye(5)).data
    np.testing.assert_allclose(out, np.maximum(states, 0.0), atol=1e-14)


def test_gcn_two_node_hand_computed():
    model = make_model(hidden=2, out=2, input_dim=1)
    adj = np.full((2, 2), 0.5)  # two same-industry stocks, normalized
    states = np.array([[[1.0, 2.0], [3.0, -1.0]]])
    w = model.params["spatial.0.w"]
    pw, pb = model.params["proj.0.w"], model.params["proj.0.b"]
    out = spatial_aggregate(model.config, bind_params(model.params, None),
                            nd.constant(states), adj).data
    mixed = np.array([[[2.0, 0.5], [2.0, 0.5]]])  # 0.5-mix of both rows
    expected = np.maximum(mixed @ w, 0.0) @ pw + pb
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_gat_attention_rows_sum_to_one():
    model = make_model(spatial="gat", hidden=4)
    states = np.random.default_rng(5).normal(size=(6, 4))
    adj = np.kron(np.eye(2), np.full((3, 3), 1 / 3.0))  # two 3-cliques
    weights = gat_attention_weights(model, states, adj)
    np.testing.assert_allclose(weights.sum(axis=1), np.ones(6), atol=1e-12)
    # non-edges receive zero attention
    assert np.all(weights[adj == 0] < 1e-12)


def test_locality_block_diagonal():
    model = make_model(hidden=3, out=3)
    adj = np.kron(np.eye(2), np.full((2, 2), 0.5))
    rng = np.random.default_rng(6)
    states = rng.normal(size=(1, 4, 3))
    perturbed = states.copy()
    perturbed[0, :2] += rng.normal(size=(2, 3))  # poke block 1 only
    bound = bind_params(model.params, None)
    out_a = spatial_aggregate(model.config, bound, nd.constant(states), adj).data
    out_b = spatial_aggregate(model.config, bound, nd.constant(perturbed), adj).data
    np.testing.assert_array_equal(out_a[0, 2:], out_b[0, 2:])


# ---------------------------------------------------------------------------
# composed encoder

def test_forward_shape_contract():
    model = make_model(hidden=16, out=32, input_dim=5)
    history = np.random.default_rng(7).normal(size=(8, 20, 5))
    out = st_forward(model, history, np.eye(8))
    assert out.shape == (8, 32)


def test_zero_history_zero_biases_zero_output():
    model = make_model()
    out = st_forward(model, np.zeros((4, 3, 3)), np.eye(4))
    np.testing.assert_array_equal(out, np.zeros((4, 4)))


@pytest.mark.parametrize("spatial", ["gcn", "gat"])
def test_permutation_equivariance(spatial):
    model = make_model(spatial=spatial, hidden=4, out=3)
    rng = np.random.default_rng(8)
    history = rng.normal(size=(6, 5, 3))
    panel_industry = ["A", "A", "B", "B", "C", "C"]
    same = np.array([[1.0 if (i == j or panel_industry[i] == panel_industry[j]) else 0.0
                      for j in range(6)] for i in range(6)])
    deg = same.sum(1)
    adj = same / np.sqrt(np.outer(deg, deg))
    perm = rng.permutation(6)
    p_mat = np.eye(6)[perm]
    out = st_forward(model, history, adj)
    out_p = st_forward(model, history[perm], p_mat @ adj @ p_mat.T)
    np.testing.assert_allclose(out_p, out[perm], atol=1e-10)


def test_batched_matches_individual():
    model = make_model(hidden=4, out=3)
    rng = np.random.default_rng(9)
    history = rng.normal(size=(3, 5, 6, 3))  # 3 windows, 5 stocks
    adj = np.eye(5)
    batched = st_forward(model, history, adj)
    for b in range(3):
        np.testing.assert_allclose(batched[b], st_forward(model, history[b], adj), atol=1e-12)


def test_determinism():
    model = make_model(spatial="gat")
    history = np.random.default_rng(10).normal(size=(4, 5, 3))
    a = st_forward(model, history, np.eye(4))
    b = st_forward(model, history, np.eye(4))
    np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("spatial", ["gcn", "gat"])
def test_grad_check_full_composition(spatial):
    # fixed instance chosen away from ReLU kinks (central differences straddle them)
    cfg = STConfig(spatial_kind=spatial, hidden_dim=3, spatial_layers=2, output_dim=2)
    model = STModel.init(cfg, 2, np.random.default_rng(12))
    history = np.random.default_rng(13).normal(size=(3, 4, 2))
    panel = np.full((3, 3), 1.0 / 3)

    def loss(params):
        out = st_forward_bound(cfg, params, history, panel)
        return nd.reduce_sum(nd.mul(out, out))

    report = nd.grad_check_params(loss, model.params, tol=1e-4)
    assert report.passed, report


def test_adjacency_shape_mismatch():
    model = make_model()
    with pytest.raises(nd.ShapeError):
        st_forward(model, np.zeros((4, 3, 3)), np.eye(5))


def test_accepts_relation_matrix_object(flat_panel):
    rel = md.build_relation(flat_panel)
    model = make_model(input_dim=5)
    out = st_forward(model, np.random.default_rng(13).normal(size=(4, 6, 5)), rel)
    assert out.shape == (4, 4)
