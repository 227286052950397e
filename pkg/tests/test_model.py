import numpy as np
import pytest

from wvgnn import tensor as T
from wvgnn.exceptions import ShapeError
from wvgnn.graph import Permutation, WvgGraph, apply_permutation, check_model_equivariance, permute_rows
from wvgnn.model import MESSAGE_WIDTH, IcgnnModel, icgnn_forward, icgnn_layer


def small_model(d2=3, d3=2, **kw):
    return IcgnnModel(d2, d3, message_hidden=(8,), update_hidden=(8,), seed=5, **kw)


def graph_from(xrc, gamma, edge, mask):
    v = len(xrc)
    return WvgGraph(np.asarray(xrc, float), np.asarray(gamma, float), np.asarray(edge, float),
                    np.ones(v), np.asarray(mask, bool))


def dense_graph(rng, v, d2=3, d3=2):
    mask = ~np.eye(v, dtype=bool)
    return graph_from(rng.standard_normal((v, d2)), rng.uniform(0, 1, (v, d3)),
                      rng.standard_normal((v, v, d2)) * mask[..., None], mask)


def _update(model, l, xrc, gamma, msg):
    return model.layer(l)[1](np.concatenate([xrc, gamma, msg])[None]).data[0]


def _message(model, l, xrc, gamma, edge):
    return model.layer(l)[0](np.concatenate([xrc, gamma, edge])[None]).data[0]


def test_single_in_neighbor_message(rng):
    m = small_model()
    mask = np.array([[False, True], [False, False]])  # only edge 0 -> 1
    edge = np.zeros((2, 2, 3))
    edge[0, 1] = rng.standard_normal(3)
    g = graph_from(rng.standard_normal((2, 3)), rng.uniform(0, 1, (2, 2)), edge, mask)
    out = icgnn_layer(m.layer(0), g, g.target_features[None]).data[0]
    msg = _message(m, 0, g.channel_features[0], g.target_features[0], edge[0, 1])
    np.testing.assert_allclose(out[1], _update(m, 0, g.channel_features[1], g.target_features[1], msg), atol=1e-14)
    # node 0 has no in-neighbors: zero message
    np.testing.assert_allclose(out[0], _update(m, 0, g.channel_features[0], g.target_features[0],
                                               np.zeros(MESSAGE_WIDTH)), atol=1e-14)


def test_duplicate_neighbor_changes_nothing(rng):
    m = small_model()
    xrc, gam = rng.standard_normal((2, 3)), rng.uniform(0, 1, (2, 2))
    e = rng.standard_normal(3)
    edge2 = np.zeros((2, 2, 3))
    edge2[1, 0] = e
    g2 = graph_from(xrc, gam, edge2, [[False, False], [True, False]])
    edge3 = np.zeros((3, 3, 3))
    edge3[1, 0] = edge3[2, 0] = e
    g3 = graph_from(np.vstack([xrc, xrc[1]]), np.vstack([gam, gam[1]]), edge3,
                    [[False, False, False], [True, False, False], [True, False, False]])
    assert np.array_equal(icgnn_forward(m, g2).data[0], icgnn_forward(m, g3).data[0])


def test_one_layer_equals_layer_call(rng):
    m = small_model(n_layers=1)
    g = dense_graph(rng, 4)
    np.testing.assert_array_equal(icgnn_forward(m, g).data, icgnn_layer(m.layer(0), g, g.target_features[None]).data[0])


def test_weight_sharing_reapplies_layer_one(rng):
    m = small_model(n_layers=2, weight_sharing=True)
    g = dense_graph(rng, 4)
    once = icgnn_layer(m.layer(0), g, g.target_features[None])
    twice = icgnn_layer(m.layer(0), g, once)
    np.testing.assert_array_equal(icgnn_forward(m, g).data, twice.data[0])
    assert len(m.pairs) == 1


def test_single_node_graph_by_hand(rng):
    m = small_model()
    g = graph_from(rng.standard_normal((1, 3)), [[0.2, 0.7]], np.zeros((1, 1, 3)), [[False]])
    gamma = g.target_features[0]
    for l in range(2):
        gamma = _update(m, l, g.channel_features[0], gamma, np.zeros(MESSAGE_WIDTH))
    np.testing.assert_allclose(icgnn_forward(m, g).data[0], gamma, atol=1e-14)


def test_channel_features_untouched_and_outputs_in_range(rng):
    m = small_model()
    g = dense_graph(rng, 5)
    before = g.channel_features.copy()
    out = icgnn_forward(m, g, training=True).data
    assert np.array_equal(g.channel_features, before)
    assert np.all((out > 0) & (out < 1))


def test_equivariance(rng):
    m = small_model()
    for v in (1, 3, 7, 12):
        g = dense_graph(rng, v)
        assert check_model_equivariance(lambda x: icgnn_forward(m, x).data, g, trials=10, seed=v) < 1e-6


def test_layer_equivariance(rng):
    m = small_model()
    g = dense_graph(rng, 6)
    p = Permutation.random(6, rng)
    gp = apply_permutation(g, p)
    a = icgnn_layer(m.layer(0), gp, gp.target_features[None]).data[0]
    b = permute_rows(icgnn_layer(m.layer(0), g, g.target_features[None]).data[0], p)
    assert np.max(np.abs(a - b)) < 1e-6


def test_width_mismatch_names_layer(rng):
    with pytest.raises(ShapeError, match="layer 0"):
        icgnn_forward(small_model(d2=4), dense_graph(rng, 3))


def test_checkpoint_roundtrip(tmp_path, rng):
    m = small_model()
    g = dense_graph(rng, 4)
    icgnn_forward(m, g, training=True)
    m.save(tmp_path / "c.npz", extra={"note": 1})
    back = IcgnnModel.load(tmp_path / "c.npz")
    assert back.extra == {"note": 1}
    assert back.header()["n_layers"] == 2 and back.header()["d_node"] == 5
    assert np.array_equal(icgnn_forward(back, g).data, icgnn_forward(m, g).data)
    assert np.array_equal(icgnn_forward(m.copy(), g).data, icgnn_forward(m, g).data)


def test_batched_forward_matches_single(rng):
    m = small_model()
    gs = [dense_graph(rng, 3) for _ in range(2)]
    batched = WvgGraph(np.stack([g.channel_features for g in gs]), np.stack([g.target_features for g in gs]),
                       np.stack([g.edge_features for g in gs]), np.ones((2, 3)), gs[0].mask)
    out = icgnn_forward(m, batched).data
    for i, g in enumerate(gs):
        np.testing.assert_allclose(out[i], icgnn_forward(m, g).data, atol=1e-14)
