import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wvgnn.exceptions import NonFiniteError, ShapeError
from wvgnn.graph import (Permutation, WvgGraph, apply_permutation, check_model_equivariance,
                         check_objective_invariance, dump_graph, graphs_equal, load_graph, permute_rows)


def random_graph(rng, v=4, d2=3, d3=2):
    mask = ~np.eye(v, dtype=bool)
    edge = rng.standard_normal((v, v, d2)) * mask[..., None]
    return WvgGraph(rng.standard_normal((v, d2)), rng.uniform(0, 1, (v, d3)), edge,
                    rng.uniform(0.5, 2, v), mask, rng.uniform(1, 2, v), np.arange(v)[:, None])


def test_identity_and_inverse(rng):
    g = random_graph(rng)
    assert graphs_equal(apply_permutation(g, Permutation.identity(4)), g)
    p = Permutation.random(4, rng)
    assert graphs_equal(apply_permutation(apply_permutation(g, p), p.inverse()), g)


def test_swap_moves_edges(rng):
    g = random_graph(rng, v=3)
    h = apply_permutation(g, Permutation.swap(3, 0, 1))
    np.testing.assert_array_equal(h.edge_features[1, 0], g.edge_features[0, 1])
    np.testing.assert_array_equal(h.channel_features[1], g.channel_features[0])


def test_input_graph_untouched(rng):
    g = random_graph(rng)
    before = g.edge_features.copy()
    apply_permutation(g, Permutation.random(4, rng))
    assert np.array_equal(g.edge_features, before)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(0, 2 ** 31))
def test_composition_and_invariants(v, seed):
    rng = np.random.default_rng(seed)
    g = random_graph(rng, v=v)
    p1, p2 = Permutation.random(v, rng), Permutation.random(v, rng)
    h = apply_permutation(apply_permutation(g, p1), p2)
    assert graphs_equal(h, apply_permutation(g, p1.then(p2)))
    assert not np.any(np.diag(h.mask))
    assert np.all(np.diagonal(h.edge_features, axis1=0, axis2=1) == 0)
    np.testing.assert_array_equal(h.node_features, np.concatenate([h.channel_features, h.target_features], -1))


def test_bad_permutations():
    with pytest.raises(ValueError):
        Permutation([0, 0, 1])
    with pytest.raises(ShapeError):
        apply_permutation(random_graph(np.random.default_rng(0)), Permutation.identity(3))


def test_graph_invariants_enforced(rng):
    g = random_graph(rng)
    bad_edge = g.edge_features.copy()
    bad_edge[1, 1] = 1.0
    with pytest.raises(ValueError):
        WvgGraph(g.channel_features, g.target_features, bad_edge, g.node_weights, g.mask)
    with pytest.raises(ValueError):
        WvgGraph(g.channel_features, g.target_features, g.edge_features, g.node_weights, np.ones((4, 4), bool))


def test_objective_invariance_checker(rng):
    g = random_graph(rng)
    assert check_objective_invariance(lambda x: 3.0, g) == 0.0
    assert check_objective_invariance(lambda x: float(np.sum(x.node_weights * x.target_features[:, 0])), g) < 1e-12
    assert check_objective_invariance(lambda x: x.target_features[0, 0], g, trials=20) > 0
    with pytest.raises(NonFiniteError):
        check_objective_invariance(lambda x: np.nan, g)


def test_model_equivariance_checker(rng):
    g = random_graph(rng)
    assert check_model_equivariance(lambda x: 2 * x.target_features, g) == 0.0
    assert check_model_equivariance(lambda x: np.cumsum(x.target_features, axis=0), g, trials=20) > 0
    single = random_graph(rng, v=1)
    assert check_model_equivariance(lambda x: np.cumsum(x.target_features, axis=0), single) == 0.0


def test_permute_rows_matches_definition(rng):
    x = rng.standard_normal((5, 2))
    p = Permutation.random(5, rng)
    y = permute_rows(x, p)
    for i in range(5):
        np.testing.assert_array_equal(y[p.mapping[i]], x[i])


def test_dump_roundtrip(rng, tmp_path):
    g = random_graph(rng)
    text = dump_graph(g, tmp_path / "g.json")
    assert graphs_equal(load_graph(text), g)
    assert (tmp_path / "g.json").read_text() == text
