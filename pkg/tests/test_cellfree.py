import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wvgnn import cellfree as F
from wvgnn import tensor as T
from wvgnn.graph import Permutation, apply_permutation


def scenario(l=3, k=2, n=2, **kw):
    return F.CellFreeScenario.from_dbm(l, k, n, **kw)


def sinr_from_samples(h, power, sc):
    """SINR straight from channel samples: E|sum_l mu_il g_l|^2 over the draws."""
    w = F.lmmse_precoder(h, sc)
    mu = np.sqrt(power)
    out = np.zeros(sc.n_users)
    for k in range(sc.n_users):
        g = np.einsum("sln,siln->sil", h[:, k].conj(), w)        # (n_mc, i, l)
        signal = np.sum(mu[k] * np.abs(g[:, k].mean(0))) ** 2
        total = sum(np.mean(np.abs(g[:, i] @ mu[i]) ** 2) for i in range(sc.n_users))
        out[k] = signal / (max(total - signal, 0.0) + sc.noise_power_w)
    return out


def test_precoders_unit_norm(rng):
    sc = scenario(4, 3, 3)
    beta = F.sample_geometry(sc, rng)[2]
    w = F.lmmse_precoder(F.draw_channels(beta, 3, 10, rng), sc)
    np.testing.assert_allclose(np.linalg.norm(w, axis=-1), 1.0, atol=1e-12)


def test_single_user_precoder_is_matched_filter(rng):
    sc = scenario(3, 1, 4)
    h = F.draw_channels(F.sample_geometry(sc, rng)[2], 4, 5, rng)
    w = F.lmmse_precoder(h, sc)
    np.testing.assert_allclose(w, h / np.linalg.norm(h, axis=-1, keepdims=True), atol=1e-10)


def test_large_noise_limit(rng):
    sc0 = scenario(2, 3, 4)
    h = F.draw_channels(F.sample_geometry(sc0, rng)[2], 4, 5, rng)
    signal = np.max(sc0.rho[0] * np.abs(h) ** 2)
    sc = F.CellFreeScenario(2, 3, 4, noise_power_w=1e6 * signal)
    w = F.lmmse_precoder(h, sc)
    mf = h / np.linalg.norm(h, axis=-1, keepdims=True)
    assert np.max(np.abs(w - mf)) < 1e-4


def test_rayleigh_mean_amplitude():
    sc = scenario(2, 1, 1)
    beta = np.array([[1e-6, 4e-7]])
    stats = F.estimate_stats(sc, 10_000, 3, beta=beta)
    np.testing.assert_allclose(stats.a, np.sqrt(np.pi * beta / 4), rtol=0.03)


def test_stats_are_seeded_and_consistent(rng):
    sc = scenario(3, 2, 2)
    s1, s2 = F.estimate_stats(sc, 200, 9), F.estimate_stats(sc, 200, 9)
    assert np.array_equal(s1.a, s2.a) and np.array_equal(s1.b, s2.b)
    assert np.all(s1.a >= 0)
    for k in range(2):
        assert np.all(np.diag(s1.b[k, k]) >= s1.a[k] ** 2 * (1 - 1e-12))


def test_different_aps_factorize(rng):
    sc = scenario(2, 2, 2)
    stats = F.estimate_stats(sc, 20_000, 4)
    for k in range(2):
        for i in range(2):
            cross = stats.b[k, i, 0, 1]
            product = (stats.mean_gain[k, i, 0] * np.conj(stats.mean_gain[k, i, 1])).real
            scale = np.sqrt(stats.b[k, i, 0, 0] * stats.b[k, i, 1, 1])
            assert abs(cross - product) < 0.05 * scale


def test_sinr_examples(rng):
    sc = scenario(1, 1, 2)
    stats = F.estimate_stats(sc, 300, 1)
    assert F.sinr_cellfree(stats, np.zeros((1, 1)), 0, sc) == 0.0
    p = sc.ap_power_w
    a, b = stats.a[0, 0], stats.b[0, 0, 0, 0]
    want = a ** 2 * p / (max(b * p - a ** 2 * p, 0.0) + sc.noise_power_w)
    np.testing.assert_allclose(F.sinr_cellfree(stats, np.full((1, 1), p), 0, sc), want, rtol=1e-10)


@pytest.mark.parametrize("l,k,n", [(2, 2, 1), (3, 3, 2), (4, 2, 3)])
def test_sinr_matches_sample_oracle(rng, l, k, n):
    sc = scenario(l, k, n)
    beta = F.sample_geometry(sc, rng)[2]
    h = F.draw_channels(beta, n, 400, rng)
    stats = F.stats_from_channels(h, sc)
    power = F.scale_power_per_ap(rng.uniform(0.1, 1, (k, l)), sc.ap_power_w).data
    np.testing.assert_allclose(F.sinr_all(stats, power, sc), sinr_from_samples(h, power, sc), rtol=1e-9)


def test_se_prefactor_and_zero_power(rng):
    sc = scenario(3, 2, 2)
    stats = F.estimate_stats(sc, 200, 2)
    assert F.se_cellfree(stats, np.zeros((2, 3)), sc) == 0.0
    p = F.equal_power(sc)
    full = F.CellFreeScenario.from_dbm(3, 2, 2, dl_fraction=1.0)
    np.testing.assert_allclose(F.se_cellfree(stats, p, sc), 19 / 20 * F.se_cellfree(stats, p, full), rtol=1e-14)


def test_se_gradcheck_through_scaling(rng):
    sc = scenario(2, 2, 2)
    stats = F.estimate_stats(sc, 200, 5)
    a, b, _ = F._batched_stats(stats, sc)

    def f(x):
        return -F.se_from_sqrt_power(a, b, T.sqrt(F.scale_power_per_ap(x, sc.ap_power_w)), sc).mean()

    assert T.gradcheck(f, rng.uniform(0.2, 1, (1, 2, 2))) < 1e-4


def test_power_scaling_examples(rng):
    sc = scenario(3, 4, 2)
    np.testing.assert_allclose(F.scale_power_per_ap(np.ones((4, 3)), sc.ap_power_w).data, sc.ap_power_w / 4)
    feasible = F.equal_power(sc)
    np.testing.assert_allclose(F.scale_power_per_ap(feasible, sc.ap_power_w).data, feasible, rtol=1e-15)
    with pytest.raises(ValueError):
        F.scale_power_per_ap(np.array([[1.0, 0.0], [1.0, 0.0]]), 1.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.integers(1, 6), st.integers(0, 2 ** 31))
def test_per_ap_budget_holds(k, l, seed):
    raw = np.random.default_rng(seed).uniform(1e-3, 1, (k, l))
    p = F.scale_power_per_ap(raw, 0.1).data
    np.testing.assert_allclose(p.sum(axis=0), 0.1, rtol=1e-9)


def test_baselines():
    sc = F.CellFreeScenario.from_dbm(1, 4, 1)
    np.testing.assert_allclose(F.equal_power(sc), 0.025)
    sc2 = F.CellFreeScenario.from_dbm(1, 2, 1)
    np.testing.assert_allclose(F.lsf_power(np.array([[1.0], [4.0]]), sc2)[:, 0], [0.1 / 3, 0.2 / 3], rtol=1e-14)
    sc3 = F.CellFreeScenario.from_dbm(3, 3, 1)
    np.testing.assert_allclose(F.lsf_power(np.full((3, 3), 2e-7), sc3), F.equal_power(sc3), rtol=1e-14)
    np.testing.assert_allclose(F.equal_power(F.CellFreeScenario.from_dbm(2, 1, 1)), 0.1)


def test_graph_structure(rng):
    sc = scenario(3, 2, 2)
    stats = F.estimate_stats(sc, 100, 0)
    g = F.build_cellfree_wvg(stats, sc)
    assert g.n_nodes == 6 and g.mask.sum() == 18
    assert (g.d_channel, g.d_target) == (1, 1)
    np.testing.assert_allclose(g.target_features, sc.ap_power_w / 2)
    np.testing.assert_array_equal(np.diag(F.layout_matrix(g)), stats.a.reshape(-1))
    # edge (k, l) -> (m, j) is the same for every destination AP j
    for src in range(3):
        assert np.all(g.edge_features[src, 3:, 0] == g.edge_features[src, 3, 0])
    lonely = F.build_cellfree_wvg(F.estimate_stats(scenario(3, 1, 2), 50, 0), scenario(3, 1, 2))
    assert lonely.n_nodes == 3 and not lonely.mask.any()
    mean = F.build_cellfree_wvg(stats, sc, edge_feature="mean")
    assert mean.edge_features[0, 3, 0] == stats.mean_gain[1, 0, 0].real
    with pytest.raises(ValueError):
        F.build_cellfree_wvg(stats, sc, edge_feature="abs")


def test_se_invariant_to_user_relabeling(rng):
    sc = scenario(3, 3, 2, user_weights=np.array([0.5, 1.0, 2.0]))
    stats = F.estimate_stats(sc, 100, 3)
    power = F.scale_power_per_ap(rng.uniform(0.1, 1, (3, 3)), sc.ap_power_w).data
    perm = np.array([2, 0, 1])
    st_p = F.EffectiveChannelStats(stats.a[perm], stats.b[perm][:, perm], stats.mean_gain[perm][:, perm], stats.n_mc)
    sc_p = scenario(3, 3, 2, user_weights=sc.weights[perm])
    assert abs(F.se_cellfree(st_p, power[perm], sc_p) - F.se_cellfree(stats, power, sc)) < 1e-9


def test_graph_relabeling_matches_stats_relabeling(rng):
    from wvgnn.checks import permute_cellfree

    sc = scenario(3, 2, 2)
    stats = F.estimate_stats(sc, 100, 3)
    power = F.equal_power(sc)
    user_perm, ap_perm = Permutation([1, 0]), Permutation([2, 0, 1])
    st_p, p_p, sc_p = permute_cellfree(stats, power, sc, user_perm, ap_perm)
    g = F.build_cellfree_wvg(stats, sc)
    # node (k, l) moves to (user_perm(k), ap_perm(l))
    node_perm = Permutation((user_perm.mapping[:, None] * 3 + ap_perm.mapping[None, :]).reshape(-1))
    g_p = F.build_cellfree_wvg(st_p, sc_p)
    gp = apply_permutation(g, node_perm)
    np.testing.assert_allclose(g_p.edge_features, gp.edge_features, rtol=1e-14)
    np.testing.assert_allclose(g_p.channel_features, gp.channel_features, rtol=1e-14)


def test_grid_search_dominates_baselines(rng):
    sc = scenario(2, 2, 2)
    for seed in range(5):
        stats = F.estimate_stats(sc, 200, seed)
        best, power = F.grid_search_power(stats, sc, n_grid=51)
        assert np.all(power.sum(axis=0) <= sc.ap_power_w * (1 + 1e-12))
        np.testing.assert_allclose(F.se_cellfree(stats, power, sc), best, rtol=1e-12)
        assert best >= F.se_cellfree(stats, F.equal_power(sc), sc) - 1e-12
        assert best >= F.se_cellfree(stats, F.lsf_power(stats.beta, sc), sc) - 1e-3 * best


def test_grid_search_needs_two_users():
    sc = scenario(2, 3, 1)
    with pytest.raises(ValueError):
        F.grid_search_power(F.estimate_stats(sc, 10, 0), sc)


def test_stats_cache(tmp_path):
    sc = scenario(2, 2, 1)
    s1 = F.cached_stats(tmp_path, sc, 3, 20, 7)
    assert len(list(tmp_path.iterdir())) == 1
    s2 = F.cached_stats(tmp_path, sc, 3, 20, 7)
    assert np.array_equal(s1.b, s2.b) and s2.beta.shape == (3, 2, 2)
    assert F.load_stats(next(tmp_path.iterdir()), sc, 8, 20) is None
