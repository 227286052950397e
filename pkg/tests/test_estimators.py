import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from wvgnn import cellfree as F
from wvgnn import cellular as C
from wvgnn.estimators import CellFreeICGNN, CellularICGNN, check_channels, check_stats
from wvgnn.exceptions import ShapeError


def test_params_roundtrip_and_clone():
    est = CellularICGNN(n_tx=4, steps=3, random_state=7)
    params = est.get_params()
    assert params["n_tx"] == 4 and params["random_state"] == 7
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    est.set_params(steps=5)
    assert est.steps == 5


@pytest.mark.parametrize("est,X", [
    (CellularICGNN(n_tx=4, n_users=2, n_rx=1), np.ones((1, 2, 4, 1), complex)),
    (CellFreeICGNN(n_aps=2, n_users=2, n_tx=1), np.full((1, 2, 2), 1e-7)),
])
def test_unfitted_raises(est, X):
    with pytest.raises(NotFittedError):
        est.predict(X)


def test_cellular_fit_predict_score():
    sc = C.CellularScenario.from_dbm(4, 2, 1)
    H = C.generate_cellular(sc, 0, size=6)
    est = CellularICGNN(n_tx=4, n_users=2, n_rx=1, steps=2, batch_size=4).fit()
    V = est.predict(H)
    assert V.shape == H.shape
    np.testing.assert_allclose(C.total_power(V), sc.total_power_w, rtol=1e-9)
    pf = est.transform(H)
    assert pf.shape == (6, 2, 1, 2)
    np.testing.assert_allclose(pf[..., 0].sum(axis=(1, 2)), sc.total_power_w, rtol=1e-12)
    assert est.score(H) == pytest.approx(np.mean(C.sum_rate_mimo(V, H, sc)))
    # other user counts at the same N_t
    assert est.predict(C.generate_cellular(sc.with_users(3), 1, size=2)).shape == (2, 3, 4, 1)


def test_cellular_fit_on_given_channels_is_deterministic():
    H = C.generate_cellular(C.CellularScenario.from_dbm(4, 2, 1), 0, size=10)
    a = CellularICGNN(n_tx=4, n_users=2, n_rx=1, steps=2, batch_size=4).fit(H)
    b = CellularICGNN(n_tx=4, n_users=2, n_rx=1, steps=2, batch_size=4).fit(H)
    assert a.curve_.losses == b.curve_.losses


def test_cellfree_fit_predict_score():
    sc = F.CellFreeScenario.from_dbm(2, 2, 1)
    beta = F.sample_geometry(sc, 0, 4)[2]
    est = CellFreeICGNN(n_aps=2, n_users=2, n_tx=1, steps=2, batch_size=3, n_mc=30, pool_n_mc=20).fit(beta)
    p = est.predict(beta)
    assert p.shape == (4, 2, 2)
    np.testing.assert_allclose(p.sum(axis=1), sc.ap_power_w, rtol=1e-9)
    stats = F.estimate_stats(sc, 30, 0, beta=beta)
    assert np.isfinite(est.score(stats))


def test_input_validation():
    with pytest.raises(ShapeError):
        check_channels(np.ones((2, 3), complex), 4)
    with pytest.raises(ShapeError):
        check_channels(np.ones((1, 2, 3, 1), complex), 4)
    with pytest.raises(ValueError):
        check_channels(np.full((1, 2, 4, 1), np.nan), 4)
    assert check_channels(np.ones((2, 4, 1)), 4).shape == (1, 2, 4, 1)
    with pytest.raises(ValueError):
        check_stats(np.zeros((2, 2)))
    assert check_stats(np.ones((2, 2))).shape == (1, 2, 2)
