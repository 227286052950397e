"""scikit-learn style wrappers around ICGNN training and inference.

``fit`` trains unsupervised (``y`` is ignored), ``predict`` returns precoders
or power matrices, ``transform`` the per-node power factors, and ``score`` the
mean weighted sum SE. The number of users (and receive antennas or APs) is read
from the input at prediction time, so a fitted estimator can be evaluated on
other network sizes.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import cellfree as F
from . import cellular as C
from .exceptions import ShapeError
from .training import cellfree_model, cellular_model, train_cellfree, train_cellular


def check_channels(X, n_tx):
    """Validate a batch of MIMO channels (n, K, N_t, N_r); a single realization is promoted."""
    X = np.asarray(X)
    if not np.iscomplexobj(X):
        X = X.astype(np.complex128)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ShapeError("channels", "(n, K, N_t, N_r)", X.shape)
    if X.shape[2] != n_tx:
        raise ShapeError("channels N_t", n_tx, X.shape[2])
    if not np.all(np.isfinite(X)):
        raise ValueError("channels contain NaN or infinity")
    return X


def check_stats(X):
    """Accept EffectiveChannelStats or large-scale gains (n, K, L)."""
    if isinstance(X, F.EffectiveChannelStats):
        if np.ndim(X.a) == 2:
            return F.EffectiveChannelStats(X.a[None], X.b[None], X.mean_gain[None], X.n_mc,
                                           None if X.beta is None else X.beta[None])
        return X
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ShapeError("large-scale gains", "(n, K, L)", X.shape)
    if not np.all(np.isfinite(X)) or np.any(X <= 0):
        raise ValueError("large-scale gains must be positive and finite")
    return X


class _IcgnnEstimator(BaseEstimator):
    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError(f"{type(self).__name__} is not fitted yet; call fit first")


class CellularICGNN(_IcgnnEstimator):
    def __init__(self, n_tx=8, n_users=4, n_rx=2, total_power_dbm=10.0, n_layers=2,
                 weight_sharing=False, steps=1000, batch_size=100, learning_rate=1e-3,
                 cg_iterations=None, random_state=0):
        self.n_tx = n_tx
        self.n_users = n_users
        self.n_rx = n_rx
        self.total_power_dbm = total_power_dbm
        self.n_layers = n_layers
        self.weight_sharing = weight_sharing
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.cg_iterations = cg_iterations
        self.random_state = random_state

    def _scenario(self, n_users=None, n_rx=None):
        return C.CellularScenario.from_dbm(self.n_tx, n_users or self.n_users, n_rx or self.n_rx,
                                           self.total_power_dbm)

    def _scenario_for(self, X):
        return self._scenario(X.shape[1], X.shape[3])

    def fit(self, X=None, y=None):
        """Train on fresh channel draws, or on batches sampled from ``X`` when given."""
        scenario = self._scenario()
        if X is not None:
            X = check_channels(X, self.n_tx)
            scenario = self._scenario_for(X)
        self.model_ = cellular_model(scenario, self.n_layers, self.weight_sharing, self.random_state)
        self.curve_ = train_cellular(self.model_, scenario, self.steps, self.batch_size, self.learning_rate,
                                     self.random_state, 0, channels=X)
        return self

    def transform(self, X):
        """Per-stream (p, lambda) after budget scaling, shape (n, K, N_r, 2)."""
        self._check_fitted()
        X = check_channels(X, self.n_tx)
        scenario = self._scenario_for(X)
        p, lam = C.icgnn_factors(self.model_, X, scenario)
        return np.stack([p.data, lam.data], axis=-1).reshape(X.shape[0], X.shape[1], X.shape[3], 2)

    def predict(self, X):
        """Precoders (n, K, N_t, N_r)."""
        self._check_fitted()
        X = check_channels(X, self.n_tx)
        return C.icgnn_precoders(self.model_, X, self._scenario_for(X), self.cg_iterations)

    def score(self, X, y=None):
        X = check_channels(X, self.n_tx)
        return float(np.mean(C.sum_rate_mimo(self.predict(X), X, self._scenario_for(X))))


class CellFreeICGNN(_IcgnnEstimator):
    def __init__(self, n_aps=6, n_users=3, n_tx=2, ap_power_dbm=20.0, n_layers=2,
                 weight_sharing=False, steps=1000, batch_size=100, learning_rate=1e-3,
                 n_mc=1000, pool_size=4000, pool_n_mc=250, edge_feature="rms", random_state=0):
        self.n_aps = n_aps
        self.n_users = n_users
        self.n_tx = n_tx
        self.ap_power_dbm = ap_power_dbm
        self.n_layers = n_layers
        self.weight_sharing = weight_sharing
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.n_mc = n_mc
        self.pool_size = pool_size
        self.pool_n_mc = pool_n_mc
        self.edge_feature = edge_feature
        self.random_state = random_state

    def _scenario(self, n_users=None, n_aps=None):
        return F.CellFreeScenario.from_dbm(n_aps or self.n_aps, n_users or self.n_users, self.n_tx,
                                           self.ap_power_dbm)

    def _stats(self, X, n_mc):
        X = check_stats(X)
        if isinstance(X, F.EffectiveChannelStats):
            return X, self._scenario(*X.a.shape[-2:])
        scenario = self._scenario(*X.shape[-2:])
        return F.estimate_stats(scenario, n_mc, self.random_state, beta=X), scenario

    def fit(self, X=None, y=None):
        """Train on random layouts, or on ``X`` (gains or statistics) when given."""
        self.model_ = cellfree_model(self.n_layers, self.weight_sharing, self.random_state)
        if X is None:
            scenario, pool = self._scenario(), None
        else:
            pool, scenario = self._stats(X, self.pool_n_mc)
        self.curve_ = train_cellfree(self.model_, scenario, self.steps, self.batch_size, self.learning_rate,
                                     self.random_state, 0, pool=pool, pool_size=self.pool_size,
                                     n_mc=self.pool_n_mc, edge_feature=self.edge_feature)
        return self

    def predict(self, X):
        """Power matrices (n, K, L), each AP column summing to its budget."""
        self._check_fitted()
        stats, scenario = self._stats(X, self.n_mc)
        return F.icgnn_allocation(self.model_, stats, scenario, self.edge_feature)

    transform = predict

    def score(self, X, y=None):
        stats, scenario = self._stats(X, self.n_mc)
        return float(np.mean(F.se_cellfree(stats, self.predict(stats), scenario)))
