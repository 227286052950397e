"""Cell-free downlink with local L-MMSE precoding and per-AP power allocation.

Array conventions:

* large-scale gains ``beta``: (..., K, L)
* small-scale channels ``h``: (n_mc, K, L, N_t), ``h[s, k, l]`` from AP l to user k
* power matrices: (..., K, L), per-AP budget on the sum over users (axis -2)
* graph node index k * L + l
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .cellular import dbm_to_watts, noise_power_w, pathloss_db
from .exceptions import NonFiniteError, ShapeError
from .graph import WvgGraph

LN2 = np.log(2.0)
EDGE_FEATURES = ("rms", "mean")


@dataclass
class CellFreeScenario:
    n_aps: int
    n_users: int
    n_tx: int
    ap_power_w: float = 0.1
    noise_power_w: float = 7.962143411069939e-14
    uplink_power_w: object = 0.01
    dl_fraction: float = 19.0 / 20.0
    area_m: float = 1000.0
    user_weights: object = None
    min_distance_m: float = 1.0

    def __post_init__(self):
        if self.ap_power_w <= 0 or self.noise_power_w <= 0:
            raise ValueError("powers must be positive")
        if not 0 < self.dl_fraction <= 1:
            raise ValueError("downlink fraction must lie in (0, 1]")
        rho = np.broadcast_to(np.asarray(self.uplink_power_w, float), (self.n_users,))
        if np.any(rho <= 0):
            raise ValueError("uplink powers must be positive")
        self.rho = rho.copy()
        w = np.ones(self.n_users) if self.user_weights is None else np.asarray(self.user_weights, float)
        if w.shape != (self.n_users,) or np.any(w < 0):
            raise ValueError("user weights must be K non-negative values")
        self.weights = w

    @classmethod
    def from_dbm(cls, n_aps, n_users, n_tx, ap_power_dbm=20.0, uplink_power_dbm=10.0,
                 bandwidth_hz=20e6, noise_psd_dbm_hz=-174.0, **kw):
        return cls(n_aps, n_users, n_tx, float(dbm_to_watts(ap_power_dbm)),
                   noise_power_w(bandwidth_hz, noise_psd_dbm_hz),
                   float(dbm_to_watts(uplink_power_dbm)), **kw)

    def resized(self, n_aps=None, n_users=None, n_tx=None):
        return CellFreeScenario(
            n_aps or self.n_aps, n_users or self.n_users, n_tx or self.n_tx, self.ap_power_w,
            self.noise_power_w, float(self.rho[0]), self.dl_fraction, self.area_m, None,
            self.min_distance_m,
        )

    def key(self):
        doc = {k: getattr(self, k) for k in ("n_aps", "n_users", "n_tx", "ap_power_w", "noise_power_w",
                                             "dl_fraction", "area_m", "min_distance_m")}
        doc["rho"] = self.rho.tolist()
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------- geometry and channels

def sample_geometry(scenario, rng, size=()):
    """AP and user positions uniform over the square area; returns (ap_xy, user_xy, beta)."""
    rng = np.random.default_rng(rng)
    shape = tuple(np.atleast_1d(size)) if size != () else ()
    aps = rng.random(shape + (scenario.n_aps, 2)) * scenario.area_m
    users = rng.random(shape + (scenario.n_users, 2)) * scenario.area_m
    d = np.linalg.norm(users[..., :, None, :] - aps[..., None, :, :], axis=-1)
    beta = 10.0 ** (pathloss_db(np.maximum(d, scenario.min_distance_m)) / 10.0)
    return aps, users, beta


def draw_channels(beta, n_tx, n_mc, rng):
    """i.i.d. Rayleigh with variance beta per antenna: (..., n_mc, K, L, N_t)."""
    rng = np.random.default_rng(rng)
    beta = np.asarray(beta)
    shape = beta.shape[:-2] + (n_mc,) + beta.shape[-2:] + (n_tx,)
    w = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * np.sqrt(0.5)
    return w * np.sqrt(beta[..., None, :, :, None])


def lmmse_precoder(h, scenario):
    """Unit-norm local precoders w[..., k, l] = normalize((sum_i rho_i h_il h_il^H + sigma^2 I)^-1 rho_k h_kl)."""
    h = np.asarray(h)
    if h.shape[-3:-1] != (scenario.n_users, scenario.n_aps):
        raise ShapeError("channels (K, L, N_t)", (scenario.n_users, scenario.n_aps, scenario.n_tx), h.shape[-3:])
    hl = np.swapaxes(h, -3, -2)                                   # (..., L, K, N)
    cols = np.swapaxes(hl, -1, -2)                                # (..., L, N, K)
    cov = (cols * scenario.rho) @ np.swapaxes(cols.conj(), -1, -2) + scenario.noise_power_w * np.eye(h.shape[-1])
    w = np.linalg.solve(cov, cols * scenario.rho)                 # (..., L, N, K)
    w = w / np.linalg.norm(w, axis=-2, keepdims=True)
    return np.swapaxes(np.swapaxes(w, -1, -2), -3, -2)            # (..., K, L, N)


@dataclass
class EffectiveChannelStats:
    """Sample statistics of g[k, i, l] = h_kl^H w_il over small-scale fading.

    ``a[k, l] = |E g[k, k, l]|``; ``b[k, i, l, m] = Re E{g[k, i, l] conj(g[k, i, m])}``;
    ``mean_gain[k, i, l] = E g[k, i, l]``. Leading batch axes allowed.
    """
    a: np.ndarray
    b: np.ndarray
    mean_gain: np.ndarray
    n_mc: int
    beta: np.ndarray = None
    extra: dict = field(default_factory=dict)

    @property
    def n_users(self):
        return self.a.shape[-2]

    @property
    def n_aps(self):
        return self.a.shape[-1]

    def __getitem__(self, idx):
        return EffectiveChannelStats(self.a[idx], self.b[idx], self.mean_gain[idx], self.n_mc,
                                     None if self.beta is None else self.beta[idx])


def stats_from_channels(h, scenario):
    """Monte Carlo statistics from channels (..., n_mc, K, L, N_t)."""
    w = lmmse_precoder(h, scenario)
    g = np.einsum("...skln,...siln->...skil", h.conj(), w)       # (..., n_mc, K, K, L)
    n_mc = h.shape[-4]
    mean_gain = g.mean(axis=-4)
    a = np.abs(np.diagonal(mean_gain, axis1=-3, axis2=-2))        # (..., L, K)
    a = np.swapaxes(a, -1, -2)
    b = np.einsum("...skil,...skim->...kilm", g, g.conj()).real / n_mc
    return EffectiveChannelStats(a=a, b=b, mean_gain=mean_gain, n_mc=n_mc)


def estimate_stats(scenario, n_mc=1000, seed=0, beta=None, chunk=64):
    """Statistics for one geometry (or a batch of geometries when ``beta`` is batched).

    Without ``beta`` a geometry is drawn from ``seed`` first.
    """
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    rng = np.random.default_rng(seed)
    if beta is None:
        beta = sample_geometry(scenario, rng)[2]
    beta = np.asarray(beta, float)
    if np.any(beta <= 0):
        raise ValueError("large-scale gains must be positive")
    if beta.ndim == 2:
        st = stats_from_channels(draw_channels(beta, scenario.n_tx, n_mc, rng), scenario)
        st.beta = beta
        return st
    flat = beta.reshape((-1,) + beta.shape[-2:])
    parts = []
    for start in range(0, len(flat), chunk):
        sub = flat[start:start + chunk]
        parts.append(stats_from_channels(draw_channels(sub, scenario.n_tx, n_mc, rng), scenario))
    lead = beta.shape[:-2]
    cat = lambda name: np.concatenate([getattr(p, name) for p in parts]).reshape(lead + getattr(parts[0], name).shape[1:])
    return EffectiveChannelStats(cat("a"), cat("b"), cat("mean_gain"), n_mc, beta)


def save_stats(path, stats, scenario, seed):
    np.savez(path, a=stats.a, b=stats.b, mean_gain=stats.mean_gain,
             beta=np.zeros(0) if stats.beta is None else stats.beta,
             key=np.array([scenario.key(), str(seed), str(stats.n_mc)]))


def load_stats(path, scenario=None, seed=None, n_mc=None):
    """Load a stats cache; returns None when the key does not match."""
    with np.load(path) as z:
        key = [str(x) for x in z["key"]]
        if scenario is not None and key != [scenario.key(), str(seed), str(n_mc)]:
            return None
        beta = z["beta"] if z["beta"].size else None
        return EffectiveChannelStats(z["a"], z["b"], z["mean_gain"], int(key[2]), beta)


def cached_stats(cache_dir, scenario, n_geometries, n_mc, seed):
    """Batch of statistics over ``n_geometries`` random layouts, cached on disk."""
    import os

    path = None
    if cache_dir:
        os.makedirs(cache_dir, exist_ok=True)
        path = os.path.join(cache_dir, f"stats_{scenario.key()}_{n_geometries}_{n_mc}_{seed}.npz")
        if os.path.exists(path):
            hit = load_stats(path, scenario, seed, n_mc)
            if hit is not None:
                return hit
    rng = np.random.default_rng(seed)
    beta = sample_geometry(scenario, rng, n_geometries)[2]
    stats = estimate_stats(scenario, n_mc, rng, beta=beta)
    if path:
        save_stats(path, stats, scenario, seed)
    return stats


# ---------------------------------------------------------------- SINR and SE

def _sinr(a, b, mu, noise):
    """Batched differentiable SINR (B, K) from a (B, K, L), b (B, K, K, L, L), mu (B, K, L)."""
    mu = T.as_tensor(mu)
    n, k, l = mu.shape
    signal = T.square((mu * a).sum(axis=-1))                                   # (B, K)
    quad = T.matmul(b, mu.reshape(n, 1, k, l, 1)).reshape(n, k, k, l)          # B_ki mu_i
    total = (quad * mu.reshape(n, 1, k, l)).sum(axis=-1).sum(axis=-1)          # sum_i mu_i^T B_ki mu_i
    interference = T.clamp_min(total - signal, 0.0)
    return signal / (interference + noise)


def _normalized(stats, scenario):
    sigma = np.sqrt(scenario.noise_power_w)
    return stats.a / sigma, stats.b / scenario.noise_power_w


def _batched_stats(stats, scenario):
    a, b = _normalized(stats, scenario)
    if a.shape[-2:] != (scenario.n_users, scenario.n_aps):
        raise ShapeError("stats (K, L)", (scenario.n_users, scenario.n_aps), a.shape[-2:])
    lead = a.shape[:-2]
    return a.reshape((-1,) + a.shape[-2:]), b.reshape((-1,) + b.shape[-4:]), lead


def sinr_all(stats, power, scenario):
    """SINR of every user, (..., K), for power matrices (..., K, L)."""
    a, b, lead = _batched_stats(stats, scenario)
    p = np.asarray(power, float)
    if p.shape[-2:] != a.shape[-2:]:
        raise ShapeError("power matrix", a.shape[-2:], p.shape[-2:])
    p = np.broadcast_to(p, lead + p.shape[-2:]).reshape(a.shape)
    out = _sinr(a, b, np.sqrt(p), 1.0).data
    if not np.all(np.isfinite(out)):
        raise NonFiniteError("non-finite SINR: corrupted statistics")
    return out.reshape(lead + (scenario.n_users,))


def sinr_cellfree(stats, power, k, scenario):
    return sinr_all(stats, power, scenario)[..., k]


def se_from_sqrt_power(a, b, mu, scenario):
    """Differentiable weighted sum SE (B,) from normalized stats and sqrt powers."""
    sinr = _sinr(a, b, mu, 1.0)
    rates = T.log(1.0 + sinr) * (scenario.dl_fraction / LN2)
    return (rates * scenario.weights).sum(axis=-1)


def se_cellfree(stats, power, scenario):
    """Weighted sum of (tau_d / tau_c) log2(1 + SINR_k)."""
    sinr = sinr_all(stats, power, scenario)
    return scenario.dl_fraction * np.log2(1.0 + sinr) @ scenario.weights


# ---------------------------------------------------------------- baselines

def scale_power_per_ap(raw, total_power_w):
    """Rescale each AP column (axis -2 sums over users) to the budget."""
    raw = T.as_tensor(raw)
    if np.any(raw.data < 0):
        raise ValueError("power entries must be non-negative")
    col = raw.sum(axis=-2, keepdims=True)
    if np.any(col.data <= 0):
        raise ValueError("cannot scale an all-zero AP column")
    return raw * (total_power_w / col)


def equal_power(scenario, lead=()):
    return np.full(tuple(lead) + (scenario.n_users, scenario.n_aps), scenario.ap_power_w / scenario.n_users)


def lsf_power(beta, scenario):
    """p_kl = P_t sqrt(beta_kl) / sum_i sqrt(beta_il)."""
    beta = np.asarray(beta, float)
    if np.any(beta <= 0):
        raise ValueError("large-scale gains must be positive")
    s = np.sqrt(beta)
    return scenario.ap_power_w * s / s.sum(axis=-2, keepdims=True)


def grid_search_power(stats, scenario, n_grid=51, chunk=200_000):
    """Exhaustive search for K=2 users: per AP every (p_1, p_2) on an n_grid^2 lattice
    of [0, P_t]^2 with p_1 + p_2 <= P_t, jointly over all APs. Returns (best SE, power)."""
    if scenario.n_users != 2:
        raise ValueError("grid search supports exactly two users")
    levels = np.linspace(0.0, scenario.ap_power_w, n_grid)
    p1, p2 = np.meshgrid(levels, levels, indexing="ij")
    ok = p1 + p2 <= scenario.ap_power_w * (1 + 1e-12)
    pairs = np.stack([p1[ok], p2[ok]], axis=-1)                   # (M, 2)
    m, n_aps = len(pairs), scenario.n_aps
    total = m ** n_aps
    a, b, _ = _batched_stats(stats, scenario)
    best, best_idx = -np.inf, 0
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total))
        digits = np.stack(np.unravel_index(idx, (m,) * n_aps), axis=-1)    # (c, L)
        power = np.swapaxes(pairs[digits], -1, -2)                          # (c, K, L)
        mu = np.sqrt(power)
        se = se_from_sqrt_power(a[:1], b[:1], mu, scenario).data
        j = int(np.argmax(se))
        if se[j] > best:
            best, best_idx = float(se[j]), idx[j]
    digits = np.array(np.unravel_index(best_idx, (m,) * n_aps))
    return best, np.swapaxes(pairs[digits], 0, 1)


# ---------------------------------------------------------------- virtual graph

def build_cellfree_wvg(stats, scenario, edge_feature="rms"):
    """One node per (user, AP) pair; edge (k, l) -> (m, j) iff m != k.

    Node feature a_kl. The edge feature is the interference from AP l's signal
    for user k at user m, either its RMS amplitude sqrt(E|h_ml^H w_kl|^2)
    (``"rms"``) or the real part of the mean E{h_ml^H w_kl} (``"mean"``).
    """
    if edge_feature not in EDGE_FEATURES:
        raise ValueError(f"edge_feature must be one of {EDGE_FEATURES}")
    K, L = scenario.n_users, scenario.n_aps
    a = np.asarray(stats.a)
    if a.shape[-2:] != (K, L):
        raise ShapeError("stats (K, L)", (K, L), a.shape[-2:])
    lead = a.shape[:-2]
    user = np.repeat(np.arange(K), L)
    ap = np.tile(np.arange(L), K)
    mask = user[:, None] != user[None, :]
    if edge_feature == "rms":
        diag = np.diagonal(stats.b, axis1=-2, axis2=-1)           # (..., K, K, L): E|g[m, k, l]|^2
        inter = np.sqrt(np.maximum(diag, 0.0))
    else:
        inter = stats.mean_gain.real
    # src node (k, l), dst user m: inter[m, k, l]
    per_src = inter[..., :, user, ap]                             # (..., M(dst user), V(src))
    edge = np.swapaxes(per_src[..., user, :], -1, -2) * mask      # (..., V src, V dst)
    return WvgGraph(
        channel_features=a.reshape(lead + (K * L, 1)),
        target_features=np.full(lead + (K * L, 1), scenario.ap_power_w / K),
        edge_features=edge[..., None],
        node_weights=np.broadcast_to(scenario.weights[user], lead + (K * L,)).copy(),
        mask=mask,
        node_noise=np.full(lead + (K * L,), scenario.noise_power_w),
        node_labels=np.stack([user, ap], axis=1),
    )


def layout_matrix(graph):
    """Square matrix with node channel features on the diagonal and edge features off it."""
    e = graph.edge_matrix.copy()
    idx = np.arange(graph.n_nodes)
    e[..., idx, idx] = graph.channel_features[..., 0]
    return e


def model_graph(graph, scenario):
    """Log-compressed SNR-like features and targets scaled to 0.5 at equal power."""
    snr = lambda x: np.sign(x) * np.log1p(x ** 2 * scenario.ap_power_w / scenario.noise_power_w)
    return WvgGraph(
        channel_features=snr(graph.channel_features),
        target_features=0.5 * scenario.n_users * graph.target_features / scenario.ap_power_w,
        edge_features=snr(graph.edge_features),
        node_weights=graph.node_weights,
        mask=graph.mask,
        node_noise=graph.node_noise,
        node_labels=graph.node_labels,
    )


# ---------------------------------------------------------------- ICGNN glue

def icgnn_power(model, stats, scenario, training=False, edge_feature="rms"):
    """Per-AP scaled power tensor (B, K, L) from the ICGNN output."""
    from .model import icgnn_forward

    a = np.asarray(stats.a)
    flat = stats if a.ndim == 3 else EffectiveChannelStats(a[None], stats.b[None], stats.mean_gain[None], stats.n_mc)
    graph = model_graph(build_cellfree_wvg(flat, scenario, edge_feature), scenario)
    gamma = icgnn_forward(model, graph, training)
    raw = gamma.reshape(gamma.shape[0], scenario.n_users, scenario.n_aps)
    return scale_power_per_ap(raw, scenario.ap_power_w)


def cellfree_loss(model, stats, scenario, training=True, edge_feature="rms"):
    """Negative batch-mean weighted sum SE of the ICGNN allocation (tape-differentiable)."""
    p = icgnn_power(model, stats, scenario, training, edge_feature)
    a, b, _ = _batched_stats(stats, scenario)
    return -se_from_sqrt_power(a, b, T.sqrt(p), scenario).mean()


def icgnn_allocation(model, stats, scenario, edge_feature="rms"):
    p = icgnn_power(model, stats, scenario, False, edge_feature).data
    return p.reshape(np.shape(stats.a))
