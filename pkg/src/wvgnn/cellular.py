"""Single-cell MU-MIMO downlink.

Array conventions (leading batch axes allowed everywhere):

* channels ``H``: (..., K, N_t, N_r) complex, ``H[k] = [h_1k, ..., h_Nr k]``
* precoders ``V``: same shape, ``V[k] = [v_1k, ..., v_Nr k]``
* per-stream quantities: (..., K, N_r), flattened stream index ``s = k * N_r + i``

Channels are divided by the per-user noise standard deviation before any rate
or recovery computation, which leaves every rate and every precoder direction
unchanged.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .exceptions import BracketError, NonFiniteError, ShapeError
from .graph import WvgGraph

LN2 = np.log(2.0)


def dbm_to_watts(dbm):
    return 10.0 ** ((np.asarray(dbm, dtype=np.float64) - 30.0) / 10.0)


def pathloss_db(d_m):
    """-30.5 - 36.7 log10(d) dB."""
    d = np.asarray(d_m, dtype=np.float64)
    if np.any(d <= 0):
        raise ValueError("distance must be positive")
    return -30.5 - 36.7 * np.log10(d)


def noise_power_w(bandwidth_hz, psd_dbm_hz):
    if bandwidth_hz <= 0:
        raise ValueError("bandwidth must be positive")
    return 10.0 ** ((psd_dbm_hz + 10.0 * np.log10(bandwidth_hz) - 30.0) / 10.0)


@dataclass
class CellularScenario:
    n_tx: int
    n_users: int
    n_rx: int
    total_power_w: float
    noise_power_w: object = 7.962143411069939e-14
    user_weights: object = None
    cell_radius_m: float = 500.0
    min_distance_m: float = 1.0

    def __post_init__(self):
        if self.total_power_w <= 0:
            raise ValueError("total power must be positive")
        noise = np.broadcast_to(np.asarray(self.noise_power_w, dtype=np.float64), (self.n_users,))
        if np.any(noise <= 0):
            raise ValueError("noise power must be positive")
        self.noise = noise.copy()
        w = np.ones(self.n_users) if self.user_weights is None else np.asarray(self.user_weights, float)
        if w.shape != (self.n_users,) or np.any(w < 0):
            raise ValueError("user weights must be K non-negative values")
        self.weights = w
        if self.n_users * self.n_rx > self.n_tx:
            warnings.warn(
                f"K*N_r = {self.n_users * self.n_rx} streams exceed N_t = {self.n_tx} antennas",
                stacklevel=2,
            )

    @classmethod
    def from_dbm(cls, n_tx, n_users, n_rx, total_power_dbm=10.0, bandwidth_hz=20e6,
                 noise_psd_dbm_hz=-174.0, **kw):
        return cls(n_tx, n_users, n_rx, float(dbm_to_watts(total_power_dbm)),
                   noise_power_w(bandwidth_hz, noise_psd_dbm_hz), **kw)

    @property
    def n_streams(self):
        return self.n_users * self.n_rx

    def with_users(self, n_users=None, n_rx=None):
        return CellularScenario(
            self.n_tx, n_users or self.n_users, n_rx or self.n_rx, self.total_power_w,
            float(self.noise[0]), None, self.cell_radius_m, self.min_distance_m,
        )


# ---------------------------------------------------------------- channels

def user_distances(scenario, rng, size=()):
    """Uniform positions over the cell disk; distances clamped below at ``min_distance_m``."""
    rng = np.random.default_rng(rng)
    r = scenario.cell_radius_m * np.sqrt(rng.random(tuple(np.atleast_1d(size)) + (scenario.n_users,)
                                                    if size != () else (scenario.n_users,)))
    return np.maximum(r, scenario.min_distance_m)


def generate_cellular(scenario, rng, size=(), distances=None):
    """Rayleigh fading with per-user pathloss variance; deterministic for a given seed."""
    rng = np.random.default_rng(rng)
    shape = tuple(np.atleast_1d(size)) if size != () else ()
    if distances is None:
        distances = user_distances(scenario, rng, size)
    d = np.maximum(np.broadcast_to(distances, shape + (scenario.n_users,)), scenario.min_distance_m)
    gain = 10.0 ** (pathloss_db(d) / 10.0)
    full = shape + (scenario.n_users, scenario.n_tx, scenario.n_rx)
    w = (rng.standard_normal(full) + 1j * rng.standard_normal(full)) * np.sqrt(0.5)
    return w * np.sqrt(gain)[..., None, None]


def save_channels(path, H, seed=None):
    """Channel dump: complex array (count, K, N_t, N_r) with a header (N_t, K, N_r, count, seed)."""
    from .nn import save_arrays

    H = np.asarray(H, dtype=np.complex128)
    if H.ndim == 3:
        H = H[None]
    if H.ndim != 4:
        raise ShapeError("channels", "(count, K, N_t, N_r)", H.shape)
    count, k, n, r = H.shape
    header = {"kind": "channels", "n_tx": n, "n_users": k, "n_rx": r, "count": count,
              "seed": None if seed is None else int(seed)}
    save_arrays(path, header, {"real": H.real, "imag": H.imag})


def load_channels(path):
    """Returns (H, header)."""
    from .nn import load_arrays

    header, arrays = load_arrays(path)
    if header.get("kind") != "channels":
        raise ValueError(f"{path} is not a channel dump")
    H = arrays["real"] + 1j * arrays["imag"]
    want = (header["count"], header["n_users"], header["n_tx"], header["n_rx"])
    if H.shape != want:
        raise ShapeError("channel dump", want, H.shape)
    return H, header


def _check_channels(H, scenario):
    H = np.asarray(H)
    want = (scenario.n_users, scenario.n_tx, scenario.n_rx)
    if H.shape[-3:] != want:
        raise ShapeError("channels (K, N_t, N_r)", want, H.shape[-3:])
    return H


def stream_columns(X):
    """(..., K, N_t, N_r) -> (..., N_t, K*N_r) with column s = k*N_r + i."""
    X = np.asarray(X)
    *lead, k, n, r = X.shape
    return np.swapaxes(X, -2, -1).reshape(*lead, k * r, n).swapaxes(-1, -2)


def from_stream_columns(C, n_users, n_rx):
    C = np.asarray(C)
    *lead, n, s = C.shape
    return np.swapaxes(np.swapaxes(C, -1, -2).reshape(*lead, n_users, n_rx, n), -1, -2)


def normalized_channels(H, scenario):
    """H_k / sigma_k, as stream columns (..., N_t, S)."""
    H = _check_channels(H, scenario)
    sigma = np.sqrt(np.repeat(scenario.noise, scenario.n_rx))
    return stream_columns(H) / sigma


def perturb_csi(H, bound, rng):
    """Add per-user errors whose Frobenius norm is exactly ``bound``."""
    if bound < 0:
        raise ValueError("CSI error bound must be non-negative")
    H = np.asarray(H)
    if bound == 0:
        return H.copy()
    rng = np.random.default_rng(rng)
    e = rng.standard_normal(H.shape) + 1j * rng.standard_normal(H.shape)
    e *= bound / np.linalg.norm(e, axis=(-2, -1), keepdims=True)
    return H + e


# ---------------------------------------------------------------- virtual graph

def build_cellular_wvg(H, scenario):
    """One node per receive antenna; every ordered pair of distinct nodes is an edge
    whose feature is the destination's channel (Re, Im)."""
    H = _check_channels(H, scenario)
    cols = stream_columns(H)                      # (..., N_t, S)
    s = scenario.n_streams
    xrc = np.concatenate([cols.real, cols.imag], axis=-2).swapaxes(-1, -2)  # (..., S, 2N_t)
    mask = ~np.eye(s, dtype=bool)
    edge = np.broadcast_to(xrc[..., None, :, :], xrc.shape[:-2] + (s, s, xrc.shape[-1])) * mask[..., None]
    lead = xrc.shape[:-2]
    share = scenario.total_power_w / s
    labels = np.stack([np.repeat(np.arange(scenario.n_users), scenario.n_rx),
                       np.tile(np.arange(scenario.n_rx), scenario.n_users)], axis=1)
    return WvgGraph(
        channel_features=xrc,
        target_features=np.full(lead + (s, 2), share),
        edge_features=edge,
        node_weights=np.broadcast_to(np.repeat(scenario.weights, scenario.n_rx), lead + (s,)).copy(),
        mask=mask,
        node_noise=np.broadcast_to(np.repeat(scenario.noise, scenario.n_rx), lead + (s,)).copy(),
        node_labels=labels,
    )


def _compress(vecs, noise, power):
    """Keep the direction of each (Re, Im) channel vector, log-compress its SNR."""
    norm = np.linalg.norm(vecs, axis=-1, keepdims=True)
    snr = norm[..., 0] ** 2 * power / noise
    scale = np.where(norm[..., 0] > 0, np.sqrt(np.log1p(snr)) / np.where(norm[..., 0] > 0, norm[..., 0], 1), 0)
    return vecs * scale[..., None]


def model_graph(graph, total_power_w):
    """Feature scaling applied before the ICGNN (node-wise, so permutation-equivariant).

    Channel and edge vectors keep their direction with norm sqrt(log(1 + SNR)),
    SNR = P_t |h|^2 / sigma^2 of the receiving node; targets become
    0.5 * |V| * p / P_t, i.e. 0.5 at equal power.
    """
    noise = graph.node_noise
    v = graph.n_nodes
    edge = _compress(graph.edge_features, noise[..., None, :], total_power_w) * graph.mask[..., None]
    return WvgGraph(
        channel_features=_compress(graph.channel_features, noise, total_power_w),
        target_features=0.5 * v * graph.target_features / total_power_w,
        edge_features=edge,
        node_weights=graph.node_weights,
        mask=graph.mask,
        node_noise=graph.node_noise,
        node_labels=graph.node_labels,
    )


# ---------------------------------------------------------------- power factors and recovery

def scale_power_factors(raw, total_power_w):
    """Rescale along the last axis so the entries sum to ``total_power_w``."""
    raw = T.as_tensor(raw)
    if np.any(raw.data < 0):
        raise ValueError("power factors must be non-negative")
    total = raw.sum(axis=-1, keepdims=True)
    if np.any(total.data <= 0):
        raise ValueError("cannot scale an all-zero power vector")
    return raw * (total_power_w / total)


def recovery_matrix(G, lam):
    """A = I + sum_s lam_s g_s g_s^H for normalized stream columns G (..., N_t, S)."""
    return np.eye(G.shape[-2]) + (G * lam[..., None, :]) @ np.swapaxes(G.conj(), -1, -2)


def direct_precoder_columns(p, lam, Gr, Gi):
    """Differentiable optimal-structure recovery on stream columns.

    ``p`` and ``lam`` are (B, S) tensors already scaled to the budget; ``Gr``,
    ``Gi`` the (B, N_t, S) real and imaginary normalized channels. Returns the
    real and imaginary parts of the precoder columns.
    """
    n = Gr.shape[-2]
    g_emb = T.complex_to_real_embedding(Gr + 1j * Gi)            # (B, 2N, 2S)
    g_col = np.concatenate([Gr, Gi], axis=-2)                    # (B, 2N, S)
    lam2 = T.concat([lam, lam], axis=-1)
    a = np.eye(2 * n) + T.matmul(g_emb * lam2.reshape(lam2.shape[0], 1, -1), g_emb.swapaxes(-1, -2))
    x = T.matmul(T.matinv(a), g_col)                             # (B, 2N, S)
    norm = T.sqrt(T.square(x).sum(axis=-2, keepdims=True))
    v = x * (T.sqrt(p).reshape(p.shape[0], 1, -1) / norm)
    return v[:, :n], v[:, n:]


def recover_precoder_direct(p, lam, H, scenario):
    """Precoders from downlink/uplink power factors ((..., K, N_r) each) via matrix inverse."""
    H = _check_channels(H, scenario)
    lead = H.shape[:-3]
    G = normalized_channels(H, scenario).reshape((-1, scenario.n_tx, scenario.n_streams))
    pf = np.asarray(p, float).reshape(-1, scenario.n_streams)
    lf = np.asarray(lam, float).reshape(-1, scenario.n_streams)
    vr, vi = direct_precoder_columns(T.Tensor(pf), T.Tensor(lf), G.real, G.imag)
    cols = (vr.data + 1j * vi.data).reshape(lead + (scenario.n_tx, scenario.n_streams))
    return from_stream_columns(cols, scenario.n_users, scenario.n_rx)


@dataclass
class CgState:
    x: np.ndarray          # iterate v_t
    r: np.ndarray          # residual A v_t - b
    p: np.ndarray          # search direction
    rr: np.ndarray         # r^H r
    t: int = 0
    residual_norms: list = field(default_factory=list)


def cg_solve(A, b, x0, iterations, tol=1e-14, history=None, reconjugate=True):
    """Conjugate gradients for Hermitian positive definite ``A`` (batched).

    ``b`` and ``x0`` are (..., n) vectors. A batch member stops updating once
    ||r|| <= tol * ||b||. If ``history`` is a list, a copy of the state after
    every iteration is appended to it.

    With ``reconjugate`` every new search direction is explicitly made
    A-conjugate to all earlier ones. In exact arithmetic this changes nothing
    (CG directions are already conjugate); in floating point it keeps the
    finite-termination property when the spectrum mixes a tight cluster with a
    large spread, where plain CG needs extra iterations.
    """
    A = np.asarray(A)
    matvec = lambda v: np.einsum("...ij,...j->...i", A, v)
    r = matvec(x0) - b
    state = CgState(x=np.array(x0, dtype=complex), r=r, p=-r, rr=np.sum(np.abs(r) ** 2, axis=-1))
    bnorm2 = np.sum(np.abs(b) ** 2, axis=-1)
    state.residual_norms.append(np.sqrt(state.rr))
    dirs, adirs, curv = [], [], []
    for _ in range(iterations):
        active = state.rr > (tol ** 2) * bnorm2
        if not np.any(active):
            break
        ap = matvec(state.p)
        pap = np.sum(state.p.conj() * ap, axis=-1)
        safe = np.where(active, pap, 1.0)
        delta = np.where(active, -np.sum(state.p.conj() * state.r, axis=-1) / safe, 0.0)
        state.x = state.x + delta[..., None] * state.p
        state.r = state.r + delta[..., None] * ap
        rr_new = np.sum(np.abs(state.r) ** 2, axis=-1)
        beta = np.where(active, rr_new / np.where(active, state.rr, 1.0), 0.0)
        p_new = -state.r + beta[..., None] * state.p
        if reconjugate:
            dirs.append(state.p)
            adirs.append(ap)
            curv.append(safe.real)
            for d, ad, c in zip(dirs, adirs, curv):
                p_new = p_new - (np.sum(ad.conj() * p_new, axis=-1) / c)[..., None] * d
        state.p = np.where(active[..., None], p_new, state.p)
        state.rr = rr_new
        state.t += 1
        state.residual_norms.append(np.sqrt(rr_new))
        if history is not None:
            history.append(CgState(state.x.copy(), state.r.copy(), state.p.copy(), rr_new.copy(), state.t))
    return state


def recover_precoder_cg(p, lam, H, scenario, iterations):
    """Matrix-inverse-free recovery: CG from the MRT start, then one global power rescale.

    The scalar q = sqrt(p) / ||A^-1 h|| is estimated with an auxiliary CG solve
    of A x = h over the same number of iterations. The main solve of A v = q h
    starts from q h, the MRT direction at the scale of the solution, which
    avoids cancellation when ||q h|| and ||h|| differ by orders of magnitude.
    """
    if not 1 <= iterations <= scenario.n_tx:
        raise ValueError(f"iterations must lie in [1, {scenario.n_tx}]")
    H = _check_channels(H, scenario)
    lead = H.shape[:-3]
    sigma = np.sqrt(np.repeat(scenario.noise, scenario.n_rx))
    h = np.swapaxes(stream_columns(H), -1, -2)                  # (..., S, N_t)
    G = stream_columns(H) / sigma
    A = recovery_matrix(G, np.broadcast_to(np.asarray(lam, float).reshape(lead + (-1,)), lead + (scenario.n_streams,)))
    A_s = A[..., None, :, :]
    aux = cg_solve(A_s, h, h, iterations)
    q = np.sqrt(np.asarray(p, float).reshape(lead + (-1,))) / np.linalg.norm(aux.x, axis=-1)
    v = cg_solve(A_s, q[..., None] * h, q[..., None] * h, iterations).x
    total = np.sum(np.abs(v) ** 2, axis=(-2, -1), keepdims=True)
    v = v * np.sqrt(scenario.total_power_w / total)
    return from_stream_columns(np.swapaxes(v, -1, -2), scenario.n_users, scenario.n_rx)


def mrt_precoder(H, scenario):
    """v_ik = sqrt(P_t / S) h_ik / ||h_ik||."""
    H = _check_channels(H, scenario)
    norms = np.linalg.norm(H, axis=-2, keepdims=True)
    return H / norms * np.sqrt(scenario.total_power_w / scenario.n_streams)


def total_power(V):
    return np.sum(np.abs(V) ** 2, axis=(-3, -2, -1))


# ---------------------------------------------------------------- rates

def _user_blocks(stream_user):
    """Row indices of each user's block in the embedded (2S) layout and a mask of
    the columns that interfere with it. ``stream_user[s]`` is the user of stream s."""
    stream_user = np.asarray(stream_user)
    s = len(stream_user)
    users = np.unique(stream_user)
    base = np.stack([np.flatnonzero(stream_user == k) for k in users])        # (K, N_r)
    rows = np.concatenate([base, base + s], axis=1)                           # (K, 2 N_r)
    own = np.zeros((len(users), 2 * s))
    np.put_along_axis(own, rows, 1.0, axis=1)
    return rows, 1.0 - own


def wsr_from_columns(vr, vi, Gr, Gi, weights, n_users, n_rx, stream_user=None):
    """Weighted sum of log2 det(I + SINR_k) on the real embedding (batched, differentiable).

    Returns a (B,) tensor. Uses det(I + S N^-1) = det(N + S) / det(N); the real
    embedding doubles each log-determinant, hence the factor 1/2. Streams are
    grouped by ``stream_user`` (default: contiguous blocks of ``n_rx``).
    """
    if stream_user is None:
        stream_user = np.repeat(np.arange(n_users), n_rx)
    g_emb = T.complex_to_real_embedding(Gr + 1j * Gi)          # (B, 2N, 2S)
    v_emb = T.embed(vr, vi)                                     # (B, 2N, 2S)
    t = T.matmul(g_emb.swapaxes(-1, -2), v_emb)                  # (B, 2S, 2S) = emb(G^H V)
    rows, not_own = _user_blocks(stream_user)
    tk = t[:, rows]                                              # (B, K, 2Nr, 2S)
    tk_int = tk * not_own[None, :, None, :]
    eye = np.eye(rows.shape[1])
    full = T.logdet_psd(eye + T.matmul(tk, tk.mT))
    interference = T.logdet_psd(eye + T.matmul(tk_int, tk_int.mT))
    rates = (full - interference) * (0.5 / LN2)                  # (B, K)
    return (rates * np.asarray(weights)).sum(axis=-1)


def wsr_from_graph(graph, total_power_w):
    """Weighted sum rate with power factors taken from the graph's target features.

    Works directly in node order (user membership from ``node_labels``), so it
    is defined for any relabelling of the nodes.
    """
    xrc = graph.channel_features
    single = xrc.ndim == 2
    xrc = xrc[None] if single else xrc
    n = xrc.shape[-1] // 2
    noise = np.asarray(graph.node_noise)
    noise = noise[None] if single else noise
    sigma = np.sqrt(noise)[:, None, :]
    Gr = np.swapaxes(xrc[..., :n], -1, -2) / sigma
    Gi = np.swapaxes(xrc[..., n:], -1, -2) / sigma
    gamma = graph.target_features[None] if single else graph.target_features
    p, lam = factors_from_output(gamma, total_power_w)
    vr, vi = direct_precoder_columns(p, lam, Gr, Gi)
    user = graph.node_labels[:, 0]
    weights = np.asarray(graph.node_weights)
    weights = weights[None] if single else weights
    per_user = np.stack([weights[:, np.flatnonzero(user == k)[0]] for k in np.unique(user)], axis=-1)
    out = wsr_from_columns(vr, vi, Gr, Gi, per_user, 0, 0, stream_user=user).data
    return float(out[0]) if single else out


def sum_rate_mimo(V, H, scenario):
    """Weighted sum rate (bits/s/Hz) of precoders ``V`` on channels ``H`` (batched)."""
    H = _check_channels(H, scenario)
    V = _check_channels(V, scenario)
    lead = np.broadcast_shapes(H.shape[:-3], V.shape[:-3])
    G = np.broadcast_to(normalized_channels(H, scenario), lead + (scenario.n_tx, scenario.n_streams))
    C = np.broadcast_to(stream_columns(V), G.shape)
    G = G.reshape(-1, *G.shape[-2:])
    C = C.reshape(-1, *C.shape[-2:])
    out = wsr_from_columns(T.Tensor(C.real), T.Tensor(C.imag), G.real, G.imag,
                           scenario.weights, scenario.n_users, scenario.n_rx)
    if not np.all(np.isfinite(out.data)):
        raise NonFiniteError("non-finite sum rate")
    return out.data.reshape(lead) if lead else float(out.data[0])


def per_antenna_rates(V, H, scenario):
    """Per-stream rate (..., K, N_r) treating every other stream as noise."""
    G = normalized_channels(H, scenario)
    C = stream_columns(_check_channels(V, scenario))
    gain = np.abs(np.swapaxes(G.conj(), -1, -2) @ C) ** 2       # [s, s'] = |g_s^H v_s'|^2
    signal = np.diagonal(gain, axis1=-2, axis2=-1)
    interference = gain.sum(axis=-1) - signal
    rates = np.log2(1.0 + signal / (interference + 1.0))
    return rates.reshape(rates.shape[:-1] + (scenario.n_users, scenario.n_rx))


def per_antenna_wsr(V, H, scenario):
    return np.sum(per_antenna_rates(V, H, scenario) * scenario.weights[:, None], axis=(-2, -1))


# ---------------------------------------------------------------- WMMSE baseline

def _complex_wsr(G, V, weights, n_users, n_rx):
    """Weighted sum rate from normalized stream columns via complex log-determinants."""
    t = np.swapaxes(G.conj(), -1, -2) @ V                        # (..., S, S)
    lead = t.shape[:-2]
    tk = t.reshape(lead + (n_users, n_rx, n_users * n_rx))
    eye = np.eye(n_rx)
    full = eye + tk @ np.swapaxes(tk.conj(), -1, -2)
    own = np.repeat(np.eye(n_users, dtype=bool), n_rx, axis=1)    # (K, S)
    tk_int = np.where(own[:, None, :], 0, tk)
    interf = eye + tk_int @ np.swapaxes(tk_int.conj(), -1, -2)
    rates = (np.linalg.slogdet(full)[1] - np.linalg.slogdet(interf)[1]) / LN2
    return rates @ weights


def _power_at(mu, lam, d2):
    return np.sum(d2 / (lam + mu[..., None]) ** 2, axis=-1)


def _bisect_multiplier(lam, d2, budget, tol=1e-10, max_steps=200):
    """mu >= 0 with sum d2 / (lam + mu)^2 = budget (batched over leading axes)."""
    lam = np.maximum(lam, 0.0)
    singular = lam.min(axis=-1) <= 1e-12 * np.maximum(lam.max(axis=-1), 1e-300)
    with np.errstate(divide="ignore"):
        p0 = np.where(singular, np.inf, _power_at(np.zeros(lam.shape[:-1]), np.where(singular[..., None], 1.0, lam), d2))
    feasible = p0 <= budget
    lo = np.zeros(lam.shape[:-1])
    hi = np.sqrt(d2.sum(axis=-1) / budget) * (1.0 + 1e-9)
    p_hi = _power_at(hi, lam, d2)
    bad = ~feasible & ~((p0 > budget) & (p_hi <= budget))
    if np.any(bad):
        i = np.flatnonzero(bad.reshape(-1))[0]
        raise BracketError(0.0, float(hi.reshape(-1)[i]), float(p0.reshape(-1)[i]),
                           float(p_hi.reshape(-1)[i]), budget)
    for _ in range(max_steps):
        mid = 0.5 * (lo + hi)
        over = _power_at(mid, lam, d2) > budget
        lo = np.where(over, mid, lo)
        hi = np.where(over, hi, mid)
        if np.all((hi - lo) <= tol * hi):
            break
    return np.where(feasible, 0.0, hi)


def wmmse_cellular(H, scenario, iterations=100, init=None):
    """WMMSE for the weighted sum rate under a total power budget.

    Starts from MRT. Returns the precoders and the weighted-sum-rate trace
    (initial value first, then one entry per iteration), batched over leading
    axes of ``H``.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    H = _check_channels(H, scenario)
    K, nr, s = scenario.n_users, scenario.n_rx, scenario.n_streams
    G = normalized_channels(H, scenario)                         # (..., N, S)
    Gk = from_stream_columns(G, K, nr)                           # (..., K, N, Nr)
    V = stream_columns(mrt_precoder(H, scenario) if init is None else init)
    alpha = scenario.weights
    budget = scenario.total_power_w
    trace = [_complex_wsr(G, V, alpha, K, nr)]
    eye_r = np.eye(nr)
    for _ in range(iterations):
        Vk = from_stream_columns(V, K, nr)                       # (..., K, N, Nr)
        t = np.einsum("...kni,...ns->...kis", Gk.conj(), V)      # G_k^H V : (..., K, Nr, S)
        cov = eye_r + t @ np.swapaxes(t.conj(), -1, -2)
        gv = np.einsum("...kni,...knj->...kij", Gk.conj(), Vk)   # G_k^H V_k
        U = np.linalg.solve(cov, gv)
        E = eye_r - np.swapaxes(U.conj(), -1, -2) @ gv
        W = np.linalg.inv(0.5 * (E + np.swapaxes(E.conj(), -1, -2)))
        gu = Gk @ U                                              # (..., K, N, Nr)
        J = np.einsum("k,...kni,...kij,...kmj->...nm", alpha, gu, W, gu.conj())
        J = 0.5 * (J + np.swapaxes(J.conj(), -1, -2))
        C = alpha[:, None, None] * (gu @ W)                      # (..., K, N, Nr)
        Ccols = stream_columns(C)
        lam, Q = np.linalg.eigh(J)
        D = np.swapaxes(Q.conj(), -1, -2) @ Ccols
        mu = _bisect_multiplier(lam, np.sum(np.abs(D) ** 2, axis=-1), budget)
        V = Q @ (D / (lam + mu[..., None])[..., None])
        V = V * np.sqrt(budget / np.sum(np.abs(V) ** 2, axis=(-2, -1), keepdims=True))
        trace.append(_complex_wsr(G, V, alpha, K, nr))
    return from_stream_columns(V, K, nr), np.stack(trace, axis=-1)


# ---------------------------------------------------------------- ICGNN glue

def split_graph_inputs(H, scenario):
    G = normalized_channels(H, scenario).reshape((-1, scenario.n_tx, scenario.n_streams))
    return G.real, G.imag


def factors_from_output(gamma, total_power_w):
    """Model output (B, S, 2) -> scaled (p, lam), each (B, S)."""
    gamma = T.as_tensor(gamma)
    p = scale_power_factors(gamma[..., 0], total_power_w)
    lam = scale_power_factors(gamma[..., 1], total_power_w)
    return p, lam


def icgnn_factors(model, H, scenario, training=False):
    from .model import icgnn_forward

    H = _check_channels(H, scenario).reshape((-1, scenario.n_users, scenario.n_tx, scenario.n_rx))
    graph = model_graph(build_cellular_wvg(H, scenario), scenario.total_power_w)
    return factors_from_output(icgnn_forward(model, graph, training), scenario.total_power_w)


def cellular_loss(model, H, scenario, training=True):
    """Negative batch-mean weighted sum rate of ICGNN precoders (tape-differentiable)."""
    p, lam = icgnn_factors(model, H, scenario, training)
    Gr, Gi = split_graph_inputs(H, scenario)
    vr, vi = direct_precoder_columns(p, lam, Gr, Gi)
    wsr = wsr_from_columns(vr, vi, Gr, Gi, scenario.weights, scenario.n_users, scenario.n_rx)
    return -wsr.mean()


def icgnn_precoders(model, H, scenario, cg_iterations=None):
    """Eval-mode ICGNN precoders, by direct recovery or by ``cg_iterations`` CG steps."""
    H = np.asarray(H)
    lead = H.shape[:-3]
    p, lam = icgnn_factors(model, H, scenario, training=False)
    shape = lead + (scenario.n_users, scenario.n_rx)
    pf, lf = p.data.reshape(shape), lam.data.reshape(shape)
    if cg_iterations is None:
        return recover_precoder_direct(pf, lf, H, scenario)
    return recover_precoder_cg(pf, lf, H, scenario, cg_iterations)
