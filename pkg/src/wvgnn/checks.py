"""Self-check suites shared by the command line and the test suite:
finite-difference gradient checks and permutation property checks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import cellfree as F
from . import cellular as C
from . import tensor as T
from .graph import Permutation, apply_permutation, check_model_equivariance, permute_rows
from .model import IcgnnModel, icgnn_forward
from .nn import Mlp, MlpSpec, mlp_forward

OP_TOL = 1e-5
LOSS_TOL = 1e-4
INVARIANCE_TOL = 1e-9
EQUIVARIANCE_TOL = 1e-6


@dataclass
class CheckResult:
    name: str
    value: float
    tol: float

    @property
    def passed(self):
        return bool(np.isfinite(self.value) and self.value < self.tol)

    def line(self):
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.value:.3e} (tol {self.tol:.0e})"


def _spd(rng, n, batch=2):
    a = rng.standard_normal((batch, n, n))
    return a @ np.swapaxes(a, -1, -2) + n * np.eye(n)


def _op_cases():
    """(name, input generator, scalar function) for every differentiable primitive."""
    w = lambda rng, shape: rng.standard_normal(shape)
    return [
        ("add", lambda r: r.standard_normal((3, 4)), lambda x, c: ((x + c["b"]) * c["w"]).sum(),
         lambda r: {"b": w(r, (4,)), "w": w(r, (3, 4))}),
        ("sub", lambda r: r.standard_normal((3, 4)), lambda x, c: ((c["b"] - x) * c["w"]).sum(),
         lambda r: {"b": w(r, (3, 4)), "w": w(r, (3, 4))}),
        ("mul", lambda r: r.standard_normal((3, 4)), lambda x, c: (x * x * c["w"]).sum(),
         lambda r: {"w": w(r, (3, 4))}),
        ("div", lambda r: r.uniform(0.5, 2.0, (3, 4)), lambda x, c: (c["w"] / x + x / 3.0).sum(),
         lambda r: {"w": w(r, (3, 4))}),
        ("neg", lambda r: r.standard_normal(5), lambda x, c: (-x * c["w"]).sum(), lambda r: {"w": w(r, 5)}),
        ("power", lambda r: r.uniform(0.5, 2.0, 5), lambda x, c: (T.power(x, 2.5) * c["w"]).sum(),
         lambda r: {"w": w(r, 5)}),
        ("square", lambda r: r.standard_normal(5), lambda x, c: (T.square(x) * c["w"]).sum(),
         lambda r: {"w": w(r, 5)}),
        ("sqrt", lambda r: r.uniform(0.5, 2.0, 5), lambda x, c: (T.sqrt(x) * c["w"]).sum(),
         lambda r: {"w": w(r, 5)}),
        ("exp", lambda r: r.standard_normal(5), lambda x, c: (T.exp(x) * c["w"]).sum(),
         lambda r: {"w": w(r, 5)}),
        ("log", lambda r: r.uniform(0.5, 2.0, 5), lambda x, c: (T.log(x) * c["w"]).sum(),
         lambda r: {"w": w(r, 5)}),
        ("tanh", lambda r: r.standard_normal(5), lambda x, c: (T.tanh(x) * c["w"]).sum(),
         lambda r: {"w": w(r, 5)}),
        ("sigmoid", lambda r: r.standard_normal(5) * 3, lambda x, c: (T.sigmoid(x) * c["w"]).sum(),
         lambda r: {"w": w(r, 5)}),
        ("clamp_min", lambda r: r.standard_normal(6), lambda x, c: (T.clamp_min(x, 0.0) * c["w"]).sum(),
         lambda r: {"w": w(r, 6)}),
        ("sum", lambda r: r.standard_normal((3, 4)), lambda x, c: T.square(x.sum(axis=0)).sum(),
         lambda r: {}),
        ("mean", lambda r: r.standard_normal((3, 4)), lambda x, c: T.square(x.mean(axis=1, keepdims=True)).sum(),
         lambda r: {}),
        ("reshape", lambda r: r.standard_normal((3, 4)), lambda x, c: (x.reshape(4, 3) * c["w"]).sum(),
         lambda r: {"w": w(r, (4, 3))}),
        ("transpose", lambda r: r.standard_normal((2, 3, 4)),
         lambda x, c: (T.transpose(x, (2, 0, 1)) * c["w"]).sum(), lambda r: {"w": w(r, (4, 2, 3))}),
        ("take", lambda r: r.standard_normal((4, 3)), lambda x, c: (x[np.array([0, 2, 2, 3])] * c["w"]).sum(),
         lambda r: {"w": w(r, (4, 3))}),
        ("concat", lambda r: r.standard_normal((2, 3)), lambda x, c: (T.concat([x, T.square(x)], 0) * c["w"]).sum(),
         lambda r: {"w": w(r, (4, 3))}),
        ("broadcast_to", lambda r: r.standard_normal((1, 3)),
         lambda x, c: (T.broadcast_to(x, (4, 3)) * c["w"]).sum(), lambda r: {"w": w(r, (4, 3))}),
        ("matmul", lambda r: r.standard_normal((2, 3, 4)), lambda x, c: (T.matmul(x, c["b"]) * c["w"]).sum(),
         lambda r: {"b": w(r, (4, 5)), "w": w(r, (2, 3, 5))}),
        ("logdet_psd", lambda r: _spd(r, 4), lambda x, c: (T.logdet_psd(x) * c["w"]).sum(),
         lambda r: {"w": w(r, 2)}),
        ("matinv", lambda r: _spd(r, 4) + r.standard_normal((2, 4, 4)), lambda x, c: (T.matinv(x) * c["w"]).sum(),
         lambda r: {"w": w(r, (2, 4, 4))}),
        ("segment_max", lambda r: r.standard_normal((2, 7, 3)),
         lambda x, c: (T.segment_max(x, np.array([0, 0, 1, 1, 1, 3, 3]), 5) * c["w"]).sum(),
         lambda r: {"w": w(r, (2, 5, 3))}),
        ("embed", lambda r: r.standard_normal((2, 3)), lambda x, c: (T.embed(x, T.square(x)) * c["w"]).sum(),
         lambda r: {"w": w(r, (4, 6))}),
    ]


def _mlp_case(train):
    spec = MlpSpec((3, 5, 4, 2), "sigmoid")

    def run(x, c):
        return (mlp_forward(c["mlp"], x, training=train) * c["w"]).sum()

    return (f"mlp_forward({'train' if train else 'eval'})", lambda r: r.standard_normal((6, 3)), run,
            lambda r: {"mlp": _fresh_mlp(spec, r), "w": r.standard_normal((6, 2))})


def _fresh_mlp(spec, rng):
    m = Mlp(spec, rng)
    m.running_mean = [rng.standard_normal(x.shape) * 0.1 for x in m.running_mean]
    return m


def _restore_bn(c):
    # training-mode batchnorm updates running statistics; keep the function pure
    mlp = c.get("mlp")
    if mlp is None:
        return lambda: None
    saved = ([x.copy() for x in mlp.running_mean], [x.copy() for x in mlp.running_var])
    return lambda: (setattr(mlp, "running_mean", [x.copy() for x in saved[0]]),
                    setattr(mlp, "running_var", [x.copy() for x in saved[1]]))


def op_gradchecks(seed=0, trials=10):
    """Worst relative error per differentiable operation over ``trials`` random inputs."""
    results = []
    for name, make_x, fn, make_c in _op_cases() + [_mlp_case(False), _mlp_case(True)]:
        worst = 0.0
        for t in range(trials):
            rng = np.random.default_rng([seed, t, len(name)])
            x, c = make_x(rng), make_c(rng)
            reset = _restore_bn(c)

            def f(xt):
                reset()
                return fn(xt, c)

            worst = max(worst, T.gradcheck(f, x))
        results.append(CheckResult(f"gradcheck {name}", worst, OP_TOL))
    return results


def _toy_model(d_channel, d_target, seed):
    return IcgnnModel(d_channel, d_target, 2, (6, 8), (8, 4), False, seed)


def _param_slots(model, training):
    """(list, index) of every parameter block. In training mode the biases that
    feed a batchnorm layer are skipped: batch centering makes their gradient
    identically zero, leaving nothing but finite-difference noise to compare."""
    for m, u in model.pairs:
        for net in (m, u):
            n_bn = len(net.bn_scale) if training else 0
            for lst in (net.weights, net.biases, net.bn_scale, net.bn_shift):
                for j in range(len(lst)):
                    if not (lst is net.biases and j < n_bn):
                        yield lst, j


def _param_check(model, loss, rng, training, per_block=4):
    """Worst gradcheck error over sampled entries of every parameter block."""
    slots = list(_param_slots(model, training))
    saved = [lst[j] for lst, j in slots]
    tracked = [T.Tensor(h.data, requires_grad=True) for h in saved]
    try:
        for (lst, j), t in zip(slots, tracked):
            lst[j] = t
        with T.Tape() as tape:
            value = loss()
        grads = tape.gradient(value, tracked)
    finally:
        for (lst, j), h in zip(slots, saved):
            lst[j] = h
    scale = max(float(np.max(np.abs(g))) for g in grads)
    worst = 0.0
    for lst, j in slots:
        holder = lst[j]
        entries = rng.choice(holder.data.size, min(per_block, holder.data.size), replace=False)

        def f(xt):
            lst[j] = xt
            try:
                return loss()
            finally:
                lst[j] = holder

        worst = max(worst, T.gradcheck(f, holder.data, step=1e-5, entries=entries, scale=scale))
    return worst


def _mode(training):
    return "batch statistics" if training else "running statistics"


def loss_gradchecks(seed=0):
    """End-to-end checks of both unsupervised losses on toy scenarios.

    Differentiates with respect to the raw power outputs (through the budget
    scaling, recovery and rate expressions) and with respect to sampled entries
    of every parameter block of a small ICGNN (training-mode batchnorm included).
    """
    rng = np.random.default_rng(seed)
    out = []
    sc = C.CellularScenario.from_dbm(4, 2, 2, 10.0)
    H = C.generate_cellular(sc, rng, size=3)
    Gr, Gi = C.split_graph_inputs(H, sc)

    def rate_of_raw(x):
        p = C.scale_power_factors(x[..., 0], sc.total_power_w)
        lam = C.scale_power_factors(x[..., 1], sc.total_power_w)
        vr, vi = C.direct_precoder_columns(p, lam, Gr, Gi)
        return -C.wsr_from_columns(vr, vi, Gr, Gi, sc.weights, sc.n_users, sc.n_rx).mean()

    raw = rng.uniform(0.2, 1.0, (3, sc.n_streams, 2))
    out.append(CheckResult("gradcheck cellular loss wrt power outputs", T.gradcheck(rate_of_raw, raw), LOSS_TOL))
    model = _toy_model(2 * sc.n_tx, 2, seed)
    for training in (True, False):
        err = _param_check(model, lambda: C.cellular_loss(model, H, sc, training), rng, training)
        out.append(CheckResult(f"gradcheck cellular loss wrt ICGNN parameters ({_mode(training)})", err, LOSS_TOL))

    cf = F.CellFreeScenario.from_dbm(2, 2, 2)
    stats = F.estimate_stats(cf, 200, rng, beta=F.sample_geometry(cf, rng, 3)[2])
    a, b, _ = F._batched_stats(stats, cf)

    def se_of_raw(x):
        p = F.scale_power_per_ap(x, cf.ap_power_w)
        return -F.se_from_sqrt_power(a, b, T.sqrt(p), cf).mean()

    raw = rng.uniform(0.2, 1.0, (3, 2, 2))
    out.append(CheckResult("gradcheck cell-free loss wrt power outputs", T.gradcheck(se_of_raw, raw), LOSS_TOL))
    model = _toy_model(1, 1, seed + 1)
    for training in (True, False):
        err = _param_check(model, lambda: F.cellfree_loss(model, stats, cf, training), rng, training)
        out.append(CheckResult(f"gradcheck cell-free loss wrt ICGNN parameters ({_mode(training)})", err, LOSS_TOL))
    return out


# ---------------------------------------------------------------- permutation properties

def random_cellular_graph(rng, n_tx=8, max_users=4, max_rx=2):
    import warnings

    k = int(rng.integers(1, max_users + 1))
    r = int(rng.integers(1, max_rx + 1))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        sc = C.CellularScenario.from_dbm(n_tx, k, r, 10.0, user_weights=rng.uniform(0.5, 2.0, k))
    H = C.generate_cellular(sc, rng)
    g = C.build_cellular_wvg(H, sc)
    return sc, g.with_targets(rng.uniform(0.1, 1.0, g.target_features.shape) * sc.total_power_w)


def random_cellfree_case(rng, max_aps=4, max_users=3, n_mc=64):
    l = int(rng.integers(1, max_aps + 1))
    k = int(rng.integers(1, max_users + 1))
    sc = F.CellFreeScenario.from_dbm(l, k, int(rng.integers(1, 3)), user_weights=rng.uniform(0.5, 2.0, k))
    stats = F.estimate_stats(sc, n_mc, rng)
    power = F.scale_power_per_ap(rng.uniform(0.1, 1.0, (k, l)), sc.ap_power_w).data
    return sc, stats, power


def permute_cellfree(stats, power, scenario, user_perm, ap_perm):
    """Relabel users and APs jointly in statistics, powers and weights."""
    u, a = user_perm.order, ap_perm.order
    st = F.EffectiveChannelStats(
        stats.a[np.ix_(u, a)],
        stats.b[np.ix_(u, u, a, a)],
        stats.mean_gain[np.ix_(u, u, a)],
        stats.n_mc,
        None if stats.beta is None else stats.beta[np.ix_(u, a)],
    )
    sc = F.CellFreeScenario(scenario.n_aps, scenario.n_users, scenario.n_tx, scenario.ap_power_w,
                            scenario.noise_power_w, scenario.rho[u], scenario.dl_fraction,
                            scenario.area_m, scenario.weights[u])
    return st, power[np.ix_(u, a)], sc


def invariance_checks(seed=0, n_graphs=100):
    rng = np.random.default_rng(seed)
    worst_cell = 0.0
    for _ in range(n_graphs):
        sc, g = random_cellular_graph(rng)
        base = C.wsr_from_graph(g, sc.total_power_w)
        perm = Permutation.random(g.n_nodes, rng)
        worst_cell = max(worst_cell, abs(C.wsr_from_graph(apply_permutation(g, perm), sc.total_power_w) - base))
    worst_cf = 0.0
    for _ in range(n_graphs):
        sc, stats, power = random_cellfree_case(rng)
        base = F.se_cellfree(stats, power, sc)
        st, p, sc2 = permute_cellfree(stats, power, sc, Permutation.random(sc.n_users, rng),
                                      Permutation.random(sc.n_aps, rng))
        worst_cf = max(worst_cf, abs(F.se_cellfree(st, p, sc2) - base))
    return [CheckResult(f"WSR invariance, {n_graphs} cellular graphs", worst_cell, INVARIANCE_TOL),
            CheckResult(f"SE invariance, {n_graphs} cell-free instances", worst_cf, INVARIANCE_TOL)]


def equivariance_checks(seed=0, trials=50, cellular_model=None, cellfree_model=None):
    """Eval-mode ICGNN output under random node permutations, per scenario family."""
    rng = np.random.default_rng(seed)

    def untrained(m):
        # fresh models get non-trivial running statistics so batchnorm is exercised
        for pair in m.pairs:
            for net in pair:
                net.running_mean = [rng.standard_normal(x.shape) * 0.1 for x in net.running_mean]
                net.running_var = [rng.uniform(0.5, 2.0, x.shape) for x in net.running_var]
        return m

    cell = cellular_model.copy() if cellular_model else untrained(IcgnnModel(16, 2, seed=seed))
    cf = cellfree_model.copy() if cellfree_model else untrained(IcgnnModel(1, 1, 2, (32, 128), (128, 32), seed=seed))
    forward = lambda m: (lambda g: icgnn_forward(m, g, False).data)
    worst_cell = worst_cf = 0.0
    for t in range(trials):
        sc, g = random_cellular_graph(rng)
        worst_cell = max(worst_cell, check_model_equivariance(forward(cell), C.model_graph(g, sc.total_power_w),
                                                              1, seed=[seed, t]))
        csc, stats, _ = random_cellfree_case(rng, n_mc=32)
        cg = F.model_graph(F.build_cellfree_wvg(stats, csc), csc)
        worst_cf = max(worst_cf, check_model_equivariance(forward(cf), cg, 1, seed=[seed, t]))
    return [CheckResult(f"ICGNN equivariance, {trials} cellular graphs", worst_cell, EQUIVARIANCE_TOL),
            CheckResult(f"ICGNN equivariance, {trials} cell-free graphs", worst_cf, EQUIVARIANCE_TOL)]


__all__ = ["CheckResult", "op_gradchecks", "loss_gradchecks", "invariance_checks", "equivariance_checks",
           "permute_rows"]
