"""Experiment runner behind the command line: config loading, training,
evaluation sweeps, fine-tuning and CSV output."""
from __future__ import annotations

import copy
import csv
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import cellfree as F
from . import cellular as C
from .exceptions import ShapeError
from .model import IcgnnModel
from .training import (cellfree_model, cellfree_pool, cellular_model, substream, train_cellfree,
                       train_cellular)

log = logging.getLogger(__name__)

CSV_COLUMNS = ["scenario", "method", "sweep_var", "sweep_val", "mean_se", "stderr", "seconds", "seed"]
CSV_LEGEND = """scenario   scenario descriptor (kind and sizes)
method     ICGNN, L-ICGNN(T=..), WMMSE, MRT, Equal, LSF, ...
sweep_var  swept quantity (none, n_users, n_rx, n_aps, n_tx, csi_bound, finetune_steps)
sweep_val  value of the swept quantity
mean_se    mean weighted sum SE in bits/s/Hz over the evaluated realizations
stderr     standard error of that mean
seconds    wall-clock seconds for the method (0 unless timing is enabled)
seed       master seed of the run
"""
DESK_FRACTION = 0.05
DESK_MAX_STEPS = 5000
EVAL_CHUNK = 250

DEFAULTS = {
    "scenario": {
        "kind": "cellular",
        "n_tx": 8, "n_users": 4, "n_rx": 2,
        "total_power_dbm": 10.0, "cell_radius_m": 500.0,
        "n_aps": 6, "ap_power_dbm": 20.0, "uplink_power_dbm": 10.0,
        "dl_fraction": 0.95, "area_m": 1000.0,
        "bandwidth_hz": 20e6, "noise_psd_dbm_hz": -174.0,
        "user_weights": None,
    },
    "model": {"n_layers": 2, "weight_sharing": False, "seed": 0},
    "training": {"lr": 1e-3, "batch_size": 100, "steps": 1000, "seed": 0, "log_every": 100,
                 "pool_size": 4000, "pool_n_mc": 250},
    "eval": {"realizations": 10000, "cg_iterations": 6, "wmmse_iterations": 100,
             "n_mc": 1000, "csi_bounds": [0.0, 0.1, 0.25, 0.5], "edge_feature": "rms"},
    "generalize": {"var": "n_users", "values": [3, 4, 6]},
    "finetune": {"steps": 4, "lr": 3e-5, "seeds": [0, 1, 2, 3, 4], "scenario": {"n_aps": 8}},
    "output": {"checkpoint": "model.npz", "curve": "curve.csv", "results": "results.csv",
               "cache_dir": "cache"},
}


class ConfigError(ValueError):
    pass


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {path}{key}")
        if path + key == "finetune.scenario":
            unknown = set(value) - set(DEFAULTS["scenario"])
            if unknown:
                raise ConfigError(f"unknown config key {path}{key}.{sorted(unknown)[0]}")
            out[key] = dict(value)
        elif isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path}{key} must be an object")
            out[key] = _merge(base[key], value, f"{path}{key}.")
        else:
            out[key] = value
    return out


def load_config(path=None, overrides=None):
    """Defaults, then the JSON file at ``path``, then ``overrides``."""
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        with open(path) as fh:
            try:
                cfg = _merge(cfg, json.load(fh))
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path}: {e}") from None
    if overrides:
        cfg = _merge(cfg, overrides)
    kind = cfg["scenario"]["kind"]
    if kind not in ("cellular", "cellfree"):
        raise ConfigError(f"scenario.kind must be 'cellular' or 'cellfree', got {kind!r}")
    return cfg


def build_scenario(block):
    """dBm values are converted to watts here, once."""
    s = block
    noise = C.noise_power_w(s["bandwidth_hz"], s["noise_psd_dbm_hz"])
    if s["kind"] == "cellular":
        return C.CellularScenario(int(s["n_tx"]), int(s["n_users"]), int(s["n_rx"]),
                                  float(C.dbm_to_watts(s["total_power_dbm"])), noise,
                                  s.get("user_weights"), float(s["cell_radius_m"]))
    return F.CellFreeScenario(int(s["n_aps"]), int(s["n_users"]), int(s["n_tx"]),
                              float(C.dbm_to_watts(s["ap_power_dbm"])), noise,
                              float(C.dbm_to_watts(s["uplink_power_dbm"])), float(s["dl_fraction"]),
                              float(s["area_m"]), s.get("user_weights"))


def describe(scenario):
    if isinstance(scenario, C.CellularScenario):
        return f"cellular(Nt={scenario.n_tx},K={scenario.n_users},Nr={scenario.n_rx})"
    return f"cellfree(L={scenario.n_aps},K={scenario.n_users},Nt={scenario.n_tx})"


@dataclass
class RunContext:
    config: dict
    seed: int
    out_dir: str = "."
    desk_scale: bool = False
    threads: int = 1
    timing: bool = False

    @property
    def realizations(self):
        n = int(self.config["eval"]["realizations"])
        return max(1, int(round(n * DESK_FRACTION))) if self.desk_scale else n

    @property
    def steps(self):
        n = int(self.config["training"]["steps"])
        return min(n, DESK_MAX_STEPS) if self.desk_scale else n

    def path(self, key):
        p = self.config["output"][key]
        return p if os.path.isabs(p) else os.path.join(self.out_dir, p)


# ---------------------------------------------------------------- rows and CSV

def result_row(scenario, method, values, seconds, seed, sweep_var="none", sweep_val=""):
    values = np.asarray(values, float)
    stderr = float(values.std(ddof=1) / np.sqrt(len(values))) if len(values) > 1 else 0.0
    return {"scenario": describe(scenario), "method": method, "sweep_var": sweep_var,
            "sweep_val": sweep_val, "mean_se": float(values.mean()), "stderr": stderr,
            "seconds": seconds, "seed": seed}


def write_csv(path, rows, columns=CSV_COLUMNS):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    with open(os.path.splitext(path)[0] + ".legend.txt", "w") as fh:
        fh.write(CSV_LEGEND)


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def ratio_rows(rows, reference):
    """Each method's mean SE as a fraction of ``reference`` within the same sweep point."""
    ref = {(r["scenario"], r["sweep_var"], str(r["sweep_val"])): r["mean_se"]
           for r in rows if r["method"] == reference}
    out = []
    for r in rows:
        base = ref.get((r["scenario"], r["sweep_var"], str(r["sweep_val"])))
        if base:
            out.append({"scenario": r["scenario"], "method": r["method"], "sweep_var": r["sweep_var"],
                        "sweep_val": r["sweep_val"], "ratio": r["mean_se"] / base, "seed": r["seed"]})
    return out


def _timed(ctx, fn):
    t0 = time.perf_counter()
    out = fn()
    return out, (round(time.perf_counter() - t0, 6) if ctx.timing else 0.0)


def _chunks(total):
    return [(i, min(EVAL_CHUNK, total - i * EVAL_CHUNK)) for i in range((total + EVAL_CHUNK - 1) // EVAL_CHUNK)]


def _fan_out(ctx, fn, items):
    if ctx.threads > 1:
        with ThreadPoolExecutor(ctx.threads) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


# ---------------------------------------------------------------- draws

def cellular_draws(ctx, scenario, n, purpose="eval"):
    """Evaluation channels; chunk c uses substream (seed, purpose, c), so draws
    do not depend on the thread count."""
    parts = _fan_out(ctx, lambda c: C.generate_cellular(scenario, substream(ctx.seed, purpose, c[0]), size=c[1]),
                     _chunks(n))
    return np.concatenate(parts)


def cellfree_draws(ctx, scenario, n, purpose="eval"):
    n_mc = int(ctx.config["eval"]["n_mc"])

    def one(c):
        rng = substream(ctx.seed, purpose, c[0])
        beta = F.sample_geometry(scenario, rng, c[1])[2]
        return F.estimate_stats(scenario, n_mc, rng, beta=beta)

    parts = _fan_out(ctx, one, _chunks(n))
    return F.EffectiveChannelStats(
        np.concatenate([p.a for p in parts]), np.concatenate([p.b for p in parts]),
        np.concatenate([p.mean_gain for p in parts]), n_mc, np.concatenate([p.beta for p in parts]))


# ---------------------------------------------------------------- evaluation

def check_compatible(model, scenario):
    d2, d3 = (2 * scenario.n_tx, 2) if isinstance(scenario, C.CellularScenario) else (1, 1)
    if (model.d_channel, model.d_target) != (d2, d3):
        raise ShapeError("checkpoint (d2, d3) for this scenario", (d2, d3), (model.d_channel, model.d_target))


def evaluate_cellular(ctx, model, scenario, H, sweep_var="none", sweep_val="", H_design=None,
                      methods=("ICGNN", "L-ICGNN", "WMMSE", "MRT")):
    """Rows for every method; precoders are designed on ``H_design`` (defaults to ``H``)
    and scored on ``H``."""
    check_compatible(model, scenario)
    Hd = H if H_design is None else H_design
    ev = ctx.config["eval"]
    t_cg = min(int(ev["cg_iterations"]), scenario.n_tx)
    designs = {
        "ICGNN": lambda: C.icgnn_precoders(model, Hd, scenario),
        "L-ICGNN": lambda: C.icgnn_precoders(model, Hd, scenario, cg_iterations=t_cg),
        "WMMSE": lambda: C.wmmse_cellular(Hd, scenario, int(ev["wmmse_iterations"]))[0],
        "MRT": lambda: C.mrt_precoder(Hd, scenario),
    }
    rows = []
    for name in methods:
        V, secs = _timed(ctx, designs[name])
        label = f"L-ICGNN(T={t_cg})" if name == "L-ICGNN" else name
        rows.append(result_row(scenario, label, C.sum_rate_mimo(V, H, scenario), secs, ctx.seed,
                               sweep_var, sweep_val))
    return rows


def evaluate_cellfree(ctx, model, scenario, stats, sweep_var="none", sweep_val="", label="ICGNN",
                      methods=("ICGNN", "Equal", "LSF")):
    if model is not None:
        check_compatible(model, scenario)
    edge = ctx.config["eval"]["edge_feature"]
    n = len(stats.a)
    designs = {
        "ICGNN": lambda: F.icgnn_allocation(model, stats, scenario, edge),
        "Equal": lambda: F.equal_power(scenario, (n,)),
        "LSF": lambda: F.lsf_power(stats.beta, scenario),
    }
    rows = []
    for name in methods:
        p, secs = _timed(ctx, designs[name])
        rows.append(result_row(scenario, label if name == "ICGNN" else name,
                               F.se_cellfree(stats, p, scenario), secs, ctx.seed, sweep_var, sweep_val))
    return rows


def _load_model(path):
    return IcgnnModel.load(path)


# ---------------------------------------------------------------- commands

def cmd_train(ctx):
    cfg = ctx.config
    scenario = build_scenario(cfg["scenario"])
    m, tr = cfg["model"], cfg["training"]
    if isinstance(scenario, C.CellularScenario):
        model = cellular_model(scenario, m["n_layers"], m["weight_sharing"], m["seed"])
        curve = train_cellular(model, scenario, ctx.steps, tr["batch_size"], tr["lr"], ctx.seed,
                               tr["log_every"])
    else:
        model = cellfree_model(m["n_layers"], m["weight_sharing"], m["seed"])
        curve = train_cellfree(model, scenario, ctx.steps, tr["batch_size"], tr["lr"], ctx.seed,
                               tr["log_every"], pool_size=tr["pool_size"], n_mc=tr["pool_n_mc"],
                               cache_dir=ctx.path("cache_dir"), edge_feature=cfg["eval"]["edge_feature"])
    model.save(ctx.path("checkpoint"), extra={"scenario": cfg["scenario"], "steps": ctx.steps, "seed": ctx.seed})
    os.makedirs(ctx.out_dir, exist_ok=True)
    with open(ctx.path("curve"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for s, l in zip(curve.steps, curve.losses):
            w.writerow([s, repr(l)])
    return model, curve


def cmd_eval(ctx, checkpoint=None):
    model = _load_model(checkpoint or ctx.path("checkpoint"))
    scenario = build_scenario(ctx.config["scenario"])
    if isinstance(scenario, C.CellularScenario):
        rows = evaluate_cellular(ctx, model, scenario, cellular_draws(ctx, scenario, ctx.realizations))
        ref = "WMMSE"
    else:
        rows = evaluate_cellfree(ctx, model, scenario, cellfree_draws(ctx, scenario, ctx.realizations))
        ref = "LSF"
    _emit(ctx, rows, ref)
    return rows


def _emit(ctx, rows, reference):
    path = ctx.path("results")
    write_csv(path, rows)
    write_csv(os.path.splitext(path)[0] + ".ratios.csv", ratio_rows(rows, reference),
              ["scenario", "method", "sweep_var", "sweep_val", "ratio", "seed"])


def _resized(scenario, var, value):
    if isinstance(scenario, C.CellularScenario):
        if var not in ("n_users", "n_rx"):
            raise ConfigError("cellular sweeps support n_users or n_rx (N_t is fixed by the model)")
        return scenario.with_users(**{var: int(value)})
    if var not in ("n_aps", "n_users", "n_tx"):
        raise ConfigError("cell-free sweeps support n_aps, n_users or n_tx")
    return scenario.resized(**{var: int(value)})


def cmd_generalize(ctx, checkpoint=None, var=None, values=None):
    model = _load_model(checkpoint or ctx.path("checkpoint"))
    base = build_scenario(ctx.config["scenario"])
    g = ctx.config["generalize"]
    var = var or g["var"]
    values = values if values is not None else g["values"]
    rows = []
    for v in values:
        scenario = _resized(base, var, v)
        if isinstance(scenario, C.CellularScenario):
            rows += evaluate_cellular(ctx, model, scenario, cellular_draws(ctx, scenario, ctx.realizations),
                                      var, v)
        else:
            rows += evaluate_cellfree(ctx, model, scenario, cellfree_draws(ctx, scenario, ctx.realizations),
                                      var, v)
    _emit(ctx, rows, "WMMSE" if isinstance(base, C.CellularScenario) else "LSF")
    return rows


def finetune_model(ctx, model, scenario, steps, seed):
    """Copy of ``model`` after ``steps`` Adam updates on the given scenario."""
    tuned = model.copy()
    if steps == 0:
        return tuned
    tr = ctx.config["training"]
    # A fresh Adam moves every weight by about lr on its first steps, so the
    # fine-tuning rate sits well below the training rate.
    lr = float(ctx.config["finetune"]["lr"])
    if isinstance(scenario, C.CellularScenario):
        train_cellular(tuned, scenario, steps, tr["batch_size"], lr, seed, 0, purpose="finetune")
    else:
        pool = cellfree_pool(scenario, tr["batch_size"], tr["pool_n_mc"], seed, ctx.path("cache_dir"),
                             purpose="finetune")
        train_cellfree(tuned, scenario, steps, tr["batch_size"], lr, seed, 0, pool=pool,
                       edge_feature=ctx.config["eval"]["edge_feature"], purpose="finetune")
    return tuned


def cmd_finetune(ctx, checkpoint=None, steps=None):
    """Frozen vs fine-tuned SE on the shifted scenario, one fine-tuned row per seed."""
    model = _load_model(checkpoint or ctx.path("checkpoint"))
    ft = ctx.config["finetune"]
    steps = int(ft["steps"] if steps is None else steps)
    if steps < 0:
        raise ConfigError("finetune steps must be >= 0")
    block = dict(ctx.config["scenario"], **ft["scenario"])
    scenario = build_scenario(block)
    cellular = isinstance(scenario, C.CellularScenario)
    data = (cellular_draws if cellular else cellfree_draws)(ctx, scenario, ctx.realizations)

    def rows_for(m, label, seed):
        if cellular:
            rows = evaluate_cellular(ctx, m, scenario, data, "finetune_steps", steps, methods=("ICGNN",))
            rows[0]["method"] = label
        else:
            rows = evaluate_cellfree(ctx, m, scenario, data, "finetune_steps", steps, label, methods=("ICGNN",))
        rows[0]["seed"] = seed
        return rows

    rows = rows_for(model, "ICGNN-frozen", ctx.seed)
    tuned = None
    for s in ft["seeds"]:
        tuned = finetune_model(ctx, model, scenario, steps, int(s) + 1000 * ctx.seed)
        rows += rows_for(tuned, "ICGNN-finetuned", int(s))
    if tuned is not None:
        tuned.save(os.path.splitext(ctx.path("checkpoint"))[0] + ".finetuned.npz",
                   extra={"scenario": block, "finetune_steps": steps})
    _emit(ctx, rows, "ICGNN-frozen")
    return rows


def cmd_csi_sweep(ctx, checkpoint=None, bounds=None):
    """Precoders from perturbed channels, scored on the true ones. Bounds are
    fractions of the average per-user Frobenius norm of the evaluation channels."""
    model = _load_model(checkpoint or ctx.path("checkpoint"))
    scenario = build_scenario(ctx.config["scenario"])
    if not isinstance(scenario, C.CellularScenario):
        raise ConfigError("csi-sweep applies to the cellular scenario")
    bounds = ctx.config["eval"]["csi_bounds"] if bounds is None else bounds
    H = cellular_draws(ctx, scenario, ctx.realizations)
    avg = float(np.mean(np.linalg.norm(H, axis=(-2, -1))))
    rows = []
    for i, frac in enumerate(bounds):
        if frac < 0:
            raise ConfigError("CSI error bounds must be non-negative")
        H_hat = C.perturb_csi(H, frac * avg, substream(ctx.seed, "csi", i))
        rows += evaluate_cellular(ctx, model, scenario, H, "csi_bound", frac, H_design=H_hat,
                                  methods=("ICGNN", "WMMSE"))
    _emit(ctx, rows, "WMMSE")
    return rows
