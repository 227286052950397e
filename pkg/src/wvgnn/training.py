"""Unsupervised training loops and seeded random substreams."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import cellfree as F
from . import cellular as C
from .exceptions import NonFiniteError
from .model import IcgnnModel
from .nn import Adam
from .tensor import Tape

log = logging.getLogger(__name__)

# Purpose tags for substreams; values are part of the reproducibility contract.
PURPOSES = {"train": 1, "eval": 2, "csi": 3, "finetune": 4, "geometry": 5, "mc": 6, "grid": 7, "test": 8}


def substream(seed, purpose, index=0):
    """Independent generator for (master seed, purpose, index)."""
    return np.random.default_rng([int(seed), PURPOSES[purpose], int(index)])


class TrainingAborted(NonFiniteError):
    def __init__(self, step, model):
        super().__init__(f"non-finite loss at step {step}; parameters rolled back to step {step - 1}")
        self.step = step
        self.model = model


@dataclass
class TrainingCurve:
    steps: list = field(default_factory=list)
    losses: list = field(default_factory=list)

    def add(self, step, loss):
        self.steps.append(step)
        self.losses.append(float(loss))


def cellular_model(scenario, n_layers=2, weight_sharing=False, seed=0):
    return IcgnnModel(2 * scenario.n_tx, 2, n_layers, (128, 256), (128, 32), weight_sharing, seed)


def cellfree_model(n_layers=2, weight_sharing=False, seed=0):
    return IcgnnModel(1, 1, n_layers, (32, 128), (128, 32), weight_sharing, seed)


def _run(model, steps, loss_fn, lr, log_every, optimizer=None):
    params = model.parameters()
    opt = optimizer or Adam(params, lr=lr)
    curve = TrainingCurve()
    for step in range(steps):
        good = {k: v.copy() for k, v in model.state_arrays().items()}
        with Tape() as tape:
            loss = loss_fn(step)
            value = float(loss.data)
            if not np.isfinite(value):
                model.load_state_arrays(good)
                raise TrainingAborted(step, model)
            grads = tape.gradient(loss, params)
        opt.step(grads)
        curve.add(step, value)
        if log_every and step % log_every == 0:
            log.info("step %d loss %.6f", step, value)
    return curve, opt


def train_cellular(model, scenario, steps, batch_size=100, lr=1e-3, seed=0, log_every=100,
                   channels=None, purpose="train"):
    """Adam on the negative mean weighted sum rate. Batches are fresh draws
    unless ``channels`` (n, K, N_t, N_r) is given, which is then cycled."""
    def loss_fn(step):
        if channels is None:
            H = C.generate_cellular(scenario, substream(seed, purpose, step), size=batch_size)
        else:
            idx = substream(seed, purpose, step).choice(len(channels), min(batch_size, len(channels)), replace=False)
            H = channels[idx]
        return C.cellular_loss(model, H, scenario, training=True)

    curve, _ = _run(model, steps, loss_fn, lr, log_every)
    return curve


def cellfree_pool(scenario, n_geometries, n_mc, seed, cache_dir=None, purpose="geometry"):
    return F.cached_stats(cache_dir, scenario, n_geometries, n_mc, int(substream(seed, purpose).integers(2**31)))


def train_cellfree(model, scenario, steps, batch_size=100, lr=1e-3, seed=0, log_every=100,
                   pool=None, pool_size=4000, n_mc=250, cache_dir=None, edge_feature="rms",
                   purpose="train"):
    """Adam on the negative mean SE over batches drawn from a pool of layouts."""
    if pool is None:
        pool = cellfree_pool(scenario, pool_size, n_mc, seed, cache_dir)
    n = len(pool.a)

    def loss_fn(step):
        idx = np.sort(substream(seed, purpose, step).choice(n, min(batch_size, n), replace=False))
        return F.cellfree_loss(model, pool[idx], scenario, True, edge_feature)

    curve, _ = _run(model, steps, loss_fn, lr, log_every)
    return curve
