"""Wireless virtual graph: node/edge feature containers and node permutations.

All per-node arrays keep the node axis second to last (or third to last for
the edge tensor), so a leading batch axis of graphs with a shared structure is
allowed everywhere.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .exceptions import NonFiniteError, ShapeError


@dataclass(frozen=True, eq=False)
class WvgGraph:
    channel_features: np.ndarray   # (..., V, d2)
    target_features: np.ndarray    # (..., V, d3)
    edge_features: np.ndarray      # (..., V, V, d2); [j, i] is the edge j -> i
    node_weights: np.ndarray       # (..., V)
    mask: np.ndarray               # (V, V) bool, shared across a batch
    node_noise: np.ndarray = None  # (..., V) receiver noise power, optional
    node_labels: np.ndarray = None  # (V, q) int bookkeeping (user, antenna/AP)

    def __post_init__(self):
        v = self.mask.shape[0]
        if self.mask.shape != (v, v) or self.mask.dtype != bool:
            raise ShapeError("adjacency mask", (v, v), self.mask.shape)
        if np.any(np.diag(self.mask)):
            raise ValueError("adjacency mask must have a false diagonal")
        if self.channel_features.shape[-2] != v or self.target_features.shape[-2] != v:
            raise ShapeError("node feature rows", v,
                             (self.channel_features.shape[-2], self.target_features.shape[-2]))
        if self.edge_features.shape[-3:-1] != (v, v):
            raise ShapeError("edge features", (v, v), self.edge_features.shape[-3:-1])
        if self.edge_features.shape[-1] != self.channel_features.shape[-1]:
            raise ShapeError("edge feature width", self.channel_features.shape[-1],
                             self.edge_features.shape[-1])
        diag = np.diagonal(self.edge_features, axis1=-3, axis2=-2)
        if np.any(diag != 0):
            raise ValueError("self-edges must carry zero features")

    @property
    def n_nodes(self):
        return self.mask.shape[0]

    @property
    def batch_shape(self):
        return self.channel_features.shape[:-2]

    @property
    def d_channel(self):
        return self.channel_features.shape[-1]

    @property
    def d_target(self):
        return self.target_features.shape[-1]

    @property
    def node_features(self):
        return np.concatenate([self.channel_features, self.target_features], axis=-1)

    @property
    def edge_matrix(self):
        """2-D view of single-width edge features."""
        if self.d_channel != 1:
            raise ShapeError("edge feature width for matrix view", 1, self.d_channel)
        return self.edge_features[..., 0]

    def edges(self):
        """(src, dst) of every directed edge, sorted by destination then source."""
        dst, src = np.nonzero(self.mask.T)
        return src, dst

    def in_degree(self):
        return self.mask.sum(axis=0)

    def with_targets(self, target_features):
        return replace(self, target_features=np.asarray(target_features, dtype=np.float64))

    def __getitem__(self, b):
        """Select one graph (or a sub-batch) from a batched graph."""
        return replace(
            self,
            channel_features=self.channel_features[b],
            target_features=self.target_features[b],
            edge_features=self.edge_features[b],
            node_weights=self.node_weights[b],
            node_noise=None if self.node_noise is None else self.node_noise[b],
        )


def stack_graphs(graphs):
    first = graphs[0]
    for g in graphs[1:]:
        if g.n_nodes != first.n_nodes or not np.array_equal(g.mask, first.mask):
            raise ValueError("only graphs with identical structure can be batched")
    noise = None if first.node_noise is None else np.stack([g.node_noise for g in graphs])
    return WvgGraph(
        channel_features=np.stack([g.channel_features for g in graphs]),
        target_features=np.stack([g.target_features for g in graphs]),
        edge_features=np.stack([g.edge_features for g in graphs]),
        node_weights=np.stack([g.node_weights for g in graphs]),
        mask=first.mask,
        node_noise=noise,
        node_labels=first.node_labels,
    )


@dataclass(frozen=True)
class Permutation:
    """Node relabelling: node i moves to position ``mapping[i]``."""
    mapping: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mapping, dtype=np.int64)
        if m.ndim != 1 or not np.array_equal(np.sort(m), np.arange(len(m))):
            raise ValueError("permutation mapping must be a bijection on 0..n-1")
        object.__setattr__(self, "mapping", m)

    def __len__(self):
        return len(self.mapping)

    @property
    def order(self):
        """Gather index: new position p holds old node order[p]."""
        return np.argsort(self.mapping)

    def inverse(self):
        return Permutation(self.order)

    def then(self, other):
        """Composition: apply self first, then other."""
        return Permutation(other.mapping[self.mapping])

    @classmethod
    def identity(cls, n):
        return cls(np.arange(n))

    @classmethod
    def random(cls, n, rng):
        return cls(np.random.default_rng(rng).permutation(n))

    @classmethod
    def swap(cls, n, i, j):
        m = np.arange(n)
        m[i], m[j] = j, i
        return cls(m)


def permute_rows(x, perm):
    """(pi * x)[pi(i)] = x[i] along the node axis -2 (or -1 for vectors)."""
    return np.take(x, perm.order, axis=-2 if np.ndim(x) >= 2 else -1)


def apply_permutation(g, perm):
    if len(perm) != g.n_nodes:
        raise ShapeError("permutation length", g.n_nodes, len(perm))
    order = perm.order
    edge = np.take(np.take(g.edge_features, order, axis=-3), order, axis=-2)
    return WvgGraph(
        channel_features=np.take(g.channel_features, order, axis=-2),
        target_features=np.take(g.target_features, order, axis=-2),
        edge_features=edge,
        node_weights=np.take(g.node_weights, order, axis=-1),
        mask=g.mask[np.ix_(order, order)],
        node_noise=None if g.node_noise is None else np.take(g.node_noise, order, axis=-1),
        node_labels=None if g.node_labels is None else g.node_labels[order],
    )


def graphs_equal(a, b):
    def same(x, y):
        return (x is None and y is None) or (x is not None and y is not None and np.array_equal(x, y))

    return all(same(getattr(a, f), getattr(b, f)) for f in (
        "channel_features", "target_features", "edge_features", "node_weights",
        "mask", "node_noise", "node_labels"))


def check_objective_invariance(objective, g, trials=10, seed=0):
    """Worst |objective(pi * g) - objective(g)| over random node permutations."""
    rng = np.random.default_rng(seed)
    base = float(objective(g))
    if not np.isfinite(base):
        raise NonFiniteError("objective is not finite on the input graph")
    worst = 0.0
    for _ in range(trials):
        value = float(objective(apply_permutation(g, Permutation.random(g.n_nodes, rng))))
        if not np.isfinite(value):
            raise NonFiniteError("objective is not finite on a permuted graph")
        worst = max(worst, abs(value - base))
    return worst


def check_model_equivariance(forward, g, trials=10, seed=0):
    """Worst |forward(pi * g) - pi * forward(g)| over random node permutations."""
    rng = np.random.default_rng(seed)
    base = np.asarray(forward(g))
    if not np.all(np.isfinite(base)):
        raise NonFiniteError("model output is not finite on the input graph")
    worst = 0.0
    for _ in range(trials):
        perm = Permutation.random(g.n_nodes, rng)
        out = np.asarray(forward(apply_permutation(g, perm)))
        if not np.all(np.isfinite(out)):
            raise NonFiniteError("model output is not finite on a permuted graph")
        worst = max(worst, float(np.max(np.abs(out - permute_rows(base, perm)), initial=0.0)))
    return worst


def dump_graph(g, path=None):
    """Plain JSON dump of every field (debugging aid)."""
    doc = {
        "n_nodes": g.n_nodes,
        "channel_features": g.channel_features.tolist(),
        "target_features": g.target_features.tolist(),
        "edge_features": g.edge_features.tolist(),
        "node_weights": g.node_weights.tolist(),
        "mask": g.mask.astype(int).tolist(),
        "node_noise": None if g.node_noise is None else g.node_noise.tolist(),
        "node_labels": None if g.node_labels is None else g.node_labels.tolist(),
    }
    text = json.dumps(doc, indent=1)
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


def load_graph(text):
    doc = json.loads(text)

    def arr(key, dtype=np.float64):
        return None if doc[key] is None else np.asarray(doc[key], dtype=dtype)

    return WvgGraph(
        channel_features=arr("channel_features"),
        target_features=arr("target_features"),
        edge_features=arr("edge_features"),
        node_weights=arr("node_weights"),
        mask=arr("mask", bool),
        node_noise=arr("node_noise"),
        node_labels=arr("node_labels", np.int64),
    )
