"""Information-carrying GNN: MAX-aggregated message passing that rewrites only
the target features while the channel features stay fixed."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .exceptions import ShapeError
from .nn import Mlp, MlpSpec, load_arrays, save_arrays

MESSAGE_WIDTH = 64


class IcgnnModel:
    """Stack of (message M, update U) MLP pairs.

    M sees (channel_j, target_j, edge_ji) and ends in Tanh with ``MESSAGE_WIDTH``
    outputs; U sees (channel_i, target_i, aggregated message) and ends in a
    Sigmoid with ``d_target`` outputs. With ``weight_sharing`` one pair is
    reused by every layer.
    """

    def __init__(self, d_channel, d_target, n_layers=2, message_hidden=(128, 256),
                 update_hidden=(128, 32), weight_sharing=False, seed=0):
        if n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        self.d_channel = int(d_channel)
        self.d_target = int(d_target)
        self.n_layers = int(n_layers)
        self.message_hidden = tuple(message_hidden)
        self.update_hidden = tuple(update_hidden)
        self.weight_sharing = bool(weight_sharing)
        self.seed = seed
        d_node = self.d_channel + self.d_target
        self.message_spec = MlpSpec((d_node + self.d_channel, *self.message_hidden, MESSAGE_WIDTH), "tanh")
        self.update_spec = MlpSpec((d_node + MESSAGE_WIDTH, *self.update_hidden, self.d_target), "sigmoid")
        rng = np.random.default_rng(seed)
        n_pairs = 1 if self.weight_sharing else self.n_layers
        self.pairs = [(Mlp(self.message_spec, rng), Mlp(self.update_spec, rng)) for _ in range(n_pairs)]

    def layer(self, l):
        return self.pairs[0 if self.weight_sharing else l]

    def parameters(self):
        return [p for m, u in self.pairs for p in m.parameters() + u.parameters()]

    def header(self):
        return {
            "kind": "icgnn",
            "n_layers": self.n_layers,
            "d_node": self.d_channel + self.d_target,
            "d_channel": self.d_channel,
            "d_target": self.d_target,
            "weight_sharing": self.weight_sharing,
            "message_hidden": list(self.message_hidden),
            "update_hidden": list(self.update_hidden),
            "message_spec": self.message_spec.to_dict(),
            "update_spec": self.update_spec.to_dict(),
            "seed": self.seed,
        }

    def state_arrays(self):
        out = {}
        for p, (m, u) in enumerate(self.pairs):
            out.update({f"pair{p}.message.{k}": v for k, v in m.named_arrays().items()})
            out.update({f"pair{p}.update.{k}": v for k, v in u.named_arrays().items()})
        return out

    def load_state_arrays(self, arrays):
        for p, (m, u) in enumerate(self.pairs):
            m.load_arrays({k.split(".", 2)[2]: v for k, v in arrays.items() if k.startswith(f"pair{p}.message.")})
            u.load_arrays({k.split(".", 2)[2]: v for k, v in arrays.items() if k.startswith(f"pair{p}.update.")})

    def save(self, path, extra=None):
        save_arrays(path, {**self.header(), "extra": extra or {}}, self.state_arrays())

    @classmethod
    def load(cls, path):
        header, arrays = load_arrays(path)
        if header.get("kind") != "icgnn":
            raise ValueError(f"{path} is not an ICGNN checkpoint")
        model = cls(header["d_channel"], header["d_target"], header["n_layers"],
                    header["message_hidden"], header["update_hidden"], header["weight_sharing"],
                    header["seed"])
        model.load_state_arrays(arrays)
        model.extra = header.get("extra", {})
        return model

    def copy(self):
        clone = IcgnnModel(self.d_channel, self.d_target, self.n_layers, self.message_hidden,
                           self.update_hidden, self.weight_sharing, self.seed)
        clone.load_state_arrays({k: v.copy() for k, v in self.state_arrays().items()})
        return clone

    def __call__(self, graph, training=False):
        return icgnn_forward(self, graph, training)


def _batched(graph):
    xrc = graph.channel_features
    single = xrc.ndim == 2
    if single:
        return (xrc[None], graph.target_features[None], graph.edge_features[None]), True
    return (xrc, graph.target_features, graph.edge_features), False


def icgnn_layer(pair, graph, gamma, training=False):
    """One message-passing round. ``gamma`` is the (batch, V, d3) target feature
    tensor; returns the updated one."""
    message_net, update_net = pair
    (xrc, _, edge), _ = _batched(graph)
    gamma = T.as_tensor(gamma)
    if gamma.ndim != 3 or gamma.shape[:2] != (xrc.shape[0], graph.n_nodes):
        raise ShapeError("target features", (xrc.shape[0], graph.n_nodes, graph.d_target), gamma.shape)
    b, v, d3 = gamma.shape
    src, dst = graph.edges()
    n_edges = len(src)
    if n_edges:
        msg_in = T.concat([xrc[:, src], gamma[:, src], edge[:, src, dst]], axis=-1)
        msgs = message_net(msg_in.reshape(b * n_edges, -1), training).reshape(b, n_edges, MESSAGE_WIDTH)
        agg = T.segment_max(msgs, dst, v)
    else:
        agg = T.Tensor(np.zeros((b, v, MESSAGE_WIDTH)))
    upd_in = T.concat([xrc, gamma, agg], axis=-1)
    return update_net(upd_in.reshape(b * v, -1), training).reshape(b, v, d3)


def icgnn_forward(model, graph, training=False):
    """Run all layers; each layer's raw Sigmoid output feeds the next layer.

    Returns a Tensor shaped like ``graph.target_features``.
    """
    if graph.d_channel != model.d_channel or graph.d_target != model.d_target:
        raise ShapeError("graph (d_channel, d_target) for layer 0",
                         (model.d_channel, model.d_target), (graph.d_channel, graph.d_target))
    prepared, single = _batched(graph)
    gamma = T.Tensor(prepared[1])
    for l in range(model.n_layers):
        gamma = icgnn_layer(model.layer(l), graph, gamma, training)
    return gamma.reshape(gamma.shape[1:]) if single else gamma
