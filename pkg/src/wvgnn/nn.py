"""Fully connected networks with batch normalization, plus Adam."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .exceptions import NonFiniteError, ShapeError

CHECKPOINT_VERSION = 1
BN_MOMENTUM = 0.1
BN_EPS = 1e-5

_ACTIVATIONS = {"tanh": T.tanh, "sigmoid": T.sigmoid}


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple
    output_activation: str = "tanh"
    batchnorm: bool = True

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        if self.output_activation not in _ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")

    def to_dict(self):
        return {"widths": list(self.widths), "output_activation": self.output_activation,
                "batchnorm": self.batchnorm}


class Mlp:
    """affine -> batchnorm -> tanh per hidden layer; affine -> activation at the output.

    Weights and biases are drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    """

    def __init__(self, spec, rng=None):
        self.spec = spec
        rng = np.random.default_rng(rng)
        self.weights, self.biases = [], []
        for fan_in, fan_out in zip(spec.widths[:-1], spec.widths[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            self.weights.append(T.Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), requires_grad=True))
            self.biases.append(T.Tensor(rng.uniform(-bound, bound, fan_out), requires_grad=True))
        hidden = spec.widths[1:-1] if spec.batchnorm else ()
        self.bn_scale = [T.Tensor(np.ones(w), requires_grad=True) for w in hidden]
        self.bn_shift = [T.Tensor(np.zeros(w), requires_grad=True) for w in hidden]
        self.running_mean = [np.zeros(w) for w in hidden]
        self.running_var = [np.ones(w) for w in hidden]

    def parameters(self):
        params = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            params += [w, b]
            if i < len(self.bn_scale):
                params += [self.bn_scale[i], self.bn_shift[i]]
        return params

    def named_arrays(self):
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{i}"] = w.data
            out[f"b{i}"] = b.data
        for i in range(len(self.bn_scale)):
            out[f"bn{i}.scale"] = self.bn_scale[i].data
            out[f"bn{i}.shift"] = self.bn_shift[i].data
            out[f"bn{i}.mean"] = self.running_mean[i]
            out[f"bn{i}.var"] = self.running_var[i]
        return out

    def load_arrays(self, arrays):
        for i in range(len(self.weights)):
            self.weights[i].data = np.array(arrays[f"W{i}"], dtype=np.float64)
            self.biases[i].data = np.array(arrays[f"b{i}"], dtype=np.float64)
        for i in range(len(self.bn_scale)):
            self.bn_scale[i].data = np.array(arrays[f"bn{i}.scale"], dtype=np.float64)
            self.bn_shift[i].data = np.array(arrays[f"bn{i}.shift"], dtype=np.float64)
            self.running_mean[i] = np.array(arrays[f"bn{i}.mean"], dtype=np.float64)
            self.running_var[i] = np.array(arrays[f"bn{i}.var"], dtype=np.float64)

    def __call__(self, x, training=False):
        return mlp_forward(self, x, training)


def _batchnorm(mlp, i, h, training):
    if training:
        n = h.shape[0]
        mu = h.mean(axis=0, keepdims=True)
        centered = h - mu
        var = T.square(centered).mean(axis=0, keepdims=True)
        unbiased = var.data[0] * (n / (n - 1) if n > 1 else 1.0)
        mlp.running_mean[i] = (1 - BN_MOMENTUM) * mlp.running_mean[i] + BN_MOMENTUM * mu.data[0]
        mlp.running_var[i] = (1 - BN_MOMENTUM) * mlp.running_var[i] + BN_MOMENTUM * unbiased
        normed = centered / T.sqrt(var + BN_EPS)
    else:
        normed = (h - mlp.running_mean[i]) / np.sqrt(mlp.running_var[i] + BN_EPS)
    return normed * mlp.bn_scale[i] + mlp.bn_shift[i]


def mlp_forward(mlp, x, training=False):
    """Forward pass on a (rows, in) input. Training mode uses batch statistics
    and updates the running ones."""
    x = T.as_tensor(x)
    if x.ndim != 2 or x.shape[1] != mlp.spec.widths[0]:
        raise ShapeError("MLP input", (None, mlp.spec.widths[0]), x.shape)
    h = x
    last = len(mlp.weights) - 1
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        h = h @ w + b
        if i < last:
            if i < len(mlp.bn_scale):
                h = _batchnorm(mlp, i, h, training)
            h = T.tanh(h)
    return _ACTIVATIONS[mlp.spec.output_activation](h)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state):
    """One bias-corrected Adam update, applied in place to ``params`` (Tensors)."""
    if len(grads) != len(params):
        raise ShapeError("gradient list", len(params), len(grads))
    for i, (p, g) in enumerate(zip(params, grads)):
        if g.shape != p.shape:
            raise ShapeError(f"gradient block {i}", p.shape, g.shape)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in parameter block {i} (shape {p.shape})")
    if not state.m:
        state.m = [np.zeros(p.shape) for p in params]
        state.v = [np.zeros(p.shape) for p in params]
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def step(self, grads):
        adam_step(self.params, grads, self.state)


def save_arrays(path, header, arrays):
    """Write a checkpoint: named float arrays plus a JSON header in one .npz file."""
    header = dict(header, format_version=CHECKPOINT_VERSION)
    payload = {k: np.asarray(v) for k, v in arrays.items()}
    payload["__header__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_arrays(path):
    with np.load(path) as z:
        header = json.loads(bytes(z["__header__"]).decode())
        arrays = {k: z[k] for k in z.files if k != "__header__"}
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('format_version')}")
    return header, arrays


def save_mlp(path, mlp):
    save_arrays(path, {"kind": "mlp", "spec": mlp.spec.to_dict()}, mlp.named_arrays())


def load_mlp(path):
    header, arrays = load_arrays(path)
    mlp = Mlp(MlpSpec(**{**header["spec"], "widths": tuple(header["spec"]["widths"])}), rng=0)
    mlp.load_arrays(arrays)
    return mlp
