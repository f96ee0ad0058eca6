"""Sequential MLPs with Monte-Carlo dropout, hand-written reverse mode, and Adam.

Inputs may carry any number of leading batch dimensions; parameter
gradients are summed over them. Weights are stored ``(out, in)`` so a
layer computes ``x @ W.T + b``.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatch, TapeMismatch

ACTIVATIONS = ("relu", "linear")


@dataclass
class MlpParams:
    """Weights/biases of a sequential MLP.

    ``skip`` adds the trailing ``out_dim`` entries of the input to the
    output (a residual connection onto the most recent state for the
    transition model).
    """
    weights: list
    biases: list
    activations: list
    skip: bool = False

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ShapeMismatch("weights, biases and activations must have equal length")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeMismatch(f"layer {i}: weight {w.shape} / bias {b.shape}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeMismatch(f"layer {i} input {w.shape[1]} != previous output "
                                    f"{self.weights[i - 1].shape[0]}")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        if self.skip and self.out_dim > self.in_dim:
            raise ShapeMismatch("skip connection needs in_dim >= out_dim")

    @property
    def dims(self):
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def in_dim(self):
        return self.weights[0].shape[1]

    @property
    def out_dim(self):
        return self.weights[-1].shape[0]

    def tensors(self):
        """Parameters in canonical order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self):
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                         list(self.activations), self.skip)

    def zeros_like(self):
        return MlpParams([np.zeros_like(w) for w in self.weights],
                         [np.zeros_like(b) for b in self.biases],
                         list(self.activations), self.skip)


def init_mlp(dims, rng, activations=None, skip=False):
    """He-style uniform fan-in initialization; ReLU hidden, linear output."""
    if activations is None:
        activations = ["relu"] * (len(dims) - 2) + ["linear"]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return MlpParams(weights, biases, list(activations), skip)


@dataclass
class GradTape:
    params: MlpParams
    inputs: list            # input to each layer
    pre: list               # pre-activations
    masks: list             # scaled dropout mask per layer, or None
    out_shape: tuple = ()


@dataclass
class Gradients:
    weights: list
    biases: list
    input: np.ndarray = field(repr=False, default=None)

    def tensors(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out


def forward(params, x, dropout_rate=0.0, rng=None):
    """Affine + activation stack with inverted dropout on hidden layers.

    Returns ``(output, tape)``. With ``dropout_rate > 0`` every hidden
    activation is multiplied by an independent Bernoulli(1 - rate) mask
    scaled by ``1 / (1 - rate)``.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != params.in_dim:
        raise ShapeMismatch(f"input has {x.shape[-1]} features, network expects {params.in_dim}")
    if not 0.0 <= dropout_rate < 1.0:
        raise ValueError("dropout_rate must be in [0, 1)")
    if dropout_rate > 0.0 and rng is None:
        raise ValueError("stochastic forward pass needs an rng")
    keep = 1.0 - dropout_rate
    n = len(params.weights)
    inputs, pre, masks = [], [], []
    h = x
    for i, (w, b, act) in enumerate(zip(params.weights, params.biases, params.activations)):
        inputs.append(h)
        z = h @ w.T + b
        pre.append(z)
        h = np.maximum(z, 0.0) if act == "relu" else z
        if i < n - 1 and dropout_rate > 0.0:
            mask = (rng.random(h.shape) < keep) / keep
            h = h * mask
            masks.append(mask)
        else:
            masks.append(None)
    if params.skip:
        h = h + x[..., x.shape[-1] - params.out_dim:]
    return h, GradTape(params, inputs, pre, masks, h.shape)


def backward(tape, output_grad):
    """Reverse pass through a recorded forward call.

    Returns parameter gradients (summed over batch dimensions) and the
    gradient with respect to the network input.
    """
    g = np.asarray(output_grad, dtype=float)
    if g.shape != tape.out_shape:
        raise TapeMismatch(f"output_grad shape {g.shape} != output shape {tape.out_shape}")
    params = tape.params
    n = len(params.weights)
    dws, dbs = [None] * n, [None] * n
    skip_grad = g
    for i in range(n - 1, -1, -1):
        if tape.masks[i] is not None:
            g = g * tape.masks[i]
        if params.activations[i] == "relu":
            g = g * (tape.pre[i] > 0.0)
        h = tape.inputs[i]
        g2 = g.reshape(-1, g.shape[-1])
        h2 = h.reshape(-1, h.shape[-1])
        dws[i] = g2.T @ h2
        dbs[i] = g2.sum(axis=0)
        g = g @ params.weights[i]
    if params.skip:
        k = params.out_dim
        g = g.copy()
        g[..., g.shape[-1] - k:] += skip_grad
    return Gradients(dws, dbs, g)


@dataclass
class Network:
    """Parameters plus the dropout rate used for every forward pass."""
    params: MlpParams
    dropout: float = 0.0

    @property
    def in_dim(self):
        return self.params.in_dim

    @property
    def out_dim(self):
        return self.params.out_dim

    def forward(self, x, rng=None):
        return forward(self.params, x, self.dropout, rng)

    def copy(self):
        return Network(self.params.copy(), self.dropout)


def mse(prediction, target):
    prediction = np.asarray(prediction, dtype=float)
    target = np.asarray(target, dtype=float)
    if prediction.shape != target.shape:
        raise ShapeMismatch(f"{prediction.shape} vs {target.shape}")
    return float(np.mean((prediction - target) ** 2))


def mse_grad(prediction, target):
    prediction = np.asarray(prediction, dtype=float)
    return 2.0 * (prediction - np.asarray(target, dtype=float)) / prediction.size


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params):
        ts = params.tensors()
        return cls([np.zeros_like(p) for p in ts], [np.zeros_like(p) for p in ts])


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update, applied in place. Returns
    ``(params, state)`` for convenience."""
    ps, gs = params.tensors(), grads.tensors()
    if len(ps) != len(gs) or len(ps) != len(state.m):
        raise ShapeMismatch("gradient/state structure does not match parameters")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(ps, gs, state.m, state.v):
        if p.shape != g.shape:
            raise ShapeMismatch(f"gradient {g.shape} vs parameter {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# -- checkpoints -------------------------------------------------------------

MANIFEST = "manifest.json"
WEIGHTS = "weights.bin"


def save_checkpoint(path, networks, dropout=None, metadata=None):
    """Write ``manifest.json`` + ``weights.bin`` (little-endian float32).

    :param networks: mapping name -> MlpParams, stored in insertion order
    :param dropout: mapping name -> dropout rate
    :param metadata: extra JSON-serializable architecture info
    """
    os.makedirs(path, exist_ok=True)
    dropout = dropout or {}
    order = []
    manifest = {"format": 1, "dtype": "<f4", "networks": {}, "tensor_order": order,
                "metadata": metadata or {}}
    chunks = []
    for name, p in networks.items():
        manifest["networks"][name] = {
            "dims": p.dims,
            "activations": list(p.activations),
            "skip": bool(p.skip),
            "dropout": float(dropout.get(name, 0.0)),
        }
        for i, (w, b) in enumerate(zip(p.weights, p.biases)):
            order.append({"network": name, "tensor": f"W{i}", "shape": list(w.shape)})
            order.append({"network": name, "tensor": f"b{i}", "shape": list(b.shape)})
            chunks += [w.astype("<f4").ravel(), b.astype("<f4").ravel()]
    with open(os.path.join(path, MANIFEST), "w") as fh:
        json.dump(manifest, fh, indent=2)
    blob = np.concatenate(chunks) if chunks else np.zeros(0, "<f4")
    with open(os.path.join(path, WEIGHTS), "wb") as fh:
        fh.write(blob.tobytes())


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`.

    :return: ``(networks, dropout, metadata)``
    """
    with open(os.path.join(path, MANIFEST)) as fh:
        manifest = json.load(fh)
    blob = np.fromfile(os.path.join(path, WEIGHTS), dtype="<f4").astype(float)
    expected = sum(int(np.prod(t["shape"])) for t in manifest["tensor_order"])
    if blob.size != expected:
        raise ShapeMismatch(f"weights.bin holds {blob.size} floats, manifest expects {expected}")
    tensors = {}
    pos = 0
    for t in manifest["tensor_order"]:
        size = int(np.prod(t["shape"]))
        tensors[(t["network"], t["tensor"])] = blob[pos:pos + size].reshape(t["shape"])
        pos += size
    networks, dropout = {}, {}
    for name, spec in manifest["networks"].items():
        n_layers = len(spec["dims"]) - 1
        networks[name] = MlpParams(
            [tensors[(name, f"W{i}")] for i in range(n_layers)],
            [tensors[(name, f"b{i}")] for i in range(n_layers)],
            spec["activations"], spec["skip"])
        dropout[name] = spec["dropout"]
    return networks, dropout, manifest.get("metadata", {})
