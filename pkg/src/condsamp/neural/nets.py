"""Dense networks with batch normalisation, hand-written backprop, and Adam.

Each layer computes ``affine -> [batchnorm] -> activation``.  ``forward``
returns the output and a cache; ``backward`` consumes that cache and refuses
to run if the parameters changed after the forward pass.
"""

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

ACTIVATIONS = ("relu", "leaky_relu", "sigmoid", "identity")


class StaleCacheError(RuntimeError):
    pass


def sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _act(name, z, slope):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "leaky_relu":
        return np.where(z >= 0, z, slope * z)
    if name == "sigmoid":
        return sigmoid(z)
    return z


def _act_grad(name, z, a, slope, g):
    if name == "relu":
        return g * (z > 0)
    if name == "leaky_relu":
        return np.where(z >= 0, g, slope * g)
    if name == "sigmoid":
        return g * a * (1.0 - a)
    return g


@dataclass
class BatchNorm:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps_bn: float = 1e-5

    @classmethod
    def fresh(cls, width, momentum=0.1, eps_bn=1e-5):
        return cls(np.ones(width), np.zeros(width), np.zeros(width), np.ones(width),
                   momentum, eps_bn)


@dataclass
class Layer:
    W: np.ndarray
    b: np.ndarray
    activation: str = "identity"
    bn: Optional[BatchNorm] = None
    slope: float = 0.2

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def n_in(self):
        return self.W.shape[0]

    @property
    def n_out(self):
        return self.W.shape[1]


@dataclass
class ForwardCache:
    version: int
    inputs: list
    pre_bn: list
    bn_stats: list
    pre_act: list
    outputs: list


@dataclass
class DenseNet:
    layers: List[Layer]
    mode: str = "train"
    _version: int = field(default=0, repr=False)

    def __post_init__(self):
        for a, b in zip(self.layers[:-1], self.layers[1:]):
            if a.n_out != b.n_in:
                raise ValueError(f"layer widths do not chain: {a.n_out} -> {b.n_in}")

    @classmethod
    def build(cls, sizes, activations, batchnorm, gen: np.random.Generator, slope=0.2):
        """Fan-in uniform init: ``W, b ~ U(-1/sqrt(n_in), 1/sqrt(n_in))``."""
        layers = []
        for (n_in, n_out), act, bn in zip(zip(sizes[:-1], sizes[1:]), activations, batchnorm):
            bound = 1.0 / np.sqrt(n_in)
            W = gen.uniform(-bound, bound, (n_in, n_out))
            b = gen.uniform(-bound, bound, n_out)
            layers.append(Layer(W, b, act, BatchNorm.fresh(n_out) if bn else None, slope))
        return cls(layers)

    @property
    def n_in(self):
        return self.layers[0].n_in

    @property
    def n_out(self):
        return self.layers[-1].n_out

    def params(self):
        """Trainable arrays in a fixed order (W, b, [gamma, beta] per layer)."""
        out = []
        for L in self.layers:
            out += [L.W, L.b]
            if L.bn is not None:
                out += [L.bn.gamma, L.bn.beta]
        return out

    def buffers(self):
        out = []
        for L in self.layers:
            if L.bn is not None:
                out += [L.bn.running_mean, L.bn.running_var]
        return out

    def touch(self):
        """Mark parameters as modified; outstanding caches become stale."""
        self._version += 1

    def __call__(self, x, mode=None):
        return forward(self, x, mode)[0]


def forward(net: DenseNet, batch, mode=None):
    """Return ``(output, cache)``.  Train mode uses and updates batch statistics."""
    mode = mode or net.mode
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    h = np.asarray(batch, dtype=float)
    if h.ndim != 2 or h.shape[1] != net.n_in:
        raise ValueError(f"expected batch of width {net.n_in}, got shape {h.shape}")
    cache = ForwardCache(net._version, [], [], [], [], [])
    for L in net.layers:
        cache.inputs.append(h)
        z = h @ L.W + L.b
        cache.pre_bn.append(z)
        stats = None
        if L.bn is not None:
            bn = L.bn
            if mode == "train":
                B = z.shape[0]
                if B < 2:
                    raise ValueError("batch normalisation in train mode needs at least 2 rows")
                mu = z.mean(axis=0)
                var = z.var(axis=0)
                inv = 1.0 / np.sqrt(var + bn.eps_bn)
                xhat = (z - mu) * inv
                bn.running_mean *= 1.0 - bn.momentum
                bn.running_mean += bn.momentum * mu
                bn.running_var *= 1.0 - bn.momentum
                bn.running_var += bn.momentum * var * B / (B - 1)
                stats = (xhat, inv)
            else:
                xhat = (z - bn.running_mean) / np.sqrt(bn.running_var + bn.eps_bn)
            z = bn.gamma * xhat + bn.beta
        cache.bn_stats.append(stats)
        cache.pre_act.append(z)
        h = _act(L.activation, z, L.slope)
        cache.outputs.append(h)
    return h, cache


def backward(net: DenseNet, cache: ForwardCache, upstream, skip_last_activation=False):
    """Backpropagate ``upstream = dLoss/dOutput`` through a train-mode cache.

    With ``skip_last_activation`` the upstream gradient is taken to be with
    respect to the final pre-activation instead (for losses written in
    logits).  Returns ``(param_grads, input_grad)`` with ``param_grads``
    aligned with ``net.params()``.
    """
    if cache.version != net._version:
        raise StaleCacheError("parameters changed since this forward pass")
    g = np.asarray(upstream, dtype=float)
    grads = []
    n = len(net.layers)
    for idx in range(n - 1, -1, -1):
        L = net.layers[idx]
        if not (skip_last_activation and idx == n - 1):
            g = _act_grad(L.activation, cache.pre_act[idx], cache.outputs[idx], L.slope, g)
        layer_grads = []
        if L.bn is not None:
            stats = cache.bn_stats[idx]
            if stats is None:
                raise StaleCacheError("backward needs a train-mode forward pass")
            xhat, inv = stats
            dgamma = np.sum(g * xhat, axis=0)
            dbeta = np.sum(g, axis=0)
            dxhat = g * L.bn.gamma
            B = g.shape[0]
            g = inv / B * (B * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0))
            layer_grads = [dgamma, dbeta]
        dW = cache.inputs[idx].T @ g
        db = g.sum(axis=0)
        g = g @ L.W.T
        grads = [dW, db] + layer_grads + grads
    return grads, g


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, lr, beta1=0.9, beta2=0.999, eps_adam=1e-8):
    """In-place bias-corrected Adam update; returns ``(params, state)``."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps_adam)
    return params, state
