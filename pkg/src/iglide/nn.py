"""Small dense-network engine: batched forward with activation tracing, exact
backprop, inverted dropout, Adam, KL term and the reparameterisation trick."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("relu", "identity")
MODES = ("train", "eval", "mc_dropout")


class ShapeError(ValueError):
    pass


def make_rng(seed) -> np.random.Generator:
    """Seeded PCG64 stream; identical seeds give identical draw sequences."""
    return np.random.default_rng(seed)


@dataclass
class DenseLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "relu"
    dropout: float = 0.0

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout rate must lie in [0, 1)")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError("weight must be (out, in) and bias (out,)")

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]


@dataclass
class DenseNet:
    layers: list[DenseLayer]

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if b.n_in != a.n_out:
                raise ShapeError(f"layer widths do not chain: {a.n_out} -> {b.n_in}")

    @classmethod
    def build(cls, widths, activations, dropouts, rng) -> "DenseNet":
        """He-style uniform fan-in initialisation, zero biases."""
        layers = []
        for i, (n_in, n_out) in enumerate(zip(widths, widths[1:])):
            bound = np.sqrt(6.0 / n_in)
            w = rng.uniform(-bound, bound, size=(n_out, n_in))
            layers.append(DenseLayer(w, np.zeros(n_out), activations[i], dropouts[i]))
        return cls(layers)

    @property
    def widths(self) -> list[int]:
        return [self.layers[0].n_in] + [l.n_out for l in self.layers]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for l in self.layers:
            out += [l.weight, l.bias]
        return out


@dataclass
class ForwardTrace:
    """Input plus per-layer post-activation (post-dropout) outputs."""

    x: np.ndarray
    activations: list[np.ndarray]
    masks: list[np.ndarray | None] = field(default_factory=list)

    @property
    def output(self) -> np.ndarray:
        return self.activations[-1]


def forward(net: DenseNet, x, mode: str = "eval", rng=None) -> ForwardTrace:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    h = np.asarray(x, dtype=float)
    if h.shape[-1] != net.layers[0].n_in:
        raise ShapeError(f"input width {h.shape[-1]} != {net.layers[0].n_in}")
    x0 = h
    acts, masks = [], []
    for layer in net.layers:
        h = h @ layer.weight.T + layer.bias
        if layer.activation == "relu":
            h = np.maximum(h, 0.0)
        mask = None
        if mode != "eval" and layer.dropout > 0:
            if rng is None:
                raise ValueError("dropout sampling needs an rng")
            keep = 1.0 - layer.dropout
            mask = (rng.random(h.shape) < keep) / keep
            h = h * mask
        acts.append(h)
        masks.append(mask)
    return ForwardTrace(x0, acts, masks)


def backward(net: DenseNet, trace: ForwardTrace, grad_out):
    """Gradients w.r.t. [W1, b1, W2, b2, ...] and the network input, reusing the
    dropout masks recorded in ``trace``."""
    g = np.asarray(grad_out, dtype=float)
    batched = g.ndim == 2
    grads: list[np.ndarray] = [None] * (2 * len(net.layers))  # type: ignore[list-item]
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        out = trace.activations[i]
        if trace.masks and trace.masks[i] is not None:
            g = g * trace.masks[i]
        if layer.activation == "relu":
            g = g * (out > 0)
        inp = trace.activations[i - 1] if i > 0 else trace.x
        if batched:
            grads[2 * i] = g.T @ inp
            grads[2 * i + 1] = g.sum(axis=0)
        else:
            grads[2 * i] = np.outer(g, inp)
            grads[2 * i + 1] = g.copy()
        g = g @ layer.weight
    return grads, g


def mse(pred, target) -> float:
    return float(np.mean((np.asarray(pred) - np.asarray(target)) ** 2))


def backprop(net: DenseNet, x, target, loss: str = "mse", mode: str = "eval", rng=None, trace=None):
    """MSE (mean over every element) and its exact gradients; returns
    ``(loss_value, grads)`` with grads ordered as ``net.parameters()``."""
    if loss != "mse":
        raise ValueError(f"unsupported loss {loss!r}")
    if trace is None:
        trace = forward(net, x, mode, rng)
    target = np.asarray(target, dtype=float)
    if target.shape != trace.output.shape:
        raise ShapeError(f"target shape {target.shape} != output {trace.output.shape}")
    diff = trace.output - target
    grads, _ = backward(net, trace, 2.0 * diff / diff.size)
    return float(np.mean(diff**2)), grads


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] | None = None
    v: list[np.ndarray] | None = None


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> None:
    """In-place bias-corrected Adam update."""
    if state.m is None:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def kl_divergence(mu, logvar) -> float:
    """KL(N(mu, exp(logvar)) || N(0, I)) summed over dimensions."""
    mu = np.asarray(mu, dtype=float)
    logvar = np.asarray(logvar, dtype=float)
    if mu.shape != logvar.shape:
        raise ShapeError("mu and logvar differ in shape")
    return float(0.5 * np.sum(np.exp(logvar) + mu**2 - 1.0 - logvar))


def reparameterize(mu, logvar, rng):
    mu = np.asarray(mu, dtype=float)
    logvar = np.asarray(logvar, dtype=float)
    if mu.shape != logvar.shape:
        raise ShapeError("mu and logvar differ in shape")
    return mu + np.exp(0.5 * logvar) * rng.standard_normal(mu.shape)
