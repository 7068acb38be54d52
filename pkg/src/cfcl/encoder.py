"""Small feedforward embedding network trained with the triplet loss.

The parameter vector is kept flat so that aggregation, SGD and finite
differences all act on a single ``np.ndarray``.  Layer ``k`` occupies a
``dims[k] x dims[k+1]`` weight block (row-major) followed by its bias.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, NamedTuple, Optional, Sequence, Union

import numpy as np

from .errors import ShapeError

ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class EncoderModel:
    layer_dims: tuple
    weights: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        if len(dims) < 2 or any(d <= 0 for d in dims):
            raise ShapeError(f"layer_dims must hold at least two positive ints, got {dims}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or w.size != param_count(dims):
            raise ShapeError(f"expected {param_count(dims)} weights for {dims}, got shape {w.shape}")
        object.__setattr__(self, "layer_dims", dims)
        object.__setattr__(self, "weights", w)

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_params(self) -> int:
        return self.weights.size

    def layers(self):
        """Yield ``(W, b)`` views into the flat weight vector."""
        return _unflatten(self.weights, self.layer_dims)

    def with_weights(self, weights) -> "EncoderModel":
        return replace(self, weights=np.array(weights, dtype=np.float64))

    @classmethod
    def initialize(cls, layer_dims: Sequence[int], rng: np.random.Generator,
                   activation: str = "relu") -> "EncoderModel":
        """Glorot-uniform weights, zero biases."""
        dims = tuple(int(d) for d in layer_dims)
        parts = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            parts.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
            parts.append(np.zeros(fan_out))
        return cls(dims, np.concatenate(parts), activation)

    @classmethod
    def zeros(cls, layer_dims: Sequence[int], activation: str = "relu") -> "EncoderModel":
        dims = tuple(int(d) for d in layer_dims)
        return cls(dims, np.zeros(param_count(dims)), activation)


def param_count(layer_dims: Sequence[int]) -> int:
    return int(sum((a + 1) * b for a, b in zip(layer_dims[:-1], layer_dims[1:])))


def _unflatten(flat, dims):
    out = []
    pos = 0
    for a, b in zip(dims[:-1], dims[1:]):
        W = flat[pos:pos + a * b].reshape(a, b)
        pos += a * b
        out.append((W, flat[pos:pos + b]))
        pos += b
    return out


def _act(name, x):
    if name == "relu":
        return np.maximum(x, 0.0)
    return np.tanh(x)


def _act_grad(name, pre, post):
    if name == "relu":
        return (pre > 0).astype(np.float64)
    return 1.0 - post * post


def _check_input(model, X):
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != model.input_dim or X.ndim > 2:
        raise ShapeError(f"input of shape {X.shape} does not match input dim {model.input_dim}")
    return X


def forward(model: EncoderModel, x) -> np.ndarray:
    """Embed a single input vector or a batch of row vectors."""
    X = _check_input(model, x)
    h = X
    layers = model.layers()
    for k, (W, b) in enumerate(layers):
        h = h @ W + b
        if k < len(layers) - 1:
            h = _act(model.activation, h)
    return h


def _forward_cached(model, X):
    layers = model.layers()
    inputs, pres, posts = [], [], []
    h = X
    for k, (W, b) in enumerate(layers):
        inputs.append(h)
        z = h @ W + b
        if k < len(layers) - 1:
            pres.append(z)
            h = _act(model.activation, z)
            posts.append(h)
        else:
            h = z
    return h, (inputs, pres, posts)


def _backward(model, cache, G):
    """Gradient of ``sum(G * forward(X))`` with respect to the flat weights."""
    inputs, pres, posts = cache
    layers = model.layers()
    grads = [None] * len(layers)
    delta = G
    for k in range(len(layers) - 1, -1, -1):
        W, _ = layers[k]
        grads[k] = (inputs[k].T @ delta, delta.sum(axis=0))
        if k > 0:
            delta = (delta @ W.T) * _act_grad(model.activation, pres[k - 1], posts[k - 1])
    return np.concatenate([np.concatenate([gW.ravel(), gb]) for gW, gb in grads])


# ---------------------------------------------------------------- losses --


@dataclass(frozen=True)
class Triplet:
    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray


class TripletBatch(NamedTuple):
    """Row-stacked anchors, positives and negatives."""
    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray


@dataclass
class RegularizerState:
    """Embeddings received from neighbours plus the weight and margins of the penalty."""
    received: Dict[int, np.ndarray] = field(default_factory=dict)
    reg_margin: float = 0.0
    reg_weight: float = 0.0
    base_margin: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.reg_weight) or self.reg_weight < 0:
            raise ValueError(f"reg_weight must be finite and >= 0, got {self.reg_weight}")
        if self.reg_margin < 0:
            raise ValueError(f"reg_margin must be >= 0, got {self.reg_margin}")

    def stacked(self, dim: int) -> np.ndarray:
        """All received embeddings as one ``(n, dim)`` array, in neighbour order."""
        blocks = [np.asarray(self.received[j], dtype=np.float64).reshape(-1, dim)
                  for j in sorted(self.received)]
        if not blocks:
            return np.zeros((0, dim))
        return np.vstack(blocks)

    def replace_received(self, received: Dict[int, np.ndarray]) -> None:
        self.received = {j: np.asarray(z, dtype=np.float64) for j, z in received.items()}


def _as_batch(batch) -> TripletBatch:
    if isinstance(batch, TripletBatch):
        return batch
    if isinstance(batch, Triplet):
        batch = [batch]
    batch = list(batch)
    if not batch:
        raise ValueError("triplet batch must not be empty")
    return TripletBatch(np.vstack([t.anchor for t in batch]),
                        np.vstack([t.positive for t in batch]),
                        np.vstack([t.negative for t in batch]))


def _received(model, reg):
    Z = reg.stacked(model.output_dim) if reg is not None else np.zeros((0, model.output_dim))
    for j, z in (reg.received.items() if reg is not None else ()):
        z = np.asarray(z)
        if z.size and z.reshape(-1, z.shape[-1]).shape[-1] != model.output_dim:
            raise ShapeError(f"embedding from neighbour {j} has dim {z.shape[-1]}, "
                             f"model outputs {model.output_dim}")
    return Z


def _hinge_terms(a, p, n, margin, Z=None, reg_margin=0.0):
    pos = np.sum((a - p) ** 2, axis=1)
    h = pos - np.sum((a - n) ** 2, axis=1) + margin
    if Z is None or len(Z) == 0:
        return pos, h, None
    d_az = np.sum((a[:, None, :] - Z[None, :, :]) ** 2, axis=2)
    return pos, h, pos[:, None] - d_az + reg_margin


def triplet_loss(model: EncoderModel, t: Triplet, m: float) -> float:
    """``max(0, |f(a)-f(p)|^2 - |f(a)-f(n)|^2 + m)`` for one triplet."""
    if m <= 0:
        raise ValueError("margin must be positive")
    a, p, n = (forward(model, np.atleast_2d(v)) for v in (t.anchor, t.positive, t.negative))
    _, h, _ = _hinge_terms(a, p, n, m)
    return float(max(0.0, h[0]))


def triplet_loss_regularized(model: EncoderModel, t: Triplet, reg: RegularizerState) -> float:
    """Triplet loss plus the weighted hinge penalty over every received embedding."""
    Z = _received(model, reg)
    base = triplet_loss(model, t, reg.base_margin)
    if reg.reg_weight == 0 or len(Z) == 0:
        return base
    a, p = (forward(model, np.atleast_2d(v)) for v in (t.anchor, t.positive))
    pos = np.sum((a - p) ** 2)
    d_az = np.sum((a - Z) ** 2, axis=1)
    penalty = np.maximum(0.0, pos - d_az + reg.reg_margin).sum()
    return float(base + reg.reg_weight * penalty)


def batch_loss(model: EncoderModel, batch, reg: Optional[RegularizerState] = None,
               margin: float = 1.0) -> float:
    """Mean loss over a batch; uses the regularised loss when ``reg`` is given."""
    b = _as_batch(batch)
    if reg is not None:
        margin = reg.base_margin
    n = len(b.anchors)
    emb = forward(model, np.vstack([b.anchors, b.positives, b.negatives]))
    a, p, ng = emb[:n], emb[n:2 * n], emb[2 * n:]
    Z = _received(model, reg) if reg is not None and reg.reg_weight > 0 else None
    _, h, hz = _hinge_terms(a, p, ng, margin, Z, reg.reg_margin if reg else 0.0)
    total = np.maximum(h, 0.0)
    if hz is not None:
        total = total + reg.reg_weight * np.maximum(hz, 0.0).sum(axis=1)
    return float(total.mean())


def loss_gradient(model: EncoderModel, batch, reg: Optional[RegularizerState] = None,
                  margin: float = 1.0) -> np.ndarray:
    """Mean gradient of the (optionally regularised) triplet loss over ``batch``.

    Hinge terms sitting exactly on the kink contribute a zero subgradient.
    """
    b = _as_batch(batch)
    if reg is not None:
        margin = reg.base_margin
    n = len(b.anchors)
    X = np.vstack([b.anchors, b.positives, b.negatives])
    X = _check_input(model, X)
    emb, cache = _forward_cached(model, X)
    a, p, ng = emb[:n], emb[n:2 * n], emb[2 * n:]
    Z = _received(model, reg) if reg is not None and reg.reg_weight > 0 else None
    _, h, hz = _hinge_terms(a, p, ng, margin, Z, reg.reg_margin if reg else 0.0)

    on = (h > 0).astype(np.float64)[:, None]
    ga = on * 2.0 * (ng - p)
    gp = on * -2.0 * (a - p)
    gn = on * 2.0 * (a - ng)
    if hz is not None and hz.size:
        onz = (hz > 0).astype(np.float64) * reg.reg_weight
        cnt = onz.sum(axis=1)[:, None]
        # d/da of |a-p|^2 - |a-z|^2 summed over active z
        ga = ga + 2.0 * (onz @ Z - cnt * p)
        gp = gp - 2.0 * cnt * (a - p)
    G = np.vstack([ga, gp, gn]) / n
    return _backward(model, cache, G)


def sgd_step(model: EncoderModel, grad: np.ndarray, lr: float) -> EncoderModel:
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != model.weights.shape:
        raise ShapeError(f"gradient shape {grad.shape} != weights {model.weights.shape}")
    return model.with_weights(model.weights - lr * grad)


class Adam:
    """Adam with the usual defaults; the state is reset whenever ``reset`` is called."""

    def __init__(self, n_params: int, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.n_params = n_params
        self.reset()

    def reset(self) -> None:
        self.m = np.zeros(self.n_params)
        self.v = np.zeros(self.n_params)
        self.t = 0

    def step(self, model: EncoderModel, grad: np.ndarray, lr: float) -> EncoderModel:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return model.with_weights(model.weights - lr * m_hat / (np.sqrt(v_hat) + self.eps))
