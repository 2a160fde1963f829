"""Minimal from-scratch neural toolkit.

One MLP class covers all three network roles (denoiser, discriminator, linear
probe): affine layers with SiLU on hidden layers and an identity output.
Gradients are hand-derived reverse mode; the optimizer is bias-corrected Adam.
Everything is plain numpy so finite-difference checks are exact up to float64
rounding.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import ConfigError, ShapeError, StaleCacheError


def silu(z: np.ndarray) -> np.ndarray:
    return z * expit(z)


def silu_grad(z: np.ndarray) -> np.ndarray:
    s = expit(z)
    return s * (1.0 + z * (1.0 - s))


@dataclass
class Mlp:
    """Fully-connected network; ``encoder_split`` marks the feature boundary.

    Layers 0..encoder_split-1 are the encoder; the activation emitted by layer
    encoder_split-1 is the feature vector used by OT/ADDA regularizers.
    """

    layer_dims: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    encoder_split: int = 2
    activation: str = "silu"
    version: int = 0

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def parameters(self) -> list[np.ndarray]:
        """Flat parameter list in a fixed order (W0, b0, W1, b1, ...)."""
        out: list[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out


def init_mlp(
    layer_dims,
    rng: np.random.Generator,
    encoder_split: int = 2,
    zero_output: bool = True,
) -> Mlp:
    """Glorot-uniform init; output layer zeroed so training starts at 0."""
    dims = tuple(int(d) for d in layer_dims)
    if len(dims) < 2 or any(d < 1 for d in dims):
        raise ConfigError(f"invalid layer dims {dims}")
    if not (1 <= encoder_split < len(dims)):
        raise ConfigError(f"encoder_split {encoder_split} out of range for {dims}")
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        if zero_output and i == len(dims) - 2:
            w = np.zeros((fan_in, fan_out))
        weights.append(w)
        biases.append(np.zeros(fan_out))
    return Mlp(layer_dims=dims, weights=weights, biases=biases, encoder_split=encoder_split)


@dataclass
class Cache:
    """Forward-pass intermediates; bound to one (net, version) pair."""

    x: np.ndarray              # 2-d input actually fed to the first layer
    pre: list[np.ndarray]      # pre-activations per layer
    act: list[np.ndarray]      # post-activations per layer (last = identity output)
    sig: list[np.ndarray | None]  # expit(pre) per hidden layer, reused in backward
    single: bool               # caller passed a 1-d vector
    net: Mlp
    net_version: int


@dataclass
class Grads:
    """Parameter gradients aligned with Mlp.weights/biases, plus input grad."""

    dweights: list[np.ndarray]
    dbiases: list[np.ndarray]
    dx: np.ndarray

    def parameters(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for dw, db in zip(self.dweights, self.dbiases):
            out.append(dw)
            out.append(db)
        return out

    def add_(self, other: "Grads") -> "Grads":
        for a, b in zip(self.dweights, other.dweights):
            a += b
        for a, b in zip(self.dbiases, other.dbiases):
            a += b
        return self


def zero_grads(net: Mlp) -> Grads:
    return Grads(
        dweights=[np.zeros_like(w) for w in net.weights],
        dbiases=[np.zeros_like(b) for b in net.biases],
        dx=np.zeros((0, net.layer_dims[0])),
    )


def _as_batch(net: Mlp, x) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=float)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != net.layer_dims[0]:
        raise ShapeError(f"input shape {np.shape(x)} incompatible with dims {net.layer_dims}")
    return arr, single


def forward(net: Mlp, x) -> tuple[np.ndarray, Cache]:
    """Affine+SiLU composition; cache holds everything backward needs."""
    x2d, single = _as_batch(net, x)
    h = x2d
    pre, act, sig = [], [], []
    last = net.n_layers - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w + b
        pre.append(z)
        if i == last:
            h = z
            sig.append(None)
        else:
            s = expit(z)
            h = z * s
            sig.append(s)
        act.append(h)
    out = act[-1][0] if single else act[-1]
    cache = Cache(x=x2d, pre=pre, act=act, sig=sig, single=single,
                  net=net, net_version=net.version)
    return out, cache


def encoder_features(net: Mlp, x) -> np.ndarray:
    """Features emitted by the encoder stack (identical to a full forward)."""
    _, cache = forward(net, x)
    return features_from_cache(cache)


def features_from_cache(cache: Cache) -> np.ndarray:
    z = cache.act[cache.net.encoder_split - 1]
    return z[0] if cache.single else z


def _check_cache(net: Mlp, cache: Cache) -> None:
    if cache.net is not net or cache.net_version != net.version:
        raise StaleCacheError("cache does not match the network's current parameters")


def backward(net: Mlp, cache: Cache, grad_output) -> Grads:
    """Exact reverse-mode gradients of sum(output * grad_output)."""
    _check_cache(net, cache)
    g = np.asarray(grad_output, dtype=float)
    if cache.single:
        g = g[None, :]
    if g.shape != cache.act[-1].shape:
        raise ShapeError(f"grad_output shape {g.shape} != output shape {cache.act[-1].shape}")
    return _backprop(net, cache, g, from_layer=net.n_layers - 1)


def backward_from_features(net: Mlp, cache: Cache, grad_features) -> Grads:
    """Backprop a gradient injected at the encoder feature boundary.

    Head-layer gradients are zero; used to route discriminator/OT gradients
    into the encoder.
    """
    _check_cache(net, cache)
    g = np.asarray(grad_features, dtype=float)
    if cache.single:
        g = g[None, :]
    split = net.encoder_split
    if g.shape != cache.act[split - 1].shape:
        raise ShapeError("feature gradient shape mismatch")
    return _backprop(net, cache, g, from_layer=split - 1, through_activation=True)


def _backprop(net: Mlp, cache: Cache, g: np.ndarray, from_layer: int,
              through_activation: bool = False) -> Grads:
    dweights = [np.zeros_like(w) for w in net.weights]
    dbiases = [np.zeros_like(b) for b in net.biases]
    last = net.n_layers - 1
    for i in range(from_layer, -1, -1):
        # g arrives as d/d(act[i]); convert to d/d(pre[i])
        if i != last or through_activation:
            s = cache.sig[i] if cache.sig[i] is not None else expit(cache.pre[i])
            g = g * (s * (1.0 + cache.pre[i] * (1.0 - s)))
        h_in = cache.x if i == 0 else cache.act[i - 1]
        dweights[i] = h_in.T @ g
        dbiases[i] = g.sum(axis=0)
        g = g @ net.weights[i].T
    dx = g[0] if cache.single else g
    return Grads(dweights=dweights, dbiases=dbiases, dx=dx)


def grl(grad, strength: float):
    """Gradient reversal: forward identity, backward scaled by -strength."""
    if strength < 0:
        raise ConfigError(f"grl strength must be >= 0, got {strength}")
    return -strength * np.asarray(grad, dtype=float)


def timestep_embed(t, dim: int) -> np.ndarray:
    """Interleaved sin/cos of t at geometric frequencies spanning [1, 1000]."""
    if dim % 2 != 0 or dim < 2:
        raise ConfigError(f"embedding dim must be even and >= 2, got {dim}")
    half = dim // 2
    if half == 1:
        freqs = np.array([1.0])
    else:
        freqs = np.exp(np.linspace(0.0, np.log(1000.0), half))
    tt = np.asarray(t, dtype=float)
    phase = tt[..., None] * freqs
    out = np.empty(phase.shape[:-1] + (dim,))
    out[..., 0::2] = np.sin(phase)
    out[..., 1::2] = np.cos(phase)
    return out


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(params: list[np.ndarray], lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(
        m=[np.zeros_like(p) for p in params],
        v=[np.zeros_like(p) for p in params],
        lr=lr, beta1=beta1, beta2=beta2, eps=eps,
    )


def adam_step(state: AdamState, params: list[np.ndarray],
              grads: list[np.ndarray]) -> list[np.ndarray]:
    """Standard bias-corrected Adam; updates params in place."""
    if len(params) != len(state.m) or len(params) != len(grads):
        raise ShapeError("params/grads length mismatch with optimizer state")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ShapeError(f"grad shape {g.shape} != param shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def apply_adam(net: Mlp, state: AdamState, grads: Grads) -> None:
    """Adam update on a network; bumps the version so stale caches are caught."""
    adam_step(state, net.parameters(), grads.parameters())
    net.version += 1


def mlp_to_dict(net: Mlp) -> dict:
    return {
        "layer_dims": list(net.layer_dims),
        "activation": net.activation,
        "encoder_split": net.encoder_split,
        "weights": [w.tolist() for w in net.weights],   # row-major per layer
        "biases": [b.tolist() for b in net.biases],
    }


def mlp_from_dict(obj: dict) -> Mlp:
    dims = tuple(int(d) for d in obj["layer_dims"])
    weights = [np.asarray(w, dtype=float) for w in obj["weights"]]
    biases = [np.asarray(b, dtype=float) for b in obj["biases"]]
    for i, (w, b) in enumerate(zip(weights, biases)):
        if w.shape != (dims[i], dims[i + 1]) or b.shape != (dims[i + 1],):
            raise ConfigError("checkpoint weight shapes disagree with layer_dims")
    return Mlp(
        layer_dims=dims,
        weights=weights,
        biases=biases,
        encoder_split=int(obj["encoder_split"]),
        activation=obj["activation"],
    )


def save_mlp(net: Mlp, path) -> None:
    with open(path, "w") as fh:
        json.dump(mlp_to_dict(net), fh)


def load_mlp(path) -> Mlp:
    with open(path) as fh:
        return mlp_from_dict(json.load(fh))
