"""Fully-connected networks: parameter container, init, and forward pass."""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError


@dataclass
class MlpParams:
    """Weights and biases of a fully-connected net.

    `weights[i]` has shape [out_i, in_i] and consecutive layer dims must
    chain. All hidden layers use the same activation; the output layer is
    linear.
    """

    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)
    activation: str = "tanh"

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ConfigurationError("weights and biases must pair up")
        if not self.weights:
            raise ConfigurationError("network needs at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
                raise ConfigurationError(f"layer {i}: weight {w.shape} / bias {b.shape} mismatch")
            if i > 0 and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ConfigurationError(f"layer {i}: input dim {w.shape[1]} does not chain")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ConfigurationError(f"layer {i}: non-finite parameter")
        if self.activation not in _ACTIVATIONS:
            raise ConfigurationError(f"unknown activation '{self.activation}'")

    @property
    def input_dim(self):
        return self.weights[0].shape[1]

    @property
    def output_dim(self):
        return self.weights[-1].shape[0]

    @property
    def n_layers(self):
        return len(self.weights)


_ACTIVATIONS = {"tanh": ad.tanh}


def init_mlp(in_dim, out_dim, hidden, rng, activation="tanh"):
    """Symmetric uniform fan-in init: U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    dims = [in_dim] + list(hidden) + [out_dim]
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return MlpParams(weights=weights, biases=biases, activation=activation)


def mlp_apply(weights, biases, activation, x):
    """Forward pass; weights/biases and `x` may be Tensors or plain arrays.

    `x` is [B, in_dim] or [in_dim]; output matches. Row-wise batched.
    A Tensor input stays in the graph, so composed nets backpropagate.
    """
    act = _ACTIVATIONS[activation]
    if isinstance(x, ad.Tensor):
        single = x.ndim == 1
        h = ad.reshape(x, (1, -1)) if single else x
    else:
        xv = np.asarray(x, dtype=np.float64)
        single = xv.ndim == 1
        h = xv.reshape(1, -1) if single else xv
    in_dim = ad.val(weights[0]).shape[1]
    if ad.val(h).shape[1] != in_dim:
        raise ConfigurationError(f"input dim {ad.val(h).shape[1]} != network input dim {in_dim}")
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        h = ad.add(ad.matmul(h, ad.transpose(w)), b)
        if i != last:
            h = act(h)
    if single:
        h = ad.reshape(h, (-1,))
    return h


def mlp_forward(params: MlpParams, x):
    """Plain-numpy forward pass of an MlpParams net."""
    return mlp_apply(params.weights, params.biases, params.activation, x)


def param_list(params: MlpParams):
    """Flatten to [W0, b0, W1, b1, ...] for the optimizer/autodiff."""
    out = []
    for w, b in zip(params.weights, params.biases):
        out.append(w)
        out.append(b)
    return out


def replace_params(params: MlpParams, flat):
    """Rebuild an MlpParams from a flat [W0, b0, ...] list."""
    n = params.n_layers
    if len(flat) != 2 * n:
        raise ConfigurationError(f"expected {2 * n} arrays, got {len(flat)}")
    return MlpParams(
        weights=[flat[2 * i] for i in range(n)],
        biases=[flat[2 * i + 1] for i in range(n)],
        activation=params.activation,
    )
