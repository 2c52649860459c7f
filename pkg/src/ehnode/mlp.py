"""Small fully connected networks on a flat parameter vector.

Layer ``i`` maps ``(n, fan_in) -> (n, fan_out)`` as ``x @ W + b``. The flat
vector stores, for each layer in order, ``W`` in row-major order with shape
``(fan_in, fan_out)`` followed by ``b`` with shape ``(fan_out,)``. Hidden
layers use tanh, the output layer is linear.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ACTIVATIONS = ("tanh",)


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int = 4
    hidden: tuple = (64, 64)
    output_dim: int = 2
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in self.hidden):
            raise ValueError("all layer widths must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def sizes(self) -> list:
        return [self.input_dim, *self.hidden, self.output_dim]

    def layer_shapes(self) -> list:
        s = self.sizes
        return [(s[i], s[i + 1]) for i in range(len(s) - 1)]

    @property
    def n_params(self) -> int:
        return sum(fi * fo + fo for fi, fo in self.layer_shapes())

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim, "hidden": list(self.hidden),
                "output_dim": self.output_dim, "activation": self.activation}


def init_params(spec: MlpSpec, rng: np.random.Generator) -> np.ndarray:
    """Uniform +-sqrt(6 / (fan_in + fan_out)) weights, zero biases."""
    parts = []
    for fi, fo in spec.layer_shapes():
        lim = np.sqrt(6.0 / (fi + fo))
        parts.append(rng.uniform(-lim, lim, size=fi * fo))
        parts.append(np.zeros(fo))
    return np.concatenate(parts)


def unpack(spec: MlpSpec, flat: np.ndarray) -> list:
    if flat.shape != (spec.n_params,):
        raise ValueError(f"expected {spec.n_params} parameters, got shape {flat.shape}")
    layers, i = [], 0
    for fi, fo in spec.layer_shapes():
        W = flat[i:i + fi * fo].reshape(fi, fo)
        i += fi * fo
        b = flat[i:i + fo]
        i += fo
        layers.append((W, b))
    return layers


def forward(spec: MlpSpec, flat: np.ndarray, x: np.ndarray):
    """Returns ``(output, cache)``; ``cache`` feeds :func:`backward`."""
    layers = unpack(spec, flat)
    h = np.atleast_2d(x)
    acts = [h]
    for i, (W, b) in enumerate(layers):
        z = h @ W + b
        h = np.tanh(z) if i < len(layers) - 1 else z
        acts.append(h)
    return h, acts


def backward(spec: MlpSpec, flat: np.ndarray, cache: list, dout: np.ndarray) -> np.ndarray:
    """Gradient of ``sum(dout * output)`` with respect to the flat parameters."""
    layers = unpack(spec, flat)
    grads = [None] * (2 * len(layers))
    delta = np.atleast_2d(dout)
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        a_in = cache[i]
        grads[2 * i] = (a_in.T @ delta).ravel()
        grads[2 * i + 1] = delta.sum(axis=0)
        if i > 0:
            # tanh'(z) = 1 - tanh(z)^2, and cache[i] holds tanh(z) of layer i-1
            delta = (delta @ W.T) * (1.0 - a_in * a_in)
    return np.concatenate(grads)
