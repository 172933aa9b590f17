"""Dense layers, MLP stacks and the classification losses built on them."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Generic, Sequence, TypeVar

import numpy as np

from . import ndgrad as G
from .ndgrad import ShapeError, Tensor

A = TypeVar("A", np.ndarray, Tensor)

HIDDEN_ACTIVATIONS = {"relu": G.relu, "tanh": G.tanh}
OUTPUT_ACTIVATIONS = {"identity": lambda x: x, "sigmoid": G.sigmoid}


@dataclass
class DenseParams(Generic[A]):
    weight: A  # (in, out)
    bias: A  # (out,)


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple[int, ...]  # input width followed by each layer's output width
    hidden_activation: str = "relu"
    output_activation: str = "identity"

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        if len(self.layer_sizes) < 2:
            raise ValueError("an MLP needs an input width and at least one layer")
        if any(s <= 0 for s in self.layer_sizes):
            raise ValueError(f"layer sizes must be positive, got {self.layer_sizes}")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def init_mlp(spec: MlpSpec, seed) -> list[DenseParams]:
    """Glorot-uniform weights, zero biases.  ``seed`` is anything
    ``np.random.default_rng`` accepts (an int or a sequence of ints)."""
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        b = glorot_bound(fan_in, fan_out)
        layers.append(DenseParams(rng.uniform(-b, b, size=(fan_in, fan_out)), np.zeros(fan_out)))
    return layers


def dense(layer: DenseParams, x) -> Tensor:
    return G.add(G.matmul(x, layer.weight), layer.bias)


def mlp_forward(params: Sequence[DenseParams], x, spec: MlpSpec | None = None) -> Tensor:
    """Affine + activation stack; hidden activation between layers, output
    activation after the last one (defaults: relu / identity)."""
    hidden = HIDDEN_ACTIVATIONS[spec.hidden_activation if spec else "relu"]
    final = OUTPUT_ACTIVATIONS[spec.output_activation if spec else "identity"]
    x = G.as_tensor(x)
    width = np.shape(params[0].weight)[0]
    if x.ndim != 2 or x.shape[1] != width:
        raise ShapeError(f"mlp input has shape {x.shape}, first layer expects width {width}")
    for i, layer in enumerate(params):
        x = dense(layer, x)
        x = hidden(x) if i < len(params) - 1 else final(x)
    return x


def one_hot(labels: np.ndarray, n: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise ValueError(f"labels must lie in [0, {n}), got range [{labels.min()}, {labels.max()}]")
    out = np.zeros((labels.shape[0], n))
    out[np.arange(labels.shape[0]), labels.astype(int)] = 1.0
    return out


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits), in nats."""
    logits = G.as_tensor(logits)
    target = one_hot(labels, logits.shape[-1])
    nll = G.negate(G.reduce_sum(G.mul(G.log_softmax(logits), target), axis=-1))
    return G.reduce_mean(nll)


def predictive_entropy(logits) -> Tensor:
    """Mean entropy of softmax(logits) over the batch, in nats."""
    logits = G.as_tensor(logits)
    if logits.shape[-1] < 2:
        raise ValueError("entropy needs at least two classes")
    logp = G.log_softmax(logits)
    p = G.exp(logp)
    return G.reduce_mean(G.negate(G.reduce_sum(G.mul(p, logp), axis=-1)))


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=-1) == np.asarray(labels)))
