"""Feed-forward networks with exact reverse-mode gradients, in numpy.

Layers compute ``h @ W + b``; hidden layers use a rectifier. The output is
either linear or squashed into per-dimension bounds with
``low + (high - low) * (tanh(o) + 1) / 2``.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DimensionMismatch, InvalidConfig, NonFiniteLoss, ShapeMismatch

logger = logging.getLogger(__name__)

FINAL_LAYER_INIT = 3e-3


class OutputActivation(str, Enum):
    LINEAR = "linear"
    BOUNDED_SQUASH = "bounded_squash"


@dataclass
class Mlp:
    """Multi-layer perceptron; ``weights[i]`` has shape (fan_in, fan_out)."""

    weights: List[np.ndarray]
    biases: List[np.ndarray]
    output_activation: OutputActivation = OutputActivation.LINEAR
    low: Optional[np.ndarray] = None
    high: Optional[np.ndarray] = None

    def __post_init__(self):
        self.output_activation = OutputActivation(self.output_activation)
        self.weights = [np.asarray(w, dtype=np.float64) for w in self.weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in self.biases]
        if not self.weights or len(self.weights) != len(self.biases):
            raise ShapeMismatch("Network needs one bias per weight matrix")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeMismatch(f"Layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ShapeMismatch(f"Layer {i} input does not match layer {i - 1} output")
        if self.output_activation is OutputActivation.BOUNDED_SQUASH:
            if self.low is None or self.high is None:
                raise InvalidConfig("Bounded output needs low and high bounds", key="bounds")
            self.low = np.broadcast_to(np.asarray(self.low, dtype=np.float64), (self.output_size,)).copy()
            self.high = np.broadcast_to(np.asarray(self.high, dtype=np.float64), (self.output_size,)).copy()
            if np.any(self.high <= self.low):
                raise InvalidConfig("Output bounds need low < high", key="bounds")

    @classmethod
    def initialize(
        cls,
        layer_sizes: Sequence[int],
        rng: np.random.Generator,
        output_activation: OutputActivation = OutputActivation.LINEAR,
        low=None,
        high=None,
    ) -> "Mlp":
        """Fan-in uniform init for hidden layers, small uniform for the output layer."""
        if len(layer_sizes) < 2 or min(layer_sizes) < 1:
            raise InvalidConfig(f"Invalid layer sizes {list(layer_sizes)}", key="hidden_sizes")
        weights, biases = [], []
        for i, (fan_in, fan_out) in enumerate(zip(layer_sizes[:-1], layer_sizes[1:])):
            last = i == len(layer_sizes) - 2
            limit = FINAL_LAYER_INIT if last else 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            biases.append(rng.uniform(-limit, limit, size=fan_out))
        return cls(weights, biases, output_activation, low, high)

    @property
    def layer_sizes(self) -> List[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def input_size(self) -> int:
        return self.weights[0].shape[0]

    @property
    def output_size(self) -> int:
        return self.weights[-1].shape[1]

    def parameters(self) -> List[np.ndarray]:
        """Weights and biases interleaved per layer; the arrays themselves."""
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def copy(self) -> "Mlp":
        return Mlp(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.output_activation,
            None if self.low is None else self.low.copy(),
            None if self.high is None else self.high.copy(),
        )

    def squash(self, raw: np.ndarray) -> np.ndarray:
        if self.output_activation is OutputActivation.LINEAR:
            return raw
        return self.low + (self.high - self.low) * (np.tanh(raw) + 1.0) / 2.0

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.parameters())


@dataclass
class ForwardCache:
    """Layer inputs and pre-activations kept for the backward pass."""

    inputs: List[np.ndarray] = field(default_factory=list)
    pre_activations: List[np.ndarray] = field(default_factory=list)
    raw_output: Optional[np.ndarray] = None


@dataclass
class Gradients:
    """Parameter gradients, plus the gradient with respect to the input batch."""

    weights: List[np.ndarray]
    biases: List[np.ndarray]
    inputs: np.ndarray

    def parameters(self) -> List[np.ndarray]:
        return [g for pair in zip(self.weights, self.biases) for g in pair]


def _as_batch(net: Mlp, x) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    batch = x[np.newaxis, :] if single else x
    if batch.ndim != 2 or batch.shape[1] != net.input_size:
        raise DimensionMismatch(
            f"Network expects {net.input_size} inputs, got shape {x.shape}"
        )
    return batch, single


def forward_with_cache(net: Mlp, x) -> Tuple[np.ndarray, ForwardCache]:
    batch, _ = _as_batch(net, x)
    cache = ForwardCache()
    h = batch
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        cache.inputs.append(h)
        z = h @ w + b
        cache.pre_activations.append(z)
        h = z if i == last else np.maximum(z, 0.0)
    cache.raw_output = h
    return net.squash(h), cache


def net_forward(net: Mlp, x) -> np.ndarray:
    """Forward pass of a single vector or a (batch, inputs) matrix."""
    batch, single = _as_batch(net, x)
    output, _ = forward_with_cache(net, batch)
    return output[0] if single else output


def backward(net: Mlp, cache: ForwardCache, grad_output: np.ndarray) -> Gradients:
    """Backpropagate ``dLoss/dOutput`` (post-squash) through the cached pass."""
    delta = np.asarray(grad_output, dtype=np.float64)
    if net.output_activation is OutputActivation.BOUNDED_SQUASH:
        t = np.tanh(cache.raw_output)
        delta = delta * (net.high - net.low) / 2.0 * (1.0 - t * t)
    grad_w: List[np.ndarray] = [np.empty(0)] * len(net.weights)
    grad_b: List[np.ndarray] = [np.empty(0)] * len(net.weights)
    for i in reversed(range(len(net.weights))):
        if i != len(net.weights) - 1:
            # rectifier subgradient at 0 is 0
            delta = delta * (cache.pre_activations[i] > 0.0)
        grad_w[i] = cache.inputs[i].T @ delta
        grad_b[i] = delta.sum(axis=0)
        delta = delta @ net.weights[i].T
    return Gradients(grad_w, grad_b, delta)


LossFn = Callable[[np.ndarray, np.ndarray], Tuple[float, np.ndarray]]


def squared_loss(outputs: np.ndarray, targets: np.ndarray) -> Tuple[float, np.ndarray]:
    """Batch mean of the summed squared error, and its gradient per output."""
    diff = outputs - targets
    n = len(outputs)
    return float(np.sum(diff * diff) / n), 2.0 * diff / n


def net_gradient(
    net: Mlp, loss_fn: LossFn, batch: Tuple[np.ndarray, np.ndarray]
) -> Tuple[float, Gradients]:
    """Loss of ``batch = (inputs, targets)`` and its exact parameter gradients."""
    inputs, targets = batch
    inputs, _ = _as_batch(net, inputs)
    if not len(inputs):
        raise DimensionMismatch("Gradient batch is empty")
    outputs, cache = forward_with_cache(net, inputs)
    targets = np.asarray(targets, dtype=np.float64).reshape(outputs.shape)
    loss, grad_output = loss_fn(outputs, targets)
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"Loss evaluated to {loss}")
    return loss, backward(net, cache, grad_output)


def soft_update(target: Mlp, source: Mlp, tau: float) -> Mlp:
    """Move ``target`` towards ``source`` in place: tau * source + (1 - tau) * target."""
    if target.layer_sizes != source.layer_sizes:
        raise ShapeMismatch(
            f"Target {target.layer_sizes} and source {source.layer_sizes} differ"
        )
    for t, s in zip(target.parameters(), source.parameters()):
        t *= 1.0 - tau
        t += tau * s
    return target


class Adam:
    """Adam optimizer state for one network."""

    def __init__(
        self,
        net: Mlp,
        learning_rate: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
    ):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.steps = 0
        self._m = [np.zeros_like(p) for p in net.parameters()]
        self._v = [np.zeros_like(p) for p in net.parameters()]

    def step(self, net: Mlp, gradients: Gradients) -> None:
        """Descend along ``gradients``; parameters are updated in place."""
        self.steps += 1
        correction1 = 1.0 - self.beta1**self.steps
        correction2 = 1.0 - self.beta2**self.steps
        for param, grad, m, v in zip(net.parameters(), gradients.parameters(), self._m, self._v):
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            param -= self.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + self.epsilon)


def dump_networks(networks: Dict[str, Mlp]) -> str:
    """Decimal-text checkpoint with a shape header per array; exact on reload."""
    lines = ["# powerarb network checkpoint v1"]
    for name, net in networks.items():
        lines.append(f"network {name} {net.output_activation.value} {len(net.weights)}")
        if net.output_activation is OutputActivation.BOUNDED_SQUASH:
            lines.append("low " + " ".join(repr(float(v)) for v in net.low))
            lines.append("high " + " ".join(repr(float(v)) for v in net.high))
        for i, (w, b) in enumerate(zip(net.weights, net.biases)):
            lines.append(f"weight {i} {w.shape[0]} {w.shape[1]}")
            lines.extend(" ".join(repr(float(v)) for v in row) for row in w)
            lines.append(f"bias {i} {b.shape[0]}")
            lines.append(" ".join(repr(float(v)) for v in b))
    return "\n".join(lines) + "\n"


def parse_networks(text: str) -> Dict[str, Mlp]:
    lines = [line for line in text.splitlines() if line.strip() and not line.startswith("#")]
    networks: Dict[str, Mlp] = {}
    position = 0

    def floats(line: str) -> List[float]:
        return [float(v) for v in line.split()]

    try:
        while position < len(lines):
            _, name, activation, n_layers = lines[position].split()
            position += 1
            low = high = None
            if OutputActivation(activation) is OutputActivation.BOUNDED_SQUASH:
                low = np.array(floats(lines[position].split(maxsplit=1)[1]))
                high = np.array(floats(lines[position + 1].split(maxsplit=1)[1]))
                position += 2
            weights, biases = [], []
            for _ in range(int(n_layers)):
                _, _, rows, cols = lines[position].split()
                rows, cols = int(rows), int(cols)
                weights.append(np.array([floats(line) for line in lines[position + 1 : position + 1 + rows]]).reshape(rows, cols))
                position += 1 + rows
                _, _, size = lines[position].split()
                biases.append(np.array(floats(lines[position + 1])).reshape(int(size)))
                position += 2
            networks[name] = Mlp(weights, biases, OutputActivation(activation), low, high)
    except (ValueError, IndexError) as e:
        raise ShapeMismatch(f"Malformed checkpoint near line {position + 1}: {e}") from None
    return networks
