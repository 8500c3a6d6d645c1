"""Masked feed-forward models, cross-entropy, Adam and the training loop.

Invariant kept by every mutating function here: wherever a layer's mask is 0 the
stored weight is exactly +0.0. Biases are never masked.
"""
import copy
import logging
import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import tensor as T
from .errors import DataError, DimensionError, MissingSnapshotError
from .models import ArchitectureConfig, TrainConfig
from .tensor import Tensor, no_grad

if TYPE_CHECKING:
    from .data import GroupedDataset

logger = logging.getLogger(__name__)

KIND_DENSE = "dense"
KIND_CONV = "conv2d"


@dataclass
class MaskedLayer:
    """A weight matrix (dense: in×out) or kernel (conv: out×in×kh×kw) with a keep-mask"""
    kind: str
    weights: Tensor
    bias: Tensor
    mask: np.ndarray
    layer_id: int
    activation: str = "relu"
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.mask.shape != self.weights.shape:
            raise DimensionError(f"mask {self.mask.shape} does not match weights {self.weights.shape}")
        self.mask = self.mask.astype(np.uint8)

    @property
    def num_weights(self) -> int:
        return self.weights.size

    @property
    def nonzero_count(self) -> int:
        return int(self.mask.sum())

    def forward(self, x: Tensor) -> Tensor:
        effective = T.mul(self.weights, Tensor(self.mask.astype(np.float64)))
        if self.kind == KIND_DENSE:
            out = T.add_bias(T.matmul(x, effective), self.bias)
        else:
            out = T.add_bias(T.conv2d(x, effective, self.stride, self.padding), self.bias)
        return T.relu(out) if self.activation == "relu" else out


class Model:
    """An ordered stack of masked layers ending in class logits"""

    def __init__(self, layers: List[MaskedLayer], output_classes: int, input_shape: Sequence[int]):
        self.layers = layers
        self.output_classes = output_classes
        self.input_shape = tuple(int(s) for s in input_shape)
        self.initial_snapshot: Optional[List[Tuple[np.ndarray, np.ndarray]]] = None
        self.loss_history: List[float] = []

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.input_shape))

    @property
    def num_weights(self) -> int:
        return sum(layer.num_weights for layer in self.layers)

    @property
    def nonzero_count(self) -> int:
        return sum(layer.nonzero_count for layer in self.layers)

    def layer_sizes(self) -> List[int]:
        return [layer.num_weights for layer in self.layers]

    def parameters(self) -> List[Tensor]:
        params = []
        for layer in self.layers:
            params.extend([layer.weights, layer.bias])
        return params

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def clone(self) -> "Model":
        twin = copy.copy(self)
        twin.layers = [
            MaskedLayer(layer.kind, Tensor(layer.weights.data.copy(), requires_grad=True),
                        Tensor(layer.bias.data.copy(), requires_grad=True), layer.mask.copy(),
                        layer.layer_id, layer.activation, layer.stride, layer.padding)
            for layer in self.layers
        ]
        twin.initial_snapshot = copy.deepcopy(self.initial_snapshot)
        twin.loss_history = list(self.loss_history)
        return twin

    def _prepare(self, batch: Union[np.ndarray, Tensor]) -> Tensor:
        x = batch if isinstance(batch, Tensor) else Tensor(batch)
        if x.data.ndim != 2 or x.shape[1] != self.input_dim:
            raise DimensionError(f"batch {x.shape} does not match model input dimension {self.input_dim}")
        if self.layers and self.layers[0].kind == KIND_CONV:
            x = T.reshape(x, (x.shape[0],) + self.input_shape)
        return x

    def _run(self, x: Tensor, layers: Sequence[MaskedLayer]) -> Tensor:
        for layer in layers:
            if layer.kind == KIND_DENSE and x.data.ndim > 2:
                x = T.reshape(x, (x.shape[0], -1))
            x = layer.forward(x)
        return x

    def forward(self, batch: Union[np.ndarray, Tensor]) -> Tensor:
        return self._run(self._prepare(batch), self.layers)

    def embed(self, batch: Union[np.ndarray, Tensor], layer: int = -1) -> Tensor:
        """Flattened activations of hidden layer ``layer`` (0 = first, -1 = penultimate).

        A model without hidden layers embeds a batch as itself.
        """
        hidden = self.layers[:-1]
        if hidden:
            if not -len(hidden) <= layer < len(hidden):
                raise DimensionError(f"hidden layer {layer} out of range for {len(hidden)} hidden layer(s)")
            hidden = hidden[:layer % len(hidden) + 1]
        x = self._run(self._prepare(batch), hidden)
        return T.reshape(x, (x.shape[0], -1)) if x.data.ndim > 2 else x

    def describe(self) -> Dict:
        return {
            "output_classes": self.output_classes,
            "input_shape": list(self.input_shape),
            "layers": [
                {"layer_id": l.layer_id, "kind": l.kind, "shape": list(l.weights.shape),
                 "bias": l.bias.shape[0], "activation": l.activation, "stride": l.stride,
                 "padding": l.padding, "kept": l.nonzero_count}
                for l in self.layers
            ],
        }


# =============== Construction ===============

def _kaiming_layer(rng: np.random.Generator, kind: str, shape: Tuple[int, ...], fan_in: int,
                   layer_id: int, activation: str, padding: int = 0) -> MaskedLayer:
    bound = math.sqrt(6.0 / fan_in)
    weights = rng.uniform(-bound, bound, size=shape)
    bias_bound = 1.0 / math.sqrt(fan_in)
    out_features = shape[1] if kind == KIND_DENSE else shape[0]
    bias = rng.uniform(-bias_bound, bias_bound, size=out_features)
    return MaskedLayer(kind, Tensor(weights, requires_grad=True), Tensor(bias, requires_grad=True),
                       np.ones(shape, dtype=np.uint8), layer_id, activation, padding=padding)


def build_mlp(input_dim: int, hidden: Sequence[int], output_classes: int, seed: int) -> Model:
    rng = np.random.default_rng(seed)
    widths = [input_dim] + list(hidden) + [output_classes]
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        activation = "none" if i == len(widths) - 2 else "relu"
        layers.append(_kaiming_layer(rng, KIND_DENSE, (fan_in, fan_out), fan_in, i, activation))
    return Model(layers, output_classes, (input_dim,))


def build_convnet(input_shape: Sequence[int], channels: Sequence[int], kernel_size: int,
                  output_classes: int, seed: int) -> Model:
    """Same-padded conv layers followed by one dense classifier"""
    if len(input_shape) != 3:
        raise DimensionError(f"conv nets need a C,H,W input shape, got {list(input_shape)}")
    rng = np.random.default_rng(seed)
    c, h, w = input_shape
    padding = kernel_size // 2
    layers = []
    in_channels = c
    for i, out_channels in enumerate(channels):
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        layers.append(_kaiming_layer(rng, KIND_CONV, shape, in_channels * kernel_size ** 2, i, "relu", padding))
        in_channels = out_channels
        # odd kernels with k//2 padding keep H×W; even kernels grow by one
        h, w = h + 2 * padding - kernel_size + 1, w + 2 * padding - kernel_size + 1
    flat = in_channels * h * w
    layers.append(_kaiming_layer(rng, KIND_DENSE, (flat, output_classes), flat, len(channels), "none"))
    return Model(layers, output_classes, input_shape)


def build_model(arch: ArchitectureConfig, input_dim: int, output_classes: int, seed: int) -> Model:
    if arch.kind == "mlp":
        return build_mlp(input_dim, arch.hidden, output_classes, seed)
    shape = arch.input_shape or [1, 1, input_dim]
    if int(np.prod(shape)) != input_dim:
        raise DimensionError(f"input_shape {shape} does not hold {input_dim} features")
    return build_convnet(shape, arch.conv_channels, arch.kernel_size, output_classes, seed)


# =============== Loss ===============

def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log softmax probability of the true class"""
    labels = np.asarray(labels, dtype=np.int64)
    n, classes = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels {labels.shape} do not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise DataError(f"labels must lie in [0, {classes})")
    # the row max is a constant shift: it cancels analytically, so no gradient flows through it
    shift = Tensor(np.repeat(logits.data.max(axis=1, keepdims=True), classes, axis=1))
    z = T.sub(logits, shift)
    log_normalizer = T.log(T.sum(T.exp(z), axis=1))
    onehot = np.zeros((n, classes))
    onehot[np.arange(n), labels] = 1.0
    picked = T.sum(T.mul(z, Tensor(onehot)), axis=1)
    return T.mean(T.sub(log_normalizer, picked))


def loss_value(model: Model, features: np.ndarray, labels: np.ndarray) -> float:
    with no_grad():
        return cross_entropy(model.forward(features), labels).item()


def loss_and_gradients(model: Model, features: np.ndarray, labels: np.ndarray
                       ) -> Tuple[float, List[np.ndarray], List[np.ndarray]]:
    """Mean cross-entropy with per-layer weight and bias gradients"""
    model.zero_grad()
    loss = cross_entropy(model.forward(features), labels)
    T.backward(loss)
    weight_grads = [_grad_or_zero(l.weights) for l in model.layers]
    bias_grads = [_grad_or_zero(l.bias) for l in model.layers]
    model.zero_grad()
    return loss.item(), weight_grads, bias_grads


def _grad_or_zero(t: Tensor) -> np.ndarray:
    return t.grad.copy() if t.grad is not None else np.zeros_like(t.data)


def predict(model: Model, features: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    out = []
    with no_grad():
        for start in range(0, len(features), batch_size):
            out.append(model.forward(features[start:start + batch_size]).data.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


# =============== Optimization ===============

class Adam:
    """Adam moments and step count for one model's parameter list"""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: List[np.ndarray] = []
        self.v: List[np.ndarray] = []
        self.t = 0

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "Adam":
        return cls(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)

    def step(self, model: Model, gradients: Optional[List[np.ndarray]] = None) -> Model:
        params = model.parameters()
        if gradients is None:
            gradients = [_grad_or_zero(p) for p in params]
        if len(gradients) != len(params):
            raise DimensionError(f"{len(gradients)} gradients for {len(params)} parameters")
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in params]
            self.v = [np.zeros_like(p.data) for p in params]
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, gradients, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)
        return apply_masks(model)


def adam_step(model: Model, state: Adam, gradients: List[np.ndarray]) -> Model:
    return state.step(model, gradients)


def apply_masks(model: Model) -> Model:
    for layer in model.layers:
        layer.weights.data[...] = np.where(layer.mask.astype(bool), layer.weights.data, 0.0)
    return model


def train(model: Model, data: "GroupedDataset", epochs: int, batch_size: int = 64, seed: int = 0,
          config: Optional[TrainConfig] = None, optimizer: Optional[Adam] = None) -> Model:
    """Shuffled mini-batch Adam training; masks are re-applied after every step"""
    if epochs < 0:
        raise ValueError("epochs must be non-negative")
    if data.n == 0:
        raise DataError("cannot train on an empty dataset")
    if epochs == 0:
        return model
    optimizer = optimizer or Adam.from_config(config or TrainConfig())
    rng = np.random.default_rng(seed)
    for epoch in range(epochs):
        order = rng.permutation(data.n)
        total, seen = 0.0, 0
        for start in range(0, data.n, batch_size):
            idx = order[start:start + batch_size]
            model.zero_grad()
            loss = cross_entropy(model.forward(data.features[idx]), data.labels[idx])
            T.backward(loss)
            optimizer.step(model)
            total += loss.item() * len(idx)
            seen += len(idx)
        model.loss_history.append(total / seen)
        logger.debug("epoch %d/%d loss %.6f", epoch + 1, epochs, model.loss_history[-1])
    model.zero_grad()
    return model


# =============== Snapshots ===============

def snapshot_init(model: Model) -> Model:
    model.initial_snapshot = [(l.weights.data.copy(), l.bias.data.copy()) for l in model.layers]
    return model


def reset_to_snapshot(model: Model) -> Model:
    """Restore initial weights; pruned positions stay zero"""
    if model.initial_snapshot is None:
        raise MissingSnapshotError("model has no initial snapshot to reset to")
    for layer, (weights, bias) in zip(model.layers, model.initial_snapshot):
        layer.weights.data[...] = weights
        layer.bias.data[...] = bias
    return apply_masks(model)
