"""Dense MLP engine: forward pass, backprop, SGD and flat parameter vectors.

Parameters live in one contiguous float64 vector so that aggregation, sign
flips and masking are plain vector arithmetic. Layer ``k`` owns a weight
block of shape ``(fan_in, fan_out)`` (row-major) followed by its bias.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

from qinfer.errors import ConfigurationError, DomainError

if TYPE_CHECKING:
    from qinfer.data import LabeledDataset

MNIST_ARCH = (784, 64, 10)
CIFAR10_ARCH = (3072, 64, 10)

_EVAL_CHUNK = 4096


def param_count(arch: Sequence[int]) -> int:
    return sum(a * b + b for a, b in zip(arch[:-1], arch[1:]))


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Immutable parameter set of an MLP with architecture ``arch``."""

    arch: tuple[int, ...]
    flat: np.ndarray

    def __post_init__(self):
        arch = tuple(int(a) for a in self.arch)
        if len(arch) < 2 or min(arch) < 1:
            raise ConfigurationError(f"invalid architecture {arch}")
        flat = np.array(self.flat, dtype=np.float64).ravel()
        if flat.size != param_count(arch):
            raise ConfigurationError(
                f"architecture {arch} needs {param_count(arch)} parameters, got {flat.size}"
            )
        flat.setflags(write=False)
        object.__setattr__(self, "arch", arch)
        object.__setattr__(self, "flat", flat)

    @classmethod
    def from_layers(cls, layers: Sequence[tuple[np.ndarray, np.ndarray]]) -> ModelParams:
        arch = [np.shape(layers[0][0])[0]]
        chunks = []
        for w, b in layers:
            w = np.asarray(w, dtype=np.float64)
            b = np.asarray(b, dtype=np.float64)
            if w.ndim != 2 or w.shape[0] != arch[-1] or b.shape != (w.shape[1],):
                raise ConfigurationError("layer shapes do not chain")
            arch.append(w.shape[1])
            chunks += [w.ravel(), b]
        return cls(tuple(arch), np.concatenate(chunks))

    @classmethod
    def zeros(cls, arch: Sequence[int]) -> ModelParams:
        return cls(tuple(arch), np.zeros(param_count(arch)))

    @property
    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return _layer_views(self.arch, self.flat)

    def _check(self, other: ModelParams) -> None:
        if not isinstance(other, ModelParams):
            raise DomainError(f"expected ModelParams, got {type(other).__name__}")
        if other.arch != self.arch:
            raise DomainError(f"architecture mismatch: {self.arch} vs {other.arch}")

    def __add__(self, other: ModelParams) -> ModelParams:
        self._check(other)
        return ModelParams(self.arch, self.flat + other.flat)

    def __sub__(self, other: ModelParams) -> ModelParams:
        self._check(other)
        return ModelParams(self.arch, self.flat - other.flat)

    def __neg__(self) -> ModelParams:
        return ModelParams(self.arch, -self.flat)

    def __mul__(self, scalar: float) -> ModelParams:
        return ModelParams(self.arch, self.flat * float(scalar))

    __rmul__ = __mul__

    def same_as(self, other: ModelParams) -> bool:
        """Bitwise equality of architecture and every parameter."""
        return self.arch == other.arch and np.array_equal(self.flat, other.flat)


def _layer_views(arch, flat):
    out, pos = [], 0
    for fan_in, fan_out in zip(arch[:-1], arch[1:]):
        w = flat[pos : pos + fan_in * fan_out].reshape(fan_in, fan_out)
        pos += fan_in * fan_out
        out.append((w, flat[pos : pos + fan_out]))
        pos += fan_out
    return out


@dataclass(frozen=True)
class TrainSettings:
    learning_rate: float = 0.01
    dropout: float = 0.5
    epochs: int = 1
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigurationError(f"learning rate must be non-negative, got {self.learning_rate}")
        if not 0 <= self.dropout < 1:
            raise ConfigurationError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch size must be positive")


def init_params(arch: Sequence[int], seed: int) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(arch[:-1], arch[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        layers.append((rng.uniform(-limit, limit, size=(fan_in, fan_out)), np.zeros(fan_out)))
    return ModelParams.from_layers(layers)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _as_batch(model: ModelParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.arch[0]:
        raise ConfigurationError(
            f"input of shape {np.shape(x)} does not match input dimension {model.arch[0]}"
        )
    return x, single


def _forward_cache(layers, x, dropout_mask):
    """Return pre-activations and activations for every layer."""
    acts, pres = [x], []
    a = x
    last = len(layers) - 1
    for k, (w, b) in enumerate(layers):
        z = a @ w + b
        pres.append(z)
        if k < last:
            a = np.maximum(z, 0.0)
            if dropout_mask is not None:
                a = a * dropout_mask[k]
            acts.append(a)
    return pres, acts


def forward(model: ModelParams, x, dropout_mask: Sequence[np.ndarray] | None = None) -> np.ndarray:
    """Class probabilities for one input vector or a batch of row vectors.

    ``dropout_mask`` holds one already-scaled multiplier array per hidden
    layer; ``None`` disables dropout.
    """
    batch, single = _as_batch(model, x)
    if dropout_mask is not None and len(dropout_mask) != len(model.arch) - 2:
        raise ConfigurationError("need one dropout mask per hidden layer")
    pres, _ = _forward_cache(model.layers, batch, dropout_mask)
    probs = softmax(pres[-1])
    return probs[0] if single else probs


def _backprop(layers, x, y, dropout_mask):
    pres, acts = _forward_cache(layers, x, dropout_mask)
    probs = softmax(pres[-1])
    rows = np.arange(len(y))
    loss = -np.mean(np.log(np.maximum(probs[rows, y], 1e-300)))
    delta = probs
    delta[rows, y] -= 1.0
    delta /= len(y)
    grads = [None] * len(layers)
    for k in range(len(layers) - 1, -1, -1):
        w = layers[k][0]
        grads[k] = (acts[k].T @ delta, delta.sum(axis=0))
        if k > 0:
            delta = delta @ w.T
            if dropout_mask is not None:
                delta = delta * dropout_mask[k - 1]
            delta = delta * (pres[k - 1] > 0)
    return loss, grads


def loss_and_gradient(
    model: ModelParams, x, y, dropout_mask: Sequence[np.ndarray] | None = None
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient as a flat vector."""
    batch, _ = _as_batch(model, x)
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if len(y) != len(batch):
        raise ConfigurationError("label count does not match batch size")
    loss, grads = _backprop(model.layers, batch, y, dropout_mask)
    return float(loss), np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])


def cross_entropy(model: ModelParams, x, y) -> float:
    probs = forward(model, np.atleast_2d(x))
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    return float(-np.mean(np.log(np.maximum(probs[np.arange(len(y)), y], 1e-300))))


def dropout_masks(rng: np.random.Generator, arch: Sequence[int], batch: int, rate: float):
    """Inverted-dropout multipliers for each hidden layer, or None when disabled."""
    if rate <= 0:
        return None
    keep = 1.0 - rate
    return [(rng.random((batch, h)) < keep) / keep for h in arch[1:-1]]


def local_train(model: ModelParams, shard: LabeledDataset, settings: TrainSettings) -> ModelParams:
    """Plain minibatch SGD over the shard; the input model is never modified."""
    n = len(shard.labels)
    if n == 0:
        raise DomainError("cannot train on an empty shard")
    if shard.features.shape[1] != model.arch[0]:
        raise ConfigurationError(
            f"shard features have dimension {shard.features.shape[1]}, model expects {model.arch[0]}"
        )
    rng = np.random.default_rng(settings.seed)
    work = model.flat.copy()
    layers = _layer_views(model.arch, work)
    lr = settings.learning_rate
    for _ in range(settings.epochs):
        order = rng.permutation(n)
        for start in range(0, n, settings.batch_size):
            idx = order[start : start + settings.batch_size]
            masks = dropout_masks(rng, model.arch, len(idx), settings.dropout)
            _, grads = _backprop(layers, shard.features[idx], shard.labels[idx], masks)
            for (w, b), (gw, gb) in zip(layers, grads):
                w -= lr * gw
                b -= lr * gb
    return ModelParams(model.arch, work)


def average_params(updates: Sequence[ModelParams]) -> ModelParams:
    """Element-wise arithmetic mean of parameter sets (FedAvg)."""
    if len(updates) == 0:
        raise DomainError("cannot average an empty list of updates")
    first = updates[0]
    total = np.zeros_like(first.flat)
    for u in updates:
        first._check(u)
        total += u.flat
    return ModelParams(first.arch, total / len(updates))


def predict(model: ModelParams, features: np.ndarray) -> np.ndarray:
    """Argmax class per row; ties go to the lowest class index."""
    features, _ = _as_batch(model, features)
    out = np.empty(len(features), dtype=np.int64)
    for start in range(0, len(features), _EVAL_CHUNK):
        chunk = features[start : start + _EVAL_CHUNK]
        pres, _ = _forward_cache(model.layers, chunk, None)
        out[start : start + _EVAL_CHUNK] = np.argmax(softmax(pres[-1]), axis=1)
    return out


def accuracy(model: ModelParams, dataset: LabeledDataset) -> float:
    if len(dataset.labels) == 0:
        raise DomainError("cannot evaluate accuracy on an empty dataset")
    return float(np.mean(predict(model, dataset.features) == dataset.labels))
