"""Small multilayer perceptrons trained with mini-batch SGD, plus FedAvg-style
aggregation gated by the falsification/lazy indicators.

Parameters are kept as one flat float64 vector. Layer ``l`` occupies a
contiguous slice holding its weight matrix (``fan_in x fan_out``, row-major)
followed by its bias vector, so the storage order is also the order used for
hashing and checkpoint export.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyAggregationError, InvalidInputError, TrainingDivergedError


class Activation(str, Enum):
    RELU = "relu"
    SIGMOID = "sigmoid"


@dataclass(frozen=True)
class MlpArchitecture:
    layer_sizes: tuple[int, ...]
    activation: Activation = Activation.RELU

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        object.__setattr__(self, "activation", Activation(self.activation))
        if len(sizes) < 2:
            raise InvalidInputError("architecture needs at least an input and an output layer")
        if any(s <= 0 for s in sizes):
            raise InvalidInputError(f"layer sizes must be positive, got {sizes}")
        if sizes[-1] < 2:
            raise InvalidInputError("output layer needs at least 2 classes")

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def param_count(self) -> int:
        return sum(a * b + b for a, b in zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    def layer_slices(self) -> list[tuple[slice, tuple[int, int], slice]]:
        """(weight slice, weight shape, bias slice) per layer."""
        out = []
        offset = 0
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            w = slice(offset, offset + fan_in * fan_out)
            offset += fan_in * fan_out
            b = slice(offset, offset + fan_out)
            offset += fan_out
            out.append((w, (fan_in, fan_out), b))
        return out

    def descriptor_bytes(self) -> bytes:
        return b"".join(struct.pack("<I", s) for s in self.layer_sizes)


@dataclass(frozen=True, eq=False)
class ModelParameters:
    values: np.ndarray
    arch: MlpArchitecture

    def __post_init__(self):
        vals = np.array(self.values, dtype=np.float64, copy=True).reshape(-1)
        vals.flags.writeable = False
        object.__setattr__(self, "values", vals)
        if vals.size != self.arch.param_count:
            raise InvalidInputError(
                f"expected {self.arch.param_count} parameters for {self.arch.layer_sizes}, got {vals.size}"
            )
        if not np.all(np.isfinite(vals)):
            raise InvalidInputError("model parameters must be finite")

    def __len__(self) -> int:
        return self.values.size

    def __eq__(self, other):
        if not isinstance(other, ModelParameters):
            return NotImplemented
        return self.arch == other.arch and self.canonical_bytes() == other.canonical_bytes()

    def __hash__(self):
        return hash(self.canonical_bytes())

    def canonical_bytes(self) -> bytes:
        """Architecture descriptor followed by little-endian float64 parameters."""
        return self.arch.descriptor_bytes() + self.values.astype("<f8").tobytes()

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [
            (self.values[w].reshape(shape), self.values[b])
            for w, shape, b in self.arch.layer_slices()
        ]

    def to_checkpoint(self) -> dict:
        return {
            "layer_sizes": list(self.arch.layer_sizes),
            "activation": self.arch.activation.value,
            "parameters_hex": self.values.astype("<f8").tobytes().hex(),
        }

    @classmethod
    def from_checkpoint(cls, doc: dict) -> "ModelParameters":
        arch = MlpArchitecture(tuple(doc["layer_sizes"]), Activation(doc["activation"]))
        values = np.frombuffer(bytes.fromhex(doc["parameters_hex"]), dtype="<f8")
        return cls(values, arch)


def save_checkpoint(params: ModelParameters, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(params.to_checkpoint(), fh, indent=2, sort_keys=True)


def load_checkpoint(path) -> ModelParameters:
    with open(path, encoding="utf-8") as fh:
        return ModelParameters.from_checkpoint(json.load(fh))


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if x.ndim != 2:
            raise InvalidInputError("features must be a 2-D matrix")
        if x.shape[0] != y.shape[0]:
            raise InvalidInputError(f"{x.shape[0]} feature rows but {y.shape[0]} labels")
        if y.size and y.min() < 0:
            raise InvalidInputError("labels must be non-negative class indices")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    @property
    def size(self) -> int:
        return int(self.labels.shape[0])

    def __len__(self) -> int:
        return self.size

    def subset(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx])


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 1
    batch_size: int = 16
    rng_seed: int = 0

    def __post_init__(self):
        if not self.learning_rate >= 0 or not math.isfinite(self.learning_rate):
            raise InvalidInputError("learning_rate must be a finite non-negative number")
        if self.epochs < 1:
            raise InvalidInputError("epochs must be >= 1")
        if self.batch_size < 1:
            raise InvalidInputError("batch_size must be >= 1")


def init_model(arch: MlpArchitecture, seed: int) -> ModelParameters:
    """Xavier-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    values = np.zeros(arch.param_count)
    for w, (fan_in, fan_out), _ in arch.layer_slices():
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        values[w] = rng.uniform(-bound, bound, size=fan_in * fan_out)
    return ModelParameters(values, arch)


def _activate(z: np.ndarray, kind: Activation) -> np.ndarray:
    if kind is Activation.RELU:
        return np.maximum(z, 0.0)
    return 1.0 / (1.0 + np.exp(-z))


def _activate_grad(z: np.ndarray, a: np.ndarray, kind: Activation) -> np.ndarray:
    if kind is Activation.RELU:
        return (z > 0).astype(np.float64)
    return a * (1.0 - a)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_width(model: ModelParameters, features: np.ndarray) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != model.arch.n_inputs:
        raise InvalidInputError(
            f"feature width {x.shape[1]} does not match input layer size {model.arch.n_inputs}"
        )
    return x


def forward(model: ModelParameters, features) -> np.ndarray:
    """Class-probability rows for each input row."""
    a = _check_width(model, features)
    layers = model.layers()
    for i, (w, b) in enumerate(layers):
        z = a @ w + b
        a = _softmax(z) if i == len(layers) - 1 else _activate(z, model.arch.activation)
    return a


def loss_and_grad(model: ModelParameters, features, labels) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over the batch and its gradient (flat)."""
    x = _check_width(model, features)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    kind = model.arch.activation
    layers = model.layers()
    pre, post = [], [x]
    a = x
    for i, (w, b) in enumerate(layers):
        z = a @ w + b
        pre.append(z)
        a = _softmax(z) if i == len(layers) - 1 else _activate(z, kind)
        post.append(a)

    n = x.shape[0]
    probs = post[-1]
    picked = probs[np.arange(n), y]
    loss = float(-np.mean(np.log(np.maximum(picked, 1e-300))))

    grad = np.empty(model.arch.param_count)
    delta = probs.copy()
    delta[np.arange(n), y] -= 1.0
    delta /= n
    slices = model.arch.layer_slices()
    for i in range(len(layers) - 1, -1, -1):
        w_sl, _, b_sl = slices[i]
        grad[w_sl] = (post[i].T @ delta).reshape(-1)
        grad[b_sl] = delta.sum(axis=0)
        if i:
            delta = (delta @ layers[i][0].T) * _activate_grad(pre[i - 1], post[i], kind)
    return loss, grad


def local_train(model: ModelParameters, dataset: Dataset, cfg: TrainConfig) -> ModelParameters:
    """Mini-batch SGD for ``cfg.epochs`` passes over a seeded shuffle of ``dataset``."""
    if dataset.size == 0:
        raise InvalidInputError("cannot train on an empty dataset")
    if cfg.batch_size > dataset.size:
        raise InvalidInputError(
            f"batch_size {cfg.batch_size} exceeds dataset size {dataset.size}"
        )
    if dataset.labels.max() >= model.arch.n_classes:
        raise InvalidInputError("label index exceeds the output layer size")
    rng = np.random.default_rng(cfg.rng_seed)
    current = model
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(dataset.size)
        for start in range(0, dataset.size, cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            loss, grad = loss_and_grad(current, dataset.features[batch], dataset.labels[batch])
            if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise TrainingDivergedError(step)
            updated = current.values - cfg.learning_rate * grad
            if not np.all(np.isfinite(updated)):
                raise TrainingDivergedError(step)
            current = ModelParameters(updated, model.arch)
            step += 1
    return current


def predict(model: ModelParameters, features) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class index
    return np.argmax(forward(model, features), axis=1)


def evaluate(model: ModelParameters, test_set: Dataset) -> float:
    if test_set.size == 0:
        raise InvalidInputError("test set is empty")
    return float(np.mean(predict(model, test_set.features) == test_set.labels))


@dataclass(frozen=True)
class WeightedSubmission:
    params: ModelParameters
    size: int
    alpha: int = 0
    beta: int = 0

    @property
    def included(self) -> bool:
        return self.alpha == 0 and self.beta == 0


def _as_submission(item) -> WeightedSubmission:
    if isinstance(item, WeightedSubmission):
        return item
    return WeightedSubmission(*item)


def aggregation_weights(submissions: Iterable) -> list[float]:
    """Per-submission weight (1-a)(1-b) n_k / n, with n summed over included clients."""
    subs = [_as_submission(s) for s in submissions]
    total = sum(s.size for s in subs if s.included)
    if not subs or total <= 0:
        raise EmptyAggregationError("no submission passed screening")
    return [(1 - s.alpha) * (1 - s.beta) * s.size / total for s in subs]


def aggregate(submissions: Sequence) -> ModelParameters:
    """Indicator-gated, data-size-weighted average of client parameters.

    ``submissions`` holds ``WeightedSubmission`` objects or
    ``(params, size, alpha, beta)`` tuples.
    """
    subs = [_as_submission(s) for s in submissions]
    weights = aggregation_weights(subs)
    arch = subs[0].params.arch
    if any(s.params.arch != arch for s in subs):
        raise InvalidInputError("all submissions must share one architecture")
    acc = np.zeros(arch.param_count)
    for s, w in zip(subs, weights):
        if w:
            acc += w * s.params.values
    return ModelParameters(acc, arch)


__all__ = [
    "Activation",
    "Dataset",
    "MlpArchitecture",
    "ModelParameters",
    "TrainConfig",
    "WeightedSubmission",
    "aggregate",
    "aggregation_weights",
    "evaluate",
    "forward",
    "init_model",
    "load_checkpoint",
    "local_train",
    "loss_and_grad",
    "predict",
    "save_checkpoint",
]
