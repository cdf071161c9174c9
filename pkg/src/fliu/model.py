"""
Vector-input classifiers on flat parameter vectors.

A model is a ``ModelSpec`` plus a 1-D float64 array. Layers are dense with
bias; hidden layers use ReLU and the output is a softmax over classes. Per
layer the vector holds the (fan_in, fan_out) weight matrix in row-major
order followed by the bias.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .dataset import LabeledDataset

PARAM_MAGIC = b"FLIUPV01"


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    architecture: str  # "logistic" | "mlp"
    input_dim: int
    num_classes: int
    hidden_sizes: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if self.architecture not in ("logistic", "mlp"):
            raise ModelError(f"unknown architecture {self.architecture!r}")
        if self.architecture == "logistic" and self.hidden_sizes:
            raise ModelError("logistic models have no hidden layers")
        if self.architecture == "mlp" and not self.hidden_sizes:
            raise ModelError("mlp needs at least one hidden layer")
        if self.input_dim < 1 or self.num_classes < 2 or any(h < 1 for h in self.hidden_sizes):
            raise ModelError("layer sizes must be positive and num_classes >= 2")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim, *self.hidden_sizes, self.num_classes]

    @property
    def num_params(self) -> int:
        sizes = self.layer_sizes
        return sum((a + 1) * b for a, b in zip(sizes[:-1], sizes[1:]))

    def digest(self) -> bytes:
        key = f"{self.architecture}|{self.input_dim}|{','.join(map(str, self.hidden_sizes))}|{self.num_classes}"
        return hashlib.sha256(key.encode()).digest()[:8]


def unpack(spec: ModelSpec, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a flat vector into per-layer (W, b) views."""
    if params.shape != (spec.num_params,):
        raise ModelError(f"parameter vector has shape {params.shape}, spec needs ({spec.num_params},)")
    layers = []
    pos = 0
    sizes = spec.layer_sizes
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        W = params[pos : pos + fan_in * fan_out].reshape(fan_in, fan_out)
        pos += fan_in * fan_out
        b = params[pos : pos + fan_out]
        pos += fan_out
        layers.append((W, b))
    return layers


def init_params(spec: ModelSpec, rng: np.random.Generator) -> np.ndarray:
    """Gaussian weights with std 1/sqrt(fan_in), zero biases."""
    params = np.zeros(spec.num_params)
    for W, _ in unpack(spec, params):
        W[...] = rng.standard_normal(W.shape) / np.sqrt(W.shape[0])
    return params


def _check_inputs(spec: ModelSpec, X: np.ndarray):
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise ModelError(f"inputs have shape {X.shape}, spec expects (*, {spec.input_dim})")


def logits(spec: ModelSpec, params: np.ndarray, X: np.ndarray) -> np.ndarray:
    _check_inputs(spec, X)
    layers = unpack(spec, params)
    h = X
    for W, b in layers[:-1]:
        h = np.maximum(h @ W + b, 0.0)
    W, b = layers[-1]
    return h @ W + b


def predict(spec: ModelSpec, params: np.ndarray, X: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class
    return np.argmax(logits(spec, params, X), axis=1)


def loss_and_grad(spec: ModelSpec, params: np.ndarray, X: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over the batch and its exact gradient."""
    _check_inputs(spec, X)
    if len(X) == 0 or len(X) != len(y):
        raise ModelError("batch must be nonempty with one label per row")
    layers = unpack(spec, params)
    acts = [X]
    h = X
    for W, b in layers[:-1]:
        h = np.maximum(h @ W + b, 0.0)
        acts.append(h)
    W_out, b_out = layers[-1]
    z = h @ W_out + b_out
    z = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    B = len(y)
    loss = float(np.mean(log_norm - z[np.arange(B), y]))

    delta = np.exp(z - log_norm[:, None])
    delta[np.arange(B), y] -= 1.0
    delta /= B

    grad = np.zeros_like(params)
    grad_layers = unpack(spec, grad)
    for i in range(len(layers) - 1, -1, -1):
        W, _ = layers[i]
        gW, gb = grad_layers[i]
        gW[...] = acts[i].T @ delta
        gb[...] = delta.sum(axis=0)
        if i:
            delta = (delta @ W.T) * (acts[i] > 0)
    return loss, grad


@dataclass(frozen=True)
class OptimizerState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    learning_rate: float
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def fresh(cls, num_params: int, learning_rate: float, **kwargs) -> "OptimizerState":
        if not learning_rate > 0:
            raise ModelError("learning rate must be positive")
        return cls(np.zeros(num_params), np.zeros(num_params), learning_rate, **kwargs)

    def reset_moments(self) -> "OptimizerState":
        return replace(
            self,
            first_moment=np.zeros_like(self.first_moment),
            second_moment=np.zeros_like(self.second_moment),
            step_count=0,
        )


def adam_step(state: OptimizerState, params: np.ndarray, grad: np.ndarray) -> tuple[np.ndarray, OptimizerState]:
    if not (params.shape == grad.shape == state.first_moment.shape):
        raise ModelError("params, grad and optimizer moments must have equal length")
    t = state.step_count + 1
    m = state.beta1 * state.first_moment + (1.0 - state.beta1) * grad
    v = state.beta2 * state.second_moment + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_params = params - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return new_params, replace(state, first_moment=m, second_moment=v, step_count=t)


def batches_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def train_epochs(
    spec: ModelSpec,
    params: np.ndarray,
    state: OptimizerState,
    dataset: LabeledDataset,
    indices,
    epochs: int,
    batch_size: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, OptimizerState]:
    """Run ``epochs`` shuffled passes over the client's samples, one Adam step per batch.

    The last batch of a pass may be short; it is kept.
    """
    indices = np.asarray(indices, dtype=np.int64)
    if len(indices) == 0:
        raise ModelError("cannot train on an empty client set")
    if epochs < 1 or batch_size < 1:
        raise ModelError("epochs and batch_size must be >= 1")
    for _ in range(epochs):
        order = rng.permutation(indices)
        for start in range(0, len(order), batch_size):
            batch = order[start : start + batch_size]
            _, grad = loss_and_grad(spec, params, dataset.features[batch], dataset.labels[batch])
            params, state = adam_step(state, params, grad)
    return params, state


def evaluate_accuracy(spec: ModelSpec, params: np.ndarray, dataset: LabeledDataset, indices=None) -> float:
    if indices is None:
        indices = np.arange(len(dataset))
    indices = np.asarray(indices, dtype=np.int64)
    if len(indices) == 0:
        raise ModelError("cannot evaluate on an empty set")
    pred = predict(spec, params, dataset.features[indices])
    return float(np.mean(pred == dataset.labels[indices]))


def decay_learning_rate(state: OptimizerState, factor: float) -> OptimizerState:
    if not 0 < factor <= 1:
        raise ModelError(f"decay factor must lie in (0, 1], got {factor}")
    return replace(state, learning_rate=state.learning_rate * factor)


# Blob layout: 8-byte magic, 8-byte spec digest, little-endian uint64 length,
# then `length` little-endian float64 values.
_BLOB_HEADER = struct.Struct("<8s8sQ")


def params_to_bytes(spec: ModelSpec, params: np.ndarray) -> bytes:
    if params.shape != (spec.num_params,):
        raise ModelError("parameter vector does not match spec")
    return _BLOB_HEADER.pack(PARAM_MAGIC, spec.digest(), len(params)) + params.astype("<f8").tobytes()


def params_from_bytes(spec: ModelSpec, blob: bytes) -> np.ndarray:
    if len(blob) < _BLOB_HEADER.size:
        raise ModelError("parameter blob shorter than header")
    magic, digest, length = _BLOB_HEADER.unpack_from(blob)
    if magic != PARAM_MAGIC:
        raise ModelError("not a parameter blob")
    if digest != spec.digest():
        raise ModelError("parameter blob was written for a different model spec")
    if length != spec.num_params or len(blob) != _BLOB_HEADER.size + 8 * length:
        raise ModelError("parameter blob length mismatch")
    return np.frombuffer(blob, dtype="<f8", offset=_BLOB_HEADER.size).astype(np.float64)


def save_params(path, spec: ModelSpec, params: np.ndarray) -> None:
    Path(path).write_bytes(params_to_bytes(spec, params))


def load_params(path, spec: ModelSpec) -> np.ndarray:
    return params_from_bytes(spec, Path(path).read_bytes())
