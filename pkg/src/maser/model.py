"""Dense MLP with ReLU hidden layers and a softmax head, trained with mini-batch SGD.

Flat parameter order (masks and slices depend on it): layer by layer; within a
layer the weight matrix row-major, then the bias vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .data import Dataset
from .errors import ConfigError, InputError


@dataclass(frozen=True)
class Architecture:
    sizes: tuple[int, ...]
    bias: bool = True

    def __post_init__(self):
        if len(self.sizes) < 2 or any(int(s) < 1 for s in self.sizes):
            raise InputError(f"invalid layer sizes {self.sizes}")
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        return list(zip(self.sizes[:-1], self.sizes[1:]))

    @property
    def param_count(self) -> int:
        return sum(r * c + (c if self.bias else 0) for r, c in self.layer_shapes)

    @property
    def weight_count(self) -> int:
        return sum(r * c for r, c in self.layer_shapes)

    @cached_property
    def weight_positions(self) -> np.ndarray:
        """Boolean flat vector, True where the parameter is a weight (not a bias)."""
        parts = []
        for r, c in self.layer_shapes:
            parts.append(np.ones(r * c, dtype=bool))
            if self.bias:
                parts.append(np.zeros(c, dtype=bool))
        return np.concatenate(parts)


class ModelParams:
    """Ordered (weight, bias) pairs; ``bias`` is None for bias-free layers."""

    def __init__(self, weights, biases=None):
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        if biases is None:
            self.biases = [None] * len(self.weights)
        else:
            self.biases = [None if b is None else np.asarray(b, dtype=np.float64) for b in biases]
        if len(self.biases) != len(self.weights):
            raise InputError("weights and biases differ in layer count")
        has = {b is not None for b in self.biases}
        if len(has) > 1:
            raise InputError("either every layer has a bias or none does")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2:
                raise InputError(f"layer {i} weight is not a matrix")
            if b is not None and b.shape != (w.shape[1],):
                raise InputError(f"layer {i} bias has shape {b.shape}, expected ({w.shape[1]},)")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise InputError(f"layer {i} input size does not chain from layer {i - 1}")

    @property
    def arch(self) -> Architecture:
        sizes = [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]
        return Architecture(tuple(sizes), bias=self.biases[0] is not None)

    @property
    def has_bias(self) -> bool:
        return self.biases[0] is not None

    def flatten(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.reshape(-1))
            if b is not None:
                parts.append(b)
        return np.concatenate(parts)

    @classmethod
    def from_flat(cls, arch: Architecture, flat) -> "ModelParams":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (arch.param_count,):
            raise InputError(f"flat vector has {flat.size} entries, architecture needs {arch.param_count}")
        weights, biases, off = [], [], 0
        for r, c in arch.layer_shapes:
            weights.append(flat[off : off + r * c].reshape(r, c).copy())
            off += r * c
            if arch.bias:
                biases.append(flat[off : off + c].copy())
                off += c
        return cls(weights, biases if arch.bias else None)

    @classmethod
    def zeros(cls, arch: Architecture) -> "ModelParams":
        return cls.from_flat(arch, np.zeros(arch.param_count))

    def copy(self) -> "ModelParams":
        return ModelParams([w.copy() for w in self.weights], None if not self.has_bias else [b.copy() for b in self.biases])

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return self.arch == other.arch and np.array_equal(self.flatten(), other.flatten())

    def __repr__(self):
        return f"ModelParams(sizes={self.arch.sizes}, bias={self.has_bias})"


def init_model(arch: Architecture, rng: np.random.Generator) -> ModelParams:
    """He-uniform weights, zero biases."""
    weights = []
    for r, c in arch.layer_shapes:
        limit = math.sqrt(6.0 / r)
        weights.append(rng.uniform(-limit, limit, size=(r, c)))
    biases = [np.zeros(c) for _, c in arch.layer_shapes] if arch.bias else None
    return ModelParams(weights, biases)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    local_epochs: int = 5
    batch_size: int = 32
    mu: float = 0.0
    optimizer: str = "sgd"
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("train.lr", "must be > 0")
        if self.local_epochs < 1:
            raise ConfigError("train.local_epochs", "must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size", "must be >= 1")
        if self.mu < 0:
            raise ConfigError("train.mu", "must be >= 0")
        if self.optimizer != "sgd":
            raise ConfigError("train.optimizer", f"unsupported optimizer {self.optimizer!r}")


# --------------------------------------------------------------------------
# forward / loss / backward
# --------------------------------------------------------------------------


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _activations(model: ModelParams, X: np.ndarray) -> list[np.ndarray]:
    if X.shape[-1] != model.weights[0].shape[0]:
        raise InputError(f"input has {X.shape[-1]} features, model expects {model.weights[0].shape[0]}")
    acts = [X]
    h = X
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ w
        if b is not None:
            h = h + b
        if i < last:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return acts


def forward(model: ModelParams, x) -> np.ndarray:
    """Class probabilities for one feature vector or a batch (rows)."""
    x = np.asarray(x, dtype=np.float64)
    return _softmax(_activations(model, x)[-1])


def _batch(batch, y=None) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(batch, Dataset):
        X, y = batch.X, batch.y
    else:
        X = np.asarray(batch, dtype=np.float64)
        y = np.asarray(y)
    if X.ndim != 2 or len(X) == 0:
        raise InputError("batch must be a non-empty 2-D array of samples")
    if len(y) != len(X):
        raise InputError("features and labels differ in length")
    return X, y


def loss(model: ModelParams, batch, y=None) -> float:
    """Mean cross-entropy over the batch."""
    X, y = _batch(batch, y)
    logits = _activations(model, X)[-1]
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-log_probs[np.arange(len(y)), y].mean())


def backward(model: ModelParams, batch, y=None) -> ModelParams:
    """Exact gradient of :func:`loss` with respect to every parameter."""
    X, y = _batch(batch, y)
    acts = _activations(model, X)
    delta = _softmax(acts[-1])
    delta[np.arange(len(y)), y] -= 1.0
    delta /= len(y)
    gw, gb = [], []
    for i in range(len(model.weights) - 1, -1, -1):
        gw.append(acts[i].T @ delta)
        gb.append(delta.sum(axis=0))
        if i:
            delta = (delta @ model.weights[i].T) * (acts[i] > 0)
    gw.reverse()
    gb.reverse()
    return ModelParams(gw, gb if model.has_bias else None)


def accuracy(model: ModelParams, data: Dataset) -> float:
    if len(data) == 0:
        raise InputError("cannot score an empty dataset")
    pred = _activations(model, data.X)[-1].argmax(axis=1)
    return float((pred == data.y).mean())


# --------------------------------------------------------------------------
# Local training and plaintext aggregation
# --------------------------------------------------------------------------


def local_train(
    model: ModelParams,
    dataset: Dataset,
    cfg: TrainConfig,
    global_ref: ModelParams | None = None,
    rng: np.random.Generator | None = None,
) -> ModelParams:
    """``cfg.local_epochs`` epochs of shuffled mini-batch SGD.

    With ``cfg.mu > 0`` each step adds the FedProx proximal gradient
    ``mu * (theta - global_ref)``.
    """
    if cfg.mu > 0 and global_ref is None:
        raise ConfigError("train.mu", "FedProx (mu > 0) needs the global reference model")
    if len(dataset) == 0:
        raise InputError("cannot train on an empty dataset")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    arch = model.arch
    theta = model.flatten()
    ref = global_ref.flatten() if cfg.mu > 0 else None
    for _ in range(cfg.local_epochs):
        order = rng.permutation(len(dataset))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            current = ModelParams.from_flat(arch, theta)
            g = backward(current, dataset.X[idx], dataset.y[idx]).flatten()
            if ref is not None:
                g = g + cfg.mu * (theta - ref)
            theta = theta - cfg.lr * g
    return ModelParams.from_flat(arch, theta)


def fedprox_objective(model: ModelParams, batch, global_ref: ModelParams, mu: float, y=None) -> float:
    """Local loss plus (mu/2) * ||theta - global_ref||^2."""
    diff = model.flatten() - global_ref.flatten()
    return loss(model, batch, y) + 0.5 * mu * float(diff @ diff)


def fedprox_gradient(model: ModelParams, batch, global_ref: ModelParams, mu: float, y=None) -> np.ndarray:
    """Flat gradient of :func:`fedprox_objective`; the direction one local SGD step follows."""
    return backward(model, batch, y).flatten() + mu * (model.flatten() - global_ref.flatten())


def fedavg(models, weights) -> ModelParams:
    models = list(models)
    weights = np.asarray(list(weights), dtype=np.float64)
    if not models:
        raise InputError("no models to average")
    if len(weights) != len(models):
        raise InputError(f"{len(models)} models but {len(weights)} weights")
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
        raise InputError(f"aggregation weights must be non-negative and sum to 1, got sum {weights.sum()}")
    arch = models[0].arch
    if any(m.arch != arch for m in models[1:]):
        raise InputError("models have different architectures")
    flat = sum(w * m.flatten() for w, m in zip(weights, models))
    return ModelParams.from_flat(arch, flat)
