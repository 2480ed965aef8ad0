"""Dense feed-forward networks with hand-written backprop and plain SGD.

Tensors are 2-D float64 numpy arrays (rows x cols, C order). A model is a
stack of ``(weight [in x out], bias [out])`` pairs; hidden layers use ReLU and
the last layer is linear, so ``forward`` returns logits.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _kernels as K


class ShapeError(ValueError):
    """Raised when array shapes do not line up."""


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up where finite values are required."""


def as_tensor(x) -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D tensor, got shape {arr.shape}")
    return arr


def as_labels(y) -> np.ndarray:
    arr = np.ascontiguousarray(y, dtype=np.int64)
    if arr.ndim != 1:
        raise ShapeError(f"labels must be 1-D, got shape {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class ModelParams:
    layers: tuple[tuple[np.ndarray, np.ndarray], ...]

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("a model needs at least one layer")
        prev = None
        for w, b in self.layers:
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"bad layer shapes {w.shape} / {b.shape}")
            if prev is not None and w.shape[0] != prev:
                raise ShapeError(f"layer expects width {w.shape[0]}, previous layer gives {prev}")
            prev = w.shape[1]

    @property
    def dims(self) -> list[int]:
        return [self.layers[0][0].shape[0]] + [w.shape[1] for w, _ in self.layers]

    @property
    def n_classes(self) -> int:
        return self.layers[-1][0].shape[1]

    @property
    def size(self) -> int:
        return sum(w.size + b.size for w, b in self.layers)

    def flat(self) -> np.ndarray:
        """All parameters in checkpoint order: per layer, weights (row-major) then biases."""
        return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in self.layers])

    @classmethod
    def from_flat(cls, dims: Sequence[int], values: np.ndarray):
        values = np.asarray(values, dtype=np.float64)
        layers, pos = [], 0
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            w = values[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out).copy()
            pos += fan_in * fan_out
            b = values[pos:pos + fan_out].copy()
            pos += fan_out
            layers.append((w, b))
        if pos != values.size:
            raise ShapeError(f"{values.size} values do not fit dims {list(dims)}")
        return cls(tuple(layers))

    def equal(self, other) -> bool:
        """Bit-level equality of every entry."""
        return self.dims == other.dims and self.flat().tobytes() == other.flat().tobytes()


class Gradients(ModelParams):
    """Parameter gradients; same layout as the ModelParams they came from."""


@dataclass(frozen=True)
class SgdConfig:
    initial_lr: float
    gamma: float = 0.975
    batch_size: int = 128
    epochs: int = 200
    seed: int = 0

    def __post_init__(self):
        if not self.initial_lr > 0:
            raise ValueError(f"initial_lr must be positive, got {self.initial_lr}")
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")


def init_params(seed: int, dims: Sequence[int]) -> ModelParams:
    """He-style init: weights ~ N(0, 2/fan_in), biases zero."""
    dims = [int(d) for d in dims]
    if len(dims) < 2:
        raise ValueError("dims needs an input width and at least one layer width")
    if any(d < 1 for d in dims):
        raise ValueError(f"all widths must be >= 1, got {dims}")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = rng.standard_normal((fan_in, fan_out)) * np.sqrt(2.0 / fan_in)
        layers.append((w, np.zeros(fan_out)))
    return ModelParams(tuple(layers))


def forward_with_cache(params: ModelParams, x) -> tuple[np.ndarray, list]:
    """Logits plus the (input, pre-activation) pairs backward needs."""
    a = as_tensor(x)
    if a.shape[1] != params.dims[0]:
        raise ShapeError(f"input has {a.shape[1]} features, model expects {params.dims[0]}")
    cache = []
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        z, out = K.dense_forward(a, w, b, i < last)
        cache.append((a, z))
        a = out
    return a, cache


def forward(params: ModelParams, x) -> np.ndarray:
    return forward_with_cache(params, x)[0]


def predict(params: ModelParams, x) -> np.ndarray:
    return np.argmax(forward(params, x), axis=1)


def accuracy(params: ModelParams, x, y) -> float:
    y = as_labels(y)
    if y.size == 0:
        return 0.0
    return float(np.mean(predict(params, x) == y))


def _check_labels(y: np.ndarray, rows: int, classes: int):
    if y.shape[0] != rows:
        raise ShapeError(f"{y.shape[0]} labels for {rows} rows of logits")
    if y.size and (y.min() < 0 or y.max() >= classes):
        raise ValueError(f"labels must lie in [0, {classes})")


def softmax_cross_entropy(logits, y) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    logits, y = as_tensor(logits), as_labels(y)
    _check_labels(y, logits.shape[0], logits.shape[1])
    return K.softmax_xent(logits, y)


def mse_logits(student, target) -> tuple[float, np.ndarray]:
    """Squared error averaged over batch and classes, with its gradient."""
    student, target = as_tensor(student), as_tensor(target)
    if student.shape != target.shape:
        raise ShapeError(f"shape mismatch {student.shape} vs {target.shape}")
    return K.masked_mse(student, target, np.ones(student.shape[0], dtype=np.bool_))


def backward(params: ModelParams, x, dlogits, cache=None) -> Gradients:
    """Backpropagate ``dlogits`` through the network.

    ``cache`` is the second value of ``forward_with_cache`` for the same
    ``(params, x)``; it is recomputed when omitted.
    """
    if cache is None:
        logits, cache = forward_with_cache(params, x)
        out_shape = logits.shape
    else:
        out_shape = (cache[-1][1].shape[0], params.n_classes)
    delta = as_tensor(dlogits)
    if delta.shape != out_shape:
        raise ShapeError(f"dlogits shape {delta.shape} != logits shape {out_shape}")
    grads = [None] * len(params.layers)
    for i in range(len(params.layers) - 1, -1, -1):
        a_in, z = cache[i]
        if i < len(params.layers) - 1:
            delta = K.relu_backward(delta, z)
        dw, db, delta = K.dense_backward(a_in, params.layers[i][0], delta)
        grads[i] = (dw, db)
    return Gradients(tuple(grads))


def sgd_step(params: ModelParams, grads: Gradients, lr: float) -> ModelParams:
    if not lr > 0:
        raise ValueError(f"lr must be positive, got {lr}")
    if params.dims != grads.dims:
        raise ShapeError(f"gradient dims {grads.dims} != parameter dims {params.dims}")
    layers = []
    for (w, b), (gw, gb) in zip(params.layers, grads.layers):
        if not (np.all(np.isfinite(gw)) and np.all(np.isfinite(gb))):
            raise NonFiniteError("non-finite gradient entries")
        layers.append((w - lr * gw, b - lr * gb))
    return ModelParams(tuple(layers))


def lr_at_epoch(config: SgdConfig, epoch: int) -> float:
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    return config.initial_lr * config.gamma ** epoch
