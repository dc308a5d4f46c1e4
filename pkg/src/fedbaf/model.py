"""Flat-parameter classifiers: schema, vector algebra, forward/backward, SGD."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Iterator, Sequence

import numpy as np

MASK_SENTINEL = -1e9
NORM_EPS = 1e-12


class ConfigError(ValueError):
    """Raised for dimension/schema mismatches and invalid model inputs."""


@dataclass(frozen=True)
class LayerSpec:
    name: str
    shape: tuple[int, ...]
    macs_per_sample: int = 0

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        if not self.shape or any(s < 1 for s in self.shape):
            raise ConfigError(f"layer {self.name!r}: invalid shape {self.shape}")
        if self.macs_per_sample < 0:
            raise ConfigError(f"layer {self.name!r}: negative MAC count")

    @property
    def size(self) -> int:
        return math.prod(self.shape)


def dense(name: str, fan_in: int, fan_out: int) -> LayerSpec:
    return LayerSpec(name, (fan_in, fan_out), fan_in * fan_out)


def bias(name: str, width: int) -> LayerSpec:
    return LayerSpec(name, (width,), 0)


@dataclass(frozen=True)
class ModelSchema:
    layers: tuple[LayerSpec, ...]
    num_classes: int
    input_dim: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate layer names in schema: {names}")
        if self.num_classes < 1 or self.input_dim < 1:
            raise ConfigError("num_classes and input_dim must be positive")

    @property
    def size(self) -> int:
        return sum(layer.size for layer in self.layers)

    @property
    def macs_per_sample(self) -> int:
        return sum(layer.macs_per_sample for layer in self.layers)

    @cached_property
    def kind(self) -> str:
        return "mlp" if any(l.name == "hidden.weight" for l in self.layers) else "linear"

    def offsets(self) -> dict[str, tuple[int, int]]:
        return self._offsets

    @cached_property
    def _offsets(self) -> dict[str, tuple[int, int]]:
        out, pos = {}, 0
        for layer in self.layers:
            out[layer.name] = (pos, pos + layer.size)
            pos += layer.size
        return out

    def layer(self, name: str) -> LayerSpec:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def compatible_layers(self, other: "ModelSchema") -> list[str]:
        """Names of layers present in both schemas with identical shape."""
        theirs = {l.name: l.shape for l in other.layers}
        return [l.name for l in self.layers if theirs.get(l.name) == l.shape]


def linear_schema(input_dim: int, num_classes: int) -> ModelSchema:
    return ModelSchema(
        (dense("out.weight", input_dim, num_classes), bias("out.bias", num_classes)),
        num_classes,
        input_dim,
    )


def mlp_schema(input_dim: int, hidden: int, num_classes: int) -> ModelSchema:
    return ModelSchema(
        (
            dense("hidden.weight", input_dim, hidden),
            bias("hidden.bias", hidden),
            dense("out.weight", hidden, num_classes),
            bias("out.bias", num_classes),
        ),
        num_classes,
        input_dim,
    )


@dataclass(frozen=True, eq=False)
class ParamVector:
    schema: ModelSchema
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if values.size != self.schema.size:
            raise ConfigError(
                f"expected {self.schema.size} parameters, got {values.size}"
            )
        if not np.all(np.isfinite(values)):
            raise FloatingPointError("non-finite parameter values")
        values = values.copy()
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    def layer(self, name: str) -> np.ndarray:
        lo, hi = self.schema.offsets()[name]
        return self.values[lo:hi].reshape(self.schema.layer(name).shape)

    def layers(self) -> Iterator[tuple[str, np.ndarray]]:
        for spec in self.schema.layers:
            yield spec.name, self.layer(spec.name)

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(self.schema, values)

    def copy(self) -> "ParamVector":
        return ParamVector(self.schema, self.values)

    def __len__(self) -> int:
        return self.values.size


def from_layers(schema: ModelSchema, layers: dict[str, np.ndarray]) -> ParamVector:
    parts = [np.asarray(layers[l.name], dtype=np.float64).reshape(-1) for l in schema.layers]
    return ParamVector(schema, np.concatenate(parts))


def zeros(schema: ModelSchema) -> ParamVector:
    return ParamVector(schema, np.zeros(schema.size))


def init_params(schema: ModelSchema, rng: np.random.Generator) -> ParamVector:
    """Glorot-uniform weights, zero biases."""
    layers = {}
    for spec in schema.layers:
        if len(spec.shape) == 2:
            fan_in, fan_out = spec.shape
            a = math.sqrt(6.0 / (fan_in + fan_out))
            layers[spec.name] = rng.uniform(-a, a, size=spec.shape)
        else:
            layers[spec.name] = np.zeros(spec.shape)
    return from_layers(schema, layers)


# -- vector algebra ---------------------------------------------------------


def _check(a: ParamVector, b: ParamVector) -> None:
    if a.schema != b.schema:
        raise ConfigError("schema mismatch between parameter vectors")


def add(a: ParamVector, b: ParamVector) -> ParamVector:
    _check(a, b)
    return ParamVector(a.schema, a.values + b.values)


def sub(a: ParamVector, b: ParamVector) -> ParamVector:
    _check(a, b)
    return ParamVector(a.schema, a.values - b.values)


def scale(a: ParamVector, c: float) -> ParamVector:
    return ParamVector(a.schema, a.values * c)


def norm2(a: ParamVector | np.ndarray) -> float:
    values = a.values if isinstance(a, ParamVector) else np.asarray(a)
    return float(np.linalg.norm(values))


def normalize(a: ParamVector, eps: float = NORM_EPS) -> ParamVector:
    n = norm2(a)
    if n < eps:
        return zeros(a.schema)
    return ParamVector(a.schema, a.values / n)


def weighted_mean(vectors: Sequence[ParamVector], weights: Sequence[float]) -> ParamVector:
    if not vectors:
        raise ConfigError("weighted_mean of an empty list")
    for v in vectors[1:]:
        _check(vectors[0], v)
    w = np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    stacked = np.stack([v.values for v in vectors])
    return ParamVector(vectors[0].schema, w @ stacked)


# -- masks ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ClassMask:
    present: np.ndarray

    def __post_init__(self):
        present = np.asarray(self.present, dtype=bool).reshape(-1).copy()
        if not present.any():
            raise ConfigError("class mask must keep at least one class")
        present.flags.writeable = False
        object.__setattr__(self, "present", present)

    @classmethod
    def of(cls, classes: Sequence[int], num_classes: int) -> "ClassMask":
        present = np.zeros(num_classes, dtype=bool)
        present[list(classes)] = True
        return cls(present)

    @classmethod
    def all(cls, num_classes: int) -> "ClassMask":
        return cls(np.ones(num_classes, dtype=bool))

    @property
    def classes(self) -> list[int]:
        return [int(c) for c in np.flatnonzero(self.present)]

    def __eq__(self, other) -> bool:
        return isinstance(other, ClassMask) and np.array_equal(self.present, other.present)

    def __hash__(self) -> int:
        return hash(self.present.tobytes())


# -- forward / backward -----------------------------------------------------


def _as_batch(model: ParamVector, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    batch = x.reshape(1, -1) if x.ndim == 1 else x
    if batch.ndim != 2 or batch.shape[1] != model.schema.input_dim:
        raise ConfigError(
            f"input dimension {batch.shape[-1]} != model input_dim {model.schema.input_dim}"
        )
    return batch


def _apply_mask(logits: np.ndarray, mask: ClassMask | None) -> np.ndarray:
    if mask is None:
        return logits
    if mask.present.size != logits.shape[1]:
        raise ConfigError("mask length does not match num_classes")
    logits[:, ~mask.present] = MASK_SENTINEL
    return logits


def _views(schema: ModelSchema, values: np.ndarray) -> dict[str, np.ndarray]:
    return {
        name: values[lo:hi].reshape(schema.layer(name).shape)
        for name, (lo, hi) in schema.offsets().items()
    }


def _forward(schema: ModelSchema, params: dict[str, np.ndarray], batch: np.ndarray):
    if schema.kind == "mlp":
        pre = batch @ params["hidden.weight"] + params["hidden.bias"]
        hidden = np.maximum(pre, 0.0)
    else:
        pre, hidden = None, batch
    logits = hidden @ params["out.weight"] + params["out.bias"]
    return pre, hidden, logits


def forward(model: ParamVector, x, mask: ClassMask | None = None) -> np.ndarray:
    """Logits for one sample (1-D ``x``) or a batch (2-D ``x``)."""
    batch = _as_batch(model, x)
    logits = _forward(model.schema, _views(model.schema, model.values), batch)[2]
    logits = _apply_mask(logits, mask)
    return logits[0] if np.asarray(x).ndim == 1 else logits


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_labels(schema: ModelSchema, y: np.ndarray, mask: ClassMask | None) -> None:
    if y.size == 0:
        raise ConfigError("batch must be nonempty")
    if y.min() < 0 or y.max() >= schema.num_classes:
        raise ConfigError("label out of range")
    if mask is not None and not mask.present[y].all():
        raise ConfigError("label belongs to a masked class")


def _loss_grad(
    schema: ModelSchema, values: np.ndarray, x: np.ndarray, y: np.ndarray, mask
) -> tuple[float, np.ndarray]:
    params = _views(schema, values)
    pre, hidden, logits = _forward(schema, params, x)
    logits = _apply_mask(logits, mask)
    n = y.size
    rows = np.arange(n)
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    total = e.sum(axis=1)
    loss = float(np.mean(np.log(total) - z[rows, y]))

    d_logits = e / total[:, None]
    d_logits[rows, y] -= 1.0
    d_logits /= n
    grads = {"out.weight": hidden.T @ d_logits, "out.bias": d_logits.sum(axis=0)}
    if pre is not None:
        d_hidden = (d_logits @ params["out.weight"].T) * (pre > 0)
        grads["hidden.weight"] = x.T @ d_hidden
        grads["hidden.bias"] = d_hidden.sum(axis=0)
    return loss, np.concatenate([grads[l.name].reshape(-1) for l in schema.layers])


def loss_and_grad(
    model: ParamVector, batch: tuple[np.ndarray, np.ndarray], mask: ClassMask | None = None
) -> tuple[float, ParamVector]:
    """Mean softmax cross-entropy over the batch and its gradient."""
    features, labels = batch
    x = _as_batch(model, features)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.size != x.shape[0]:
        raise ConfigError("one label per feature row required")
    _check_labels(model.schema, y, mask)
    loss, grad = _loss_grad(model.schema, model.values, x, y, mask)
    return loss, ParamVector(model.schema, grad)


def sgd_epoch(
    model: ParamVector,
    data,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
    mask: ClassMask | None = None,
    prox: tuple[float, ParamVector] | None = None,
) -> ParamVector:
    """One shuffled pass of mini-batch SGD; optional proximal pull (mu, anchor)."""
    if len(data.labels) == 0:
        raise ConfigError("client has an empty dataset")
    if lr < 0 or batch_size < 1:
        raise ConfigError("lr must be >= 0 and batch_size >= 1")
    schema = model.schema
    x_all = _as_batch(model, data.features)
    y_all = np.asarray(data.labels, dtype=np.int64)
    _check_labels(schema, y_all, mask)
    if prox is not None:
        _check(model, prox[1])
    order = rng.permutation(len(y_all))
    w = model.values.copy()
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        _, step = _loss_grad(schema, w, x_all[idx], y_all[idx], mask)
        if prox is not None:
            mu, anchor = prox
            step = step + mu * (w - anchor.values)
        w = w - lr * step
    return ParamVector(schema, w)


def evaluate(model: ParamVector, test, mask: ClassMask | None = None) -> float:
    """Top-1 accuracy; ties go to the lowest class index."""
    if len(test.labels) == 0:
        raise ConfigError("empty evaluation set")
    logits = forward(model, np.atleast_2d(test.features), mask)
    return float(np.mean(np.argmax(logits, axis=1) == test.labels))


def full_loss_and_grad(model: ParamVector, data) -> tuple[float, ParamVector]:
    """Loss/gradient over an entire dataset (no masking)."""
    return loss_and_grad(model, (data.features, data.labels))
