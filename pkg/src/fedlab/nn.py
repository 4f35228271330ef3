"""Dense ReLU networks in plain numpy.

A model is a stack of affine layers with ReLU after every layer except the
last. Everything before the last layer is the *encoder*; the last layer is the
*classifier*. Weight matrices are stored ``(fan_in, fan_out)`` so a layer is
``x @ W + b``. All arrays are float64 and read-only; every operation returns
new parameter objects.
"""

from __future__ import annotations

import hashlib
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from fedlab.errors import ConfigurationError, DimensionError, FormatError, NumericError

CHECKPOINT_MAGIC = b"FCK1"


def _frozen(a) -> np.ndarray:
    out = np.array(a, dtype=np.float64, copy=True)
    out.flags.writeable = False
    return out


def _check_chain(weights, biases):
    if len(weights) != len(biases):
        raise DimensionError(f"{len(weights)} weight matrices but {len(biases)} bias vectors")
    for i, (w, b) in enumerate(zip(weights, biases)):
        if w.ndim != 2 or b.ndim != 1 or w.shape[1] != b.shape[0]:
            raise DimensionError(f"layer {i}: weight {w.shape} incompatible with bias {b.shape}")
        if i and weights[i - 1].shape[1] != w.shape[0]:
            raise DimensionError(
                f"layer {i}: expects input width {w.shape[0]}, previous layer emits {weights[i - 1].shape[1]}"
            )


def relu(x):
    return np.maximum(x, 0.0)


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class Encoder:
    """All layers of a model but the last; ReLU after every layer.

    An encoder with no layers is the identity map on ``input_dim`` features.
    """

    weights: tuple
    biases: tuple
    input_dim: int

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(_frozen(w) for w in self.weights))
        object.__setattr__(self, "biases", tuple(_frozen(b) for b in self.biases))
        _check_chain(self.weights, self.biases)
        if self.weights and self.weights[0].shape[0] != self.input_dim:
            raise DimensionError(f"first layer width {self.weights[0].shape[0]} != input_dim {self.input_dim}")

    @property
    def output_dim(self) -> int:
        return self.weights[-1].shape[1] if self.weights else self.input_dim

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def forward(self, inputs) -> np.ndarray:
        h = np.asarray(inputs, dtype=np.float64)
        if h.ndim != 2 or h.shape[1] != self.input_dim:
            raise DimensionError(f"layer 0: input shape {h.shape} does not match input width {self.input_dim}")
        for w, b in zip(self.weights, self.biases):
            h = relu(h @ w + b)
        return h

    def fingerprint(self) -> str:
        return _fingerprint(self.weights, self.biases, self.input_dim)


@dataclass(frozen=True)
class GlobalEncoder:
    """Several encoders side by side; features are concatenated in member order."""

    members: tuple

    def __post_init__(self):
        members = tuple(self.members)
        if not members:
            raise DimensionError("a concatenated encoder needs at least one member")
        object.__setattr__(self, "members", members)

    @property
    def input_dim(self) -> int:
        return self.members[0].input_dim

    @property
    def output_dim(self) -> int:
        return sum(e.output_dim for e in self.members)

    @property
    def n_params(self) -> int:
        return sum(e.n_params for e in self.members)

    def forward(self, inputs) -> np.ndarray:
        return np.concatenate([e.forward(inputs) for e in self.members], axis=1)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for e in self.members:
            h.update(e.fingerprint().encode())
        return h.hexdigest()


@dataclass(frozen=True)
class ModelParams:
    weights: tuple
    biases: tuple

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(_frozen(w) for w in self.weights))
        object.__setattr__(self, "biases", tuple(_frozen(b) for b in self.biases))
        if not self.weights:
            raise DimensionError("a model needs at least one layer")
        _check_chain(self.weights, self.biases)

    @property
    def layer_dims(self) -> tuple:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    @property
    def encoder(self) -> Encoder:
        return Encoder(self.weights[:-1], self.biases[:-1], self.layer_dims[0])

    @property
    def classifier(self) -> "ModelParams":
        return ModelParams(self.weights[-1:], self.biases[-1:])

    @classmethod
    def combine(cls, encoder: Encoder, classifier: "ModelParams") -> "ModelParams":
        if classifier.n_layers != 1:
            raise DimensionError("classifier must be a single linear layer")
        if classifier.layer_dims[0] != encoder.output_dim:
            raise DimensionError(
                f"classifier expects {classifier.layer_dims[0]} features, encoder emits {encoder.output_dim}"
            )
        return cls(encoder.weights + classifier.weights, encoder.biases + classifier.biases)

    def arrays(self) -> list:
        """Parameters in checkpoint order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def fingerprint(self) -> str:
        return _fingerprint(self.weights, self.biases, self.layer_dims[0])

    def equals(self, other: "ModelParams") -> bool:
        """Bitwise equality of every parameter."""
        return self.layer_dims == other.layer_dims and all(
            a.tobytes() == b.tobytes() for a, b in zip(self.arrays(), other.arrays())
        )


def _fingerprint(weights, biases, input_dim) -> str:
    h = hashlib.sha256(struct.pack("<I", input_dim))
    for w, b in zip(weights, biases):
        h.update(struct.pack("<II", *w.shape))
        h.update(np.ascontiguousarray(w).tobytes())
        h.update(np.ascontiguousarray(b).tobytes())
    return h.hexdigest()


def init_model(layer_dims: Sequence[int], rng) -> ModelParams:
    """Glorot-uniform weights, zero biases.

    ``rng`` is a ``numpy.random.Generator`` or an integer seed.
    """
    dims = [int(d) for d in layer_dims]
    if len(dims) < 2 or min(dims) < 1:
        raise DimensionError(f"invalid layer_dims {layer_dims}")
    rng = np.random.default_rng(rng)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-a, a, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return ModelParams(tuple(weights), tuple(biases))


def zeros_like_model(model: ModelParams) -> ModelParams:
    return ModelParams(tuple(np.zeros_like(w) for w in model.weights), tuple(np.zeros_like(b) for b in model.biases))


def concat_encoders(encoders: Sequence[Encoder]) -> GlobalEncoder:
    encoders = tuple(encoders)
    if not encoders:
        raise ConfigurationError("need at least one encoder to concatenate")
    d = encoders[0].input_dim
    for i, e in enumerate(encoders):
        if e.input_dim != d:
            raise ConfigurationError(f"encoder {i} has input dim {e.input_dim}, expected {d}")
    return GlobalEncoder(encoders)


# -- forward / loss ---------------------------------------------------------


def forward(model: ModelParams, inputs):
    """Return ``(features, logits)`` where features enter the last layer."""
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.layer_dims[0]:
        raise DimensionError(f"layer 0: input shape {x.shape} does not match input width {model.layer_dims[0]}")
    h = x
    for w, b in zip(model.weights[:-1], model.biases[:-1]):
        h = relu(h @ w + b)
    return h, h @ model.weights[-1] + model.biases[-1]


def _check_labels(labels, m):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= m):
        bad = labels[(labels < 0) | (labels >= m)][0]
        raise IndexError(f"label {bad} out of range for {m} classes")
    return labels.astype(np.intp)


def loss_ce(logits, labels) -> float:
    """Mean softmax cross-entropy, computed with log-sum-exp."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = _check_labels(labels, logits.shape[1])
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    mx = logits.max(axis=1, keepdims=True)
    lse = mx[:, 0] + np.log(np.exp(logits - mx).sum(axis=1))
    per_row = lse - logits[np.arange(len(labels)), labels]
    return float(max(per_row.mean(), 0.0))


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.intp)
        if x.ndim != 2 or x.shape[0] < 1 or y.shape != (x.shape[0],):
            raise DimensionError(f"batch inputs {x.shape} and labels {y.shape} disagree")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)


def gradients(model: ModelParams, inputs, labels, freeze_encoder=False):
    """Loss and analytic gradients of mean cross-entropy.

    Returns ``(loss, grad_weights, grad_biases)``. With ``freeze_encoder`` the
    encoder entries are ``None`` and only the last layer is differentiated.
    """
    x = np.asarray(inputs, dtype=np.float64)
    labels = _check_labels(labels, model.layer_dims[-1])
    acts = [x]
    h = x
    for w, b in zip(model.weights[:-1], model.biases[:-1]):
        h = relu(h @ w + b)
        acts.append(h)
    logits = h @ model.weights[-1] + model.biases[-1]
    n = x.shape[0]
    p = softmax(logits)
    loss = loss_ce(logits, labels)
    delta = p
    delta[np.arange(n), labels] -= 1.0
    delta /= n

    L = model.n_layers
    gw = [None] * L
    gb = [None] * L
    for i in range(L - 1, -1, -1):
        gw[i] = acts[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i == 0 or freeze_encoder:
            break
        delta = (delta @ model.weights[i].T) * (acts[i] > 0)
    return loss, gw, gb


# -- optimizer ---------------------------------------------------------------


@dataclass(frozen=True)
class OptimizerState:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-5
    velocity: tuple = field(default=None, compare=False)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")

    def reset(self) -> "OptimizerState":
        return OptimizerState(self.learning_rate, self.momentum, self.weight_decay, None)

    def _velocity_for(self, model: ModelParams):
        shapes = [a.shape for a in model.arrays()]
        if self.velocity is not None and [v.shape for v in self.velocity] == shapes:
            return self.velocity
        return tuple(_frozen(np.zeros(s)) for s in shapes)


def sgd_step(
    model: ModelParams,
    opt: OptimizerState,
    batch: Batch,
    freeze_encoder: bool = False,
    prox_ref: ModelParams | None = None,
    prox_mu: float = 0.0,
):
    """One momentum-SGD step: ``v = momentum*v + g``, ``w -= lr*v``.

    ``g`` includes ``weight_decay*w`` and, when ``prox_ref`` is given,
    ``prox_mu*(w - w_ref)``. Frozen encoder parameters and their velocity
    buffers are returned as the very same objects.
    """
    _, gw, gb = gradients(model, batch.inputs, batch.labels, freeze_encoder=freeze_encoder)
    velocity = list(opt._velocity_for(model))
    params = model.arrays()
    ref = prox_ref.arrays() if prox_ref is not None else None
    grads = []
    for w_, b_ in zip(gw, gb):
        grads += [w_, b_]
    first = 2 * (model.n_layers - 1) if freeze_encoder else 0
    new_params = list(params)
    for j in range(first, len(params)):
        g = grads[j]
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in layer {j // 2} ({'weight' if j % 2 == 0 else 'bias'})")
        w = params[j]
        g = g + opt.weight_decay * w
        if ref is not None and prox_mu:
            g = g + prox_mu * (w - ref[j])
        v = opt.momentum * velocity[j] + g
        velocity[j] = _frozen(v)
        new_params[j] = w - opt.learning_rate * v
    new_model = ModelParams(tuple(new_params[0::2]), tuple(new_params[1::2]))
    if freeze_encoder:
        # keep the identical encoder array objects
        object.__setattr__(new_model, "weights", model.weights[:-1] + new_model.weights[-1:])
        object.__setattr__(new_model, "biases", model.biases[:-1] + new_model.biases[-1:])
    return new_model, OptimizerState(opt.learning_rate, opt.momentum, opt.weight_decay, tuple(velocity))


def gradient_check(model: ModelParams, batch: Batch, epsilon: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients."""
    if not 0 < epsilon <= 1e-2:
        raise ValueError("epsilon must lie in (0, 1e-2]")
    _, gw, gb = gradients(model, batch.inputs, batch.labels)
    analytic = []
    for w_, b_ in zip(gw, gb):
        analytic += [w_, b_]
    params = [np.array(a) for a in model.arrays()]

    def loss_at(ps):
        m = ModelParams(tuple(ps[0::2]), tuple(ps[1::2]))
        return loss_ce(forward(m, batch.inputs)[1], batch.labels)

    worst = 0.0
    for j, p in enumerate(params):
        flat = p.reshape(-1)
        an = analytic[j].reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + epsilon
            up = loss_at(params)
            flat[k] = orig - epsilon
            down = loss_at(params)
            flat[k] = orig
            num = (up - down) / (2 * epsilon)
            denom = max(abs(num), abs(an[k]), 1e-6)
            worst = max(worst, abs(num - an[k]) / denom)
    return worst


# -- evaluation --------------------------------------------------------------


def predict_logits(model, inputs) -> np.ndarray:
    """Logits for a ``ModelParams`` or an ``(encoder, classifier)`` pair."""
    if isinstance(model, ModelParams):
        return forward(model, inputs)[1]
    encoder, classifier = model
    return forward(classifier, encoder.forward(inputs))[1]


def accuracy_from_logits(logits, labels) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    # np.argmax returns the first maximum, so ties go to the lowest class index
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def evaluate(model, dataset) -> float:
    """Top-1 accuracy on anything with ``inputs`` and ``labels``."""
    if len(dataset.labels) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return accuracy_from_logits(predict_logits(model, dataset.inputs), dataset.labels)


# -- checkpoints -------------------------------------------------------------


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def checkpoint_bytes(weights, biases, input_dim=None) -> bytes:
    dims = [weights[0].shape[0] if weights else int(input_dim)] + [w.shape[1] for w in weights]
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(dims)), struct.pack(f"<{len(dims)}I", *dims)]
    for w, b in zip(weights, biases):
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return b"".join(parts)


def save_checkpoint(model, path):
    """Write a ``ModelParams`` or ``Encoder`` in the FCK1 layout."""
    input_dim = model.input_dim if isinstance(model, Encoder) else None
    atomic_write_bytes(path, checkpoint_bytes(model.weights, model.biases, input_dim))


def parse_checkpoint(data: bytes):
    """Return ``(layer_dims, weights, biases)`` from FCK1 bytes."""
    if len(data) < 8:
        raise FormatError("checkpoint too short for header", 0)
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}", 0)
    (n_dims,) = struct.unpack_from("<I", data, 4)
    if n_dims < 1 or len(data) < 8 + 4 * n_dims:
        raise FormatError("truncated layer_dims", 8)
    dims = struct.unpack_from(f"<{n_dims}I", data, 8)
    off = 8 + 4 * n_dims
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        need = 8 * (fan_in * fan_out + fan_out)
        if len(data) < off + need:
            raise FormatError("truncated parameter block", off)
        w = np.frombuffer(data, dtype="<f8", count=fan_in * fan_out, offset=off).reshape(fan_in, fan_out)
        off += 8 * fan_in * fan_out
        b = np.frombuffer(data, dtype="<f8", count=fan_out, offset=off)
        off += 8 * fan_out
        weights.append(w.astype(np.float64))
        biases.append(b.astype(np.float64))
    if off != len(data):
        raise FormatError("trailing bytes after last layer", off)
    return tuple(dims), weights, biases


def load_checkpoint(path) -> ModelParams:
    _, weights, biases = parse_checkpoint(Path(path).read_bytes())
    return ModelParams(tuple(weights), tuple(biases))


def load_encoder(path) -> Encoder:
    dims, weights, biases = parse_checkpoint(Path(path).read_bytes())
    return Encoder(tuple(weights), tuple(biases), dims[0])
