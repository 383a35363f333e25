import logging
from dataclasses import dataclass
from typing import NamedTuple, Protocol, runtime_checkable

import numpy as np

from src.errors import ConfigurationError, PolicyError, ProtocolError

logger = logging.getLogger('driftguard')

CE_EPSILON = 1e-12


class ParamId(NamedTuple):
    module_path: str
    tensor_name: str

    def __str__(self):
        return f'{self.module_path}.{self.tensor_name}'


@dataclass(frozen=True)
class TrainSettings:
    max_epochs: int = 20
    batch_size: int = 8
    learning_rate: float = 0.001
    patience: int = 5
    rounds: int = 5

    def __post_init__(self):
        for name in ('max_epochs', 'batch_size', 'patience', 'rounds'):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ConfigurationError(
                    f"train.{name} must be a positive integer, got {value!r}")
        if not isinstance(self.learning_rate, (int, float)) or not self.learning_rate > 0:
            raise ConfigurationError(
                f"train.learning_rate must be positive, got {self.learning_rate!r}")
        if self.patience > self.max_epochs:
            raise ConfigurationError(
                f"train.patience ({self.patience}) exceeds train.max_epochs ({self.max_epochs})")


@dataclass
class LabeledSet:
    """Feature rows with class labels and the domain each row was drawn from."""
    features: np.ndarray
    labels: np.ndarray
    domains: np.ndarray = None

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.domains is None:
            self.domains = np.full(len(self.labels), -1, dtype=np.int64)
        self.domains = np.asarray(self.domains, dtype=np.int64).reshape(-1)
        if len(self.labels) == 0:
            self.features = self.features.reshape(0, self.features.shape[-1])
        if not (len(self.features) == len(self.labels) == len(self.domains)):
            raise ConfigurationError(
                f"labeled set has {len(self.features)} rows, {len(self.labels)} labels "
                f"and {len(self.domains)} domain tags")

    def __len__(self):
        return len(self.labels)

    def concat(self, other):
        if other is None or len(other) == 0:
            return self
        return LabeledSet(np.concatenate([self.features, other.features]),
                          np.concatenate([self.labels, other.labels]),
                          np.concatenate([self.domains, other.domains]))

    def batches(self, batch_size):
        """Yield consecutive batches in stored order; the last one may be short."""
        for start in range(0, len(self), batch_size):
            stop = start + batch_size
            yield LabeledSet(self.features[start:stop], self.labels[start:stop],
                             self.domains[start:stop])


@runtime_checkable
class Trainable(Protocol):
    def predict(self, params, features) -> np.ndarray:
        ...

    def gradients(self, params, features, labels, mask) -> tuple:
        ...


def dense_forward(x, W, b):
    x = np.asarray(x, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if W.ndim != 2 or b.ndim != 1 or x.shape[-1] != W.shape[0] or W.shape[1] != b.shape[0]:
        raise ConfigurationError(
            f"dense layer shapes do not conform: x{x.shape} W{W.shape} b{b.shape}")
    return x @ W + b


def softmax(v, axis=-1):
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ConfigurationError("softmax needs at least one entry")
    shifted = v - np.max(v, axis=axis, keepdims=True)
    exp = np.exp(shifted)
    return exp / np.sum(exp, axis=axis, keepdims=True)


def softmax_backward(probs, d_probs):
    """Pull a gradient w.r.t. softmax outputs back to its logits (row-wise)."""
    return probs * (d_probs - np.sum(probs * d_probs, axis=-1, keepdims=True))


def cross_entropy(probs, label):
    p = float(np.asarray(probs, dtype=np.float64)[label])
    return float(-np.log(max(p, CE_EPSILON)))


def mean_cross_entropy(probs, labels):
    picked = probs[np.arange(len(labels)), labels]
    return float(np.mean(-np.log(np.maximum(picked, CE_EPSILON))))


def one_hot(labels, n_classes):
    out = np.zeros((len(labels), n_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def backward(model: Trainable, params, batch, mask):
    """Gradient of the mean batch loss for the masked parameters only."""
    if not mask:
        raise PolicyError("Nothing to train: the parameter mask is empty")
    unknown = set(mask) - params.keys()
    if unknown:
        raise PolicyError(
            f"Mask names parameters the model does not have: {sorted(map(str, unknown))[:3]}")
    _, grads = model.gradients(params, batch.features, batch.labels, mask)
    return {pid: grads[pid] for pid in sorted(mask)}


def sgd_step(params, grads, lr):
    unknown = grads.keys() - params.keys()
    if unknown:
        raise ProtocolError(
            f"Gradients for unknown parameters: {sorted(map(str, unknown))[:3]}")
    updated = dict(params)
    for pid, grad in grads.items():
        updated[pid] = params[pid] - lr * grad
    return updated


def accuracy(model: Trainable, params, data):
    probs = model.predict(params, data.features)
    return float(np.mean(np.argmax(probs, axis=1) == data.labels))


def train_local(model: Trainable, params, train_set, val_set, settings, mask):
    """
    Masked mini-batch SGD with early stopping on validation accuracy.

    Batches follow the stored order of train_set. Training stops once
    validation accuracy has not improved for settings.patience epochs and the
    snapshot with the best accuracy (earliest on ties) is returned together
    with the number of epochs run and that accuracy.
    """
    if len(train_set) == 0:
        raise ProtocolError("Local training needs a non-empty training set")
    if len(val_set) == 0:
        raise ProtocolError("Local training needs a non-empty validation set")
    mask = frozenset(mask)
    if not mask:
        raise PolicyError("Nothing to train: the parameter mask is empty")

    current = dict(params)
    best_params = current
    best_acc = -np.inf
    stale = 0
    epochs_run = 0
    for epoch in range(1, settings.max_epochs + 1):
        for batch in train_set.batches(settings.batch_size):
            grads = backward(model, current, batch, mask)
            current = sgd_step(current, grads, settings.learning_rate)
        epochs_run = epoch
        val_acc = accuracy(model, current, val_set)
        if val_acc > best_acc:
            best_acc, best_params, stale = val_acc, current, 0
        else:
            stale += 1
            if stale >= settings.patience:
                break
    logger.debug(f"Local training ran {epochs_run} epochs, best val accuracy {best_acc:.3f}")
    return best_params, epochs_run, float(best_acc)


class SoftmaxRegression:
    """A single dense layer with fused softmax cross-entropy."""
    WEIGHT = ParamId('linear', 'W')
    BIAS = ParamId('linear', 'b')

    def __init__(self, n_features, n_classes):
        self.n_features = n_features
        self.n_classes = n_classes

    def init_params(self, rng, scale=0.1):
        return {
            self.WEIGHT: rng.normal(0.0, scale, size=(self.n_features, self.n_classes)),
            self.BIAS: np.zeros(self.n_classes),
        }

    def predict(self, params, features):
        return softmax(dense_forward(features, params[self.WEIGHT], params[self.BIAS]))

    def gradients(self, params, features, labels, mask):
        features = np.atleast_2d(np.asarray(features, dtype=np.float64))
        probs = self.predict(params, features)
        loss = mean_cross_entropy(probs, labels)
        d_logits = (probs - one_hot(labels, self.n_classes)) / len(labels)
        grads = {}
        if self.WEIGHT in mask:
            grads[self.WEIGHT] = features.T @ d_logits
        if self.BIAS in mask:
            grads[self.BIAS] = d_logits.sum(axis=0)
        return loss, grads
