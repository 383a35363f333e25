import logging
from dataclasses import dataclass

import numpy as np

from src.errors import ProtocolError
from src.moe import forward

logger = logging.getLogger('driftguard')


@dataclass
class Observation:
    device_id: int
    avg_local_acc: float
    gating_matrix: np.ndarray

    def to_dict(self):
        return {
            'device_id': self.device_id,
            'acc': self.avg_local_acc,
            'matrix': [[float(v) for v in row] for row in self.gating_matrix],
        }


@dataclass
class DeviceState:
    device_id: int
    current_group: str
    step_data: object = None
    retained_val: object = None
    mixture: np.ndarray = None

    def receive(self, step_data, mixture):
        """Take in a new step's data, keeping the previous validation split for training."""
        self.retained_val = self.step_data.val if self.step_data is not None else None
        self.step_data = step_data
        self.mixture = mixture

    def training_set(self):
        return self.step_data.train.concat(self.retained_val)


def aggregate_gating(gate_vectors, probs):
    """
    Soft-label weighted mean gate activation per class.

    Row y is sum_x p(y|x) g(x) / sum_x p(y|x); classes with no weight fall
    back to the mean gate vector over all samples.
    """
    gate_vectors = np.atleast_2d(np.asarray(gate_vectors, dtype=np.float64))
    weights = np.atleast_2d(np.asarray(probs, dtype=np.float64)).T
    totals = weights.sum(axis=1)
    matrix = np.tile(gate_vectors.mean(axis=0), (weights.shape[0], 1))
    populated = totals > 0
    matrix[populated] = (weights[populated] @ gate_vectors) / totals[populated, None]
    return np.clip(matrix, 0.0, 1.0)


def local_inference(device, store, include_branch=True):
    val = device.step_data.val if device.step_data is not None else None
    if val is None or len(val) == 0:
        raise ProtocolError(f"Device {device.device_id} has no validation samples to observe")
    bundle, bank_key = store.resolve(device.current_group)
    probs, trace = forward(bundle, bank_key, val.features)
    acc = float(np.mean(np.argmax(probs, axis=1) == val.labels))
    matrix = aggregate_gating(trace.gate_vectors(include_branch), probs)
    return Observation(device.device_id, acc, matrix)


def validation_accuracy(device, store):
    bundle, bank_key = store.resolve(device.current_group)
    probs, _ = forward(bundle, bank_key, device.step_data.val.features)
    return float(np.mean(np.argmax(probs, axis=1) == device.step_data.val.labels))


def _map(executor, fn, items):
    if executor is None:
        return [fn(item) for item in items]
    return list(executor.map(fn, items))


def observe_fleet(devices, store, executor=None, include_branch=True):
    ordered = sorted(devices, key=lambda d: d.device_id)
    return _map(executor, lambda d: local_inference(d, store, include_branch), ordered)


def evaluate_fleet(devices, store, executor=None):
    ordered = sorted(devices, key=lambda d: d.device_id)
    return _map(executor, lambda d: validation_accuracy(d, store), ordered)
