import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from src.errors import ProtocolError

logger = logging.getLogger('driftguard')

SMOOTHING_SIGMA = 1.5


def dense_flops(n_in, n_out):
    return 2 * n_in * n_out + n_out


def kappa(trainable, profile, n_train_samples, epochs_run):
    """
    FLOPs of one local training pass on one device.

    Forward work covers every evaluated layer, backward work is twice the
    forward work of the layers owning a trainable parameter.
    """
    if epochs_run < 1:
        raise ProtocolError(f"kappa needs at least one epoch, got {epochs_run}")
    trainable = frozenset(trainable)
    forward = 0
    trainable_path = 0
    for layer in profile:
        flops = layer.multiplicity * dense_flops(layer.n_in, layer.n_out)
        forward += flops
        if layer.param_ids & trainable:
            trainable_path += flops
    return float(epochs_run * n_train_samples * (forward + 2 * trainable_path))


def event_cost(config, per_round_kappas, rounds):
    """Sum of kappa over rounds and participating devices; zero when not triggered."""
    if not config.trig:
        return 0.0
    if not config.devices:
        raise ProtocolError(f"{config.label} event has no participating devices")
    if len(per_round_kappas) != rounds:
        raise ProtocolError(f"Expected kappas for {rounds} rounds, got {len(per_round_kappas)}")
    total = 0.0
    for round_kappas in per_round_kappas:
        outside = set(round_kappas) - config.devices
        if outside:
            raise ProtocolError(f"Devices {sorted(outside)} reported cost outside {config.label}")
        missing = config.devices - set(round_kappas)
        if missing:
            raise ProtocolError(f"Devices {sorted(missing)} of {config.label} reported no cost")
        total += sum(round_kappas[d] for d in sorted(round_kappas))
    return total


@dataclass
class CostEvent:
    step: int
    kind: str
    kappas: list
    cost: float

    def to_dict(self):
        return {'step': self.step, 'kind': self.kind, 'cost': self.cost,
                'kappas': [{str(d): k for d, k in sorted(r.items())} for r in self.kappas]}


@dataclass
class CostLedger:
    events: list = field(default_factory=list)
    cumulative: float = 0.0

    def record(self, step, config, per_round_kappas, rounds):
        cost = event_cost(config, per_round_kappas, rounds)
        event = CostEvent(step, config.label, per_round_kappas, cost)
        self.events.append(event)
        self.cumulative += cost
        return event

    def step_cost(self, step):
        return sum(e.cost for e in self.events if e.step == step)

    def cumulative_curve(self, n_steps):
        curve, running = [], 0.0
        for step in range(1, n_steps + 1):
            running += self.step_cost(step)
            curve.append(running)
        return curve

    def counts_by_kind(self):
        return dict(sorted(Counter(e.kind.split('(')[0] for e in self.events).items()))

    def audit(self):
        return math.isclose(self.cumulative, sum(e.cost for e in self.events), rel_tol=1e-12)


def cost_normalizer(profile, all_params, n_devices, n_steps, rounds, n_train_samples,
                    max_epochs):
    """FLOPs of a full-model retraining on every device at every step at max epochs."""
    per_device = kappa(all_params, profile, n_train_samples, max_epochs)
    return float(n_devices * n_steps * rounds * per_device)


def step_accuracy(accs):
    if len(accs) == 0:
        raise ProtocolError("Step accuracy needs at least one device")
    return float(np.mean(accs))


def mean_accuracy(per_step_acc):
    if len(per_step_acc) == 0:
        raise ProtocolError("Mean accuracy needs at least one step")
    return float(np.mean(per_step_acc))


def efficiency(mean_acc, total_cost):
    if total_cost < 0:
        raise ProtocolError(f"Total cost cannot be negative, got {total_cost}")
    if total_cost == 0:
        logger.warning("Total retraining cost is zero, reporting infinite efficiency")
        return math.inf
    return mean_acc / total_cost


def reference_threshold(per_step_by_method):
    lengths = {len(series) for series in per_step_by_method.values()}
    if len(lengths) != 1:
        raise ProtocolError(f"Methods do not share a step grid: lengths {sorted(lengths)}")
    pooled = np.concatenate([np.asarray(s, dtype=np.float64) for s in per_step_by_method.values()])
    return float(np.median(pooled))


def above_reference_count(per_step_by_method):
    reference = reference_threshold(per_step_by_method)
    return {method: int(np.sum(np.asarray(series) > reference))
            for method, series in per_step_by_method.items()}


def smooth_curve(series, sigma=SMOOTHING_SIGMA):
    """Gaussian smoothing truncated at 4 sigma, renormalised over in-range taps."""
    series = np.asarray(series, dtype=np.float64)
    if len(series) == 0:
        raise ProtocolError("Cannot smooth an empty series")
    if sigma <= 0:
        return series.copy()
    radius = int(math.floor(4 * sigma))
    offsets = np.arange(-radius, radius + 1)
    kernel = np.exp(-0.5 * (offsets / sigma) ** 2)
    out = np.empty_like(series)
    for i in range(len(series)):
        idx = i + offsets
        inside = (idx >= 0) & (idx < len(series))
        weights = kernel[inside]
        out[i] = np.dot(weights, series[idx[inside]]) / weights.sum()
    return out


def format_cell(eff, mean_acc, total_cost):
    return f"{eff:.2f} ({mean_acc:.2f} / {total_cost:.2f})"


@dataclass
class MetricsReport:
    policy: str
    seed: int
    per_step_acc: list
    per_step_acc_pre: list
    mean_acc: float
    total_cost: float
    total_cost_normalized: float
    normalizer: float
    efficiency: float
    event_counts: dict
    cumulative_cost: list
    above_reference_count: int = None

    def to_dict(self):
        data = asdict(self)
        if math.isinf(self.efficiency):
            data['efficiency'] = 'inf'
        return data

    @classmethod
    def from_dict(cls, data):
        data = {k: v for k, v in data.items() if k in cls.__dataclass_fields__}
        if data.get('efficiency') == 'inf':
            data['efficiency'] = math.inf
        return cls(**data)

    @property
    def cell(self):
        return format_cell(self.efficiency, self.mean_acc, self.total_cost_normalized)


def build_report(policy, seed, per_step_acc, per_step_acc_pre, ledger, normalizer, n_steps):
    if not ledger.audit():
        raise ProtocolError("Cost ledger total does not match its events")
    mean_acc = mean_accuracy(per_step_acc)
    normalized = ledger.cumulative / normalizer if normalizer else 0.0
    return MetricsReport(
        policy=policy,
        seed=seed,
        per_step_acc=list(per_step_acc),
        per_step_acc_pre=list(per_step_acc_pre),
        mean_acc=mean_acc,
        total_cost=ledger.cumulative,
        total_cost_normalized=normalized,
        normalizer=normalizer,
        efficiency=efficiency(mean_acc, normalized),
        event_counts=ledger.counts_by_kind(),
        cumulative_cost=ledger.cumulative_curve(n_steps),
    )
