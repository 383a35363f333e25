import hashlib
import logging
import math
import re
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from src.errors import ConfigurationError, LoadError
from src.learner import LabeledSet
from src.seeding import substream

logger = logging.getLogger('driftguard')

HEADER_PATTERN = re.compile(
    r'^#\s*features\s*=\s*(\d+)\s+domains\s*=\s*(\d+)\s+classes\s*=\s*(\d+)\s*$')
INITIAL_DOMAIN_MODES = ('round_robin', 'random')


@dataclass(frozen=True)
class WorldSettings:
    n_devices: int = 20
    n_steps: int = 30
    n_domains: int = 3
    drift_rate: tuple = (0.10, 0.15)
    incremental_lengths: tuple = (2, 3, 4)
    incremental_probability: float = 0.5
    train_count: int = 20
    val_count: int = 10
    initial_domains: str = 'round_robin'
    class_separation: float = 3.0
    noise_scale: float = 1.0
    rotation_strength: float = 1.0
    domain_shift: float = 2.0
    data_path: str = None

    def __post_init__(self):
        for name in ('n_devices', 'n_steps', 'train_count', 'val_count'):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ConfigurationError(f"world.{name} must be a positive integer, got {value!r}")
        if self.data_path is None and (not isinstance(self.n_domains, int) or self.n_domains < 2):
            raise ConfigurationError(f"world.n_domains must be at least 2, got {self.n_domains!r}")
        if len(self.drift_rate) != 2:
            raise ConfigurationError(
                f"world.drift_rate must be a [low, high] pair, got {list(self.drift_rate)}")
        low, high = self.drift_rate
        if not 0 <= low <= high <= 1:
            raise ConfigurationError(
                f"world.drift_rate must satisfy 0 <= low <= high <= 1, got {list(self.drift_rate)}")
        if not self.incremental_lengths or min(self.incremental_lengths) < 1:
            raise ConfigurationError(
                f"world.incremental_lengths must be positive, got {list(self.incremental_lengths)}")
        if not 0 <= self.incremental_probability <= 1:
            raise ConfigurationError(
                f"world.incremental_probability must lie in [0, 1], got "
                f"{self.incremental_probability!r}")
        if self.initial_domains not in INITIAL_DOMAIN_MODES:
            raise ConfigurationError(
                f"world.initial_domains must be one of {', '.join(INITIAL_DOMAIN_MODES)}, "
                f"got {self.initial_domains!r}")

    @property
    def incremental_cap(self):
        return max(1, math.ceil(round(0.15 * self.n_steps, 9)))

    def allowed_lengths(self):
        allowed = sorted(length for length in set(self.incremental_lengths)
                         if length <= self.incremental_cap)
        return allowed or [self.incremental_cap]


@dataclass
class DomainSpec:
    """Class-conditional Gaussians pushed through a per-domain rotation and shift."""
    domain_id: int
    class_means: np.ndarray
    noise_scale: float
    rotation: np.ndarray
    shift: np.ndarray

    @property
    def n_classes(self):
        return len(self.class_means)

    @property
    def n_features(self):
        return self.class_means.shape[1]

    def sample(self, labels, rng):
        labels = np.asarray(labels, dtype=np.int64)
        z = self.class_means[labels] + self.noise_scale * rng.standard_normal(
            (len(labels), self.class_means.shape[1]))
        return z @ self.rotation.T + self.shift

    def draw(self, n, rng):
        labels = rng.integers(self.n_classes, size=n)
        return self.sample(labels, rng), labels

    def reset(self):
        pass


@dataclass
class SamplePool:
    """Labeled vectors of one domain, drawn without replacement and reshuffled when spent."""
    domain_id: int
    features: np.ndarray
    labels: np.ndarray
    order: np.ndarray = None
    cursor: int = 0

    def __len__(self):
        return len(self.labels)

    @property
    def n_features(self):
        return self.features.shape[1]

    def reset(self):
        self.order = None
        self.cursor = 0

    def draw(self, n, rng):
        picked = []
        while len(picked) < n:
            if self.order is None or self.cursor >= len(self.order):
                self.order = rng.permutation(len(self))
                self.cursor = 0
            take = min(n - len(picked), len(self.order) - self.cursor)
            picked.extend(self.order[self.cursor:self.cursor + take])
            self.cursor += take
        picked = np.asarray(picked, dtype=np.int64)
        return self.features[picked], self.labels[picked]


def _random_rotation(rng, dim, strength):
    # Cayley transform of a scaled skew-symmetric matrix is orthogonal
    a = rng.standard_normal((dim, dim))
    skew = strength * (a - a.T) / (2.0 * np.sqrt(dim))
    eye = np.eye(dim)
    return np.linalg.solve(eye - skew, eye + skew)


def build_domains(settings, n_features, n_classes, seed):
    rng = substream(seed, 'domains')
    means = settings.class_separation * rng.standard_normal((n_classes, n_features)) \
        / np.sqrt(n_features)
    domains = []
    for domain_id in range(settings.n_domains):
        rotation = _random_rotation(rng, n_features, settings.rotation_strength)
        shift = settings.domain_shift * rng.standard_normal(n_features) / np.sqrt(n_features)
        domains.append(DomainSpec(domain_id, means, settings.noise_scale, rotation, shift))
    return domains


def load_external(path):
    """
    Read a labeled-vector file into one sample pool per domain.

    The first line is a header `#features=n domains=m classes=c`, every other
    non-blank line is `domain_id,class_id,f1,...,fn`.
    """
    try:
        with open(path, encoding='utf-8') as fh:
            lines = fh.read().splitlines()
    except OSError as e:
        raise LoadError(f"Cannot read labeled-vector file '{path}': {e.strerror}") from e
    if not any(line.strip() for line in lines):
        raise LoadError(f"Labeled-vector file '{path}' is empty")

    header = HEADER_PATTERN.match(lines[0].strip())
    if header is None:
        raise LoadError(f"expected header '#features=n domains=m classes=c', got {lines[0]!r}",
                        path, 1)
    n_features, n_domains, n_classes = (int(v) for v in header.groups())
    if n_domains < 2:
        raise LoadError(f"drift needs at least 2 domains, header declares {n_domains}", path, 1)

    rows = {domain: ([], []) for domain in range(n_domains)}
    for number, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = [cell.strip() for cell in line.split(',')]
        if len(cells) != n_features + 2:
            raise LoadError(f"expected {n_features + 2} columns, got {len(cells)}", path, number)
        try:
            domain, label = int(cells[0]), int(cells[1])
        except ValueError:
            raise LoadError(f"domain and class ids must be integers, got {cells[:2]}",
                            path, number) from None
        if domain not in rows:
            raise LoadError(f"unknown domain id {domain} (file declares {n_domains})",
                            path, number)
        if not 0 <= label < n_classes:
            raise LoadError(f"unknown class id {label} (file declares {n_classes})", path, number)
        try:
            features = [float(cell) for cell in cells[2:]]
        except ValueError:
            raise LoadError("non-numeric feature value", path, number) from None
        if not all(math.isfinite(v) for v in features):
            raise LoadError("feature values must be finite", path, number)
        rows[domain][0].append(features)
        rows[domain][1].append(label)

    pools = []
    for domain, (features, labels) in rows.items():
        if not labels:
            raise LoadError(f"Domain {domain} has no samples in '{path}'")
        pools.append(SamplePool(domain, np.asarray(features, dtype=np.float64),
                                np.asarray(labels, dtype=np.int64)))
    logger.info(f"Loaded {sum(len(p) for p in pools)} samples in {len(pools)} domains "
                f"from '{path}'")
    return pools


class DriftPattern(Enum):
    INSTANTANEOUS = 'instantaneous'
    INCREMENTAL = 'incremental'


@dataclass(frozen=True)
class DriftEvent:
    device: int
    start_step: int
    pattern: DriftPattern
    target_domain: int
    length: int = 1

    def to_dict(self):
        return {'device': self.device, 'start_step': self.start_step,
                'pattern': self.pattern.value, 'target_domain': self.target_domain,
                'length': self.length}


@dataclass
class ActiveDrift:
    event: DriftEvent
    base: np.ndarray = None
    progress: int = 0


@dataclass
class DeviceDistribution:
    mixture: np.ndarray
    pending: list = field(default_factory=list)

    @classmethod
    def pure(cls, domain, n_domains):
        mixture = np.zeros(n_domains)
        mixture[domain] = 1.0
        return cls(mixture)

    def dominant_domain(self):
        return int(np.argmax(self.mixture))

    def enqueue(self, event):
        self.pending.append(ActiveDrift(event))
        self.pending.sort(key=lambda active: active.event.start_step)


@dataclass
class StepData:
    train: LabeledSet
    val: LabeledSet


def schedule_events(step, n_devices, rng, settings, dominant_domains, n_domains):
    """Pick the devices that start a new drift at this step and how they drift."""
    if step < 2:
        return []
    low, high = settings.drift_rate
    if high == 0:
        return []
    lo = math.ceil(round(low * n_devices, 9))
    hi = math.floor(round(high * n_devices, 9))
    if hi < lo:
        logger.debug(f"Drift band {low}-{high} of {n_devices} devices is empty, using {lo}")
        hi = lo
    hi = min(hi, n_devices)
    lo = min(lo, hi)
    n_drift = int(rng.integers(lo, hi + 1))
    devices = np.sort(rng.choice(n_devices, size=n_drift, replace=False))

    lengths = settings.allowed_lengths()
    events = []
    for device in devices:
        device = int(device)
        if rng.random() < settings.incremental_probability:
            pattern = DriftPattern.INCREMENTAL
            length = int(lengths[rng.integers(len(lengths))])
        else:
            pattern = DriftPattern.INSTANTANEOUS
            length = 1
        targets = [d for d in range(n_domains) if d != dominant_domains[device]]
        target = targets[int(rng.integers(len(targets)))]
        events.append(DriftEvent(device, step, pattern, target, length))
    return events


def update_distribution(dist, step):
    """
    Apply every due drift event to the mixture in trigger order.

    An incremental event of length L at progress i blends its frozen base
    mixture with the target as (1 - i/L) * base + (i/L) * target. An event
    starting at this step takes the mixture reached so far as its base and
    closes any earlier event still in progress.
    """
    mixture = dist.mixture
    remaining = []
    for active in dist.pending:
        event = active.event
        if event.start_step > step:
            remaining.append(active)
            continue
        if active.base is None:
            active.base = mixture.copy()
            remaining = [r for r in remaining if r.event.start_step > step]
        target = np.zeros_like(mixture)
        target[event.target_domain] = 1.0
        if event.pattern is DriftPattern.INSTANTANEOUS:
            mixture = target
            continue
        active.progress += 1
        if active.progress >= event.length:
            mixture = target
            continue
        fraction = active.progress / event.length
        mixture = (1.0 - fraction) * active.base + fraction * target
        remaining.append(active)
    dist.mixture = mixture
    dist.pending = remaining
    return dist


def sample_step(dist, sources, counts, rng):
    n_train, n_val = counts
    total = n_train + n_val
    weights = dist.mixture / dist.mixture.sum()
    domains = rng.choice(len(sources), size=total, p=weights)
    features = np.empty((total, sources[0].n_features))
    labels = np.empty(total, dtype=np.int64)
    for domain in np.unique(domains):
        idx = np.flatnonzero(domains == domain)
        features[idx], labels[idx] = sources[int(domain)].draw(len(idx), rng)
    return StepData(LabeledSet(features[:n_train], labels[:n_train], domains[:n_train]),
                    LabeledSet(features[n_train:], labels[n_train:], domains[n_train:]))


def initial_distributions(settings, n_domains, seed):
    if settings.initial_domains == 'round_robin':
        starts = [device % n_domains for device in range(settings.n_devices)]
    else:
        rng = substream(seed, 'initial_domains')
        starts = rng.integers(n_domains, size=settings.n_devices).tolist()
    return [DeviceDistribution.pure(int(domain), n_domains) for domain in starts]


@dataclass
class TraceStep:
    step: int
    events: list
    mixtures: list
    data: list


@dataclass
class DriftTrace:
    """The full world evolution for one seed: events, mixtures and data per step."""
    seed: int
    settings: WorldSettings
    n_domains: int
    steps: list

    def digest(self):
        sha = hashlib.sha256()
        for entry in self.steps:
            sha.update(str(entry.step).encode())
            for event in entry.events:
                sha.update(repr(sorted(event.to_dict().items())).encode())
            for mixture, data in zip(entry.mixtures, entry.data):
                for array in (mixture, data.train.features, data.train.labels,
                              data.val.features, data.val.labels):
                    sha.update(np.ascontiguousarray(array).tobytes())
        return sha.hexdigest()

    def records(self):
        for entry in self.steps:
            for device, (mixture, data) in enumerate(zip(entry.mixtures, entry.data)):
                domain_counts = np.bincount(
                    np.concatenate([data.train.domains, data.val.domains]),
                    minlength=self.n_domains)
                yield {
                    'step': entry.step,
                    'device': device,
                    'mixture': [round(float(w), 12) for w in mixture],
                    'events': [e.to_dict() for e in entry.events if e.device == device],
                    'domain_counts': domain_counts.tolist(),
                }


def generate_trace(settings, sources, seed):
    """World evolution as a pure function of (settings, sources, seed)."""
    n_domains = len(sources)
    for source in sources:
        source.reset()
    dists = initial_distributions(settings, n_domains, seed)
    steps = []
    for step in range(1, settings.n_steps + 1):
        events = schedule_events(step, settings.n_devices, substream(seed, 'schedule', step),
                                 settings, [d.dominant_domain() for d in dists], n_domains)
        for event in events:
            dists[event.device].enqueue(event)
        mixtures, data = [], []
        for device, dist in enumerate(dists):
            update_distribution(dist, step)
            mixtures.append(dist.mixture.copy())
            data.append(sample_step(dist, sources, (settings.train_count, settings.val_count),
                                    substream(seed, 'sample', device, step)))
        if events:
            logger.debug(f"Step {step}: drift on devices {[e.device for e in events]}")
        steps.append(TraceStep(step, events, mixtures, data))
    return DriftTrace(seed, settings, n_domains, steps)
