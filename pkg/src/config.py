import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace

from src.clustering import ClusterSettings
from src.errors import ConfigurationError
from src.learner import TrainSettings
from src.moe import MoESpec
from src.policy import POLICIES, PolicyThresholds
from src.world import WorldSettings, build_domains, load_external

logger = logging.getLogger('driftguard')

SECTIONS = {
    'world': WorldSettings,
    'model': MoESpec,
    'train': TrainSettings,
    'thresholds': PolicyThresholds,
    'clustering': ClusterSettings,
}


def _coerce(value, default, name):
    """Match a JSON value to the type of a dataclass default."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f"{name} must be a boolean, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigurationError(f"{name} must be a list, got {value!r}")
        return tuple(_coerce(v, default[0], f"{name}[{i}]") if default else v
                     for i, v in enumerate(value))
    if isinstance(value, bool):
        raise ConfigurationError(f"{name} must be a number, got {value!r}")
    if isinstance(default, float):
        if not isinstance(value, (int, float)):
            raise ConfigurationError(f"{name} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, int) and not isinstance(value, int):
        raise ConfigurationError(f"{name} must be an integer, got {value!r}")
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigurationError(f"{name} must be a string, got {value!r}")
    if default is None and value is not None and not isinstance(value, str):
        raise ConfigurationError(f"{name} must be a string or null, got {value!r}")
    return value


def build_section(cls, data, prefix):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigurationError(f"{prefix} must be an object, got {data!r}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigurationError(f"Unknown field '{prefix}.{unknown[0]}'")
    defaults = cls()
    values = {key: _coerce(value, getattr(defaults, key), f"{prefix}.{key}")
              for key, value in data.items()}
    return cls(**values)


@dataclass(frozen=True)
class ExperimentConfig:
    """
    A validated experiment description.

    JSON schema: optional objects `world`, `model`, `train`, `thresholds` and
    `clustering` whose keys are the fields of the matching settings class,
    plus `policies` (names from the policy registry), `seeds` (non-negative
    integers), `output_dir` and `include_branch_gate`.
    """
    world: WorldSettings = field(default_factory=WorldSettings)
    model: MoESpec = field(default_factory=MoESpec)
    train: TrainSettings = field(default_factory=TrainSettings)
    thresholds: PolicyThresholds = field(default_factory=PolicyThresholds)
    clustering: ClusterSettings = field(default_factory=ClusterSettings)
    policies: tuple = tuple(POLICIES)
    seeds: tuple = (0,)
    output_dir: str = 'results'
    include_branch_gate: bool = True

    def __post_init__(self):
        if not self.policies:
            raise ConfigurationError("policies must name at least one policy")
        for index, name in enumerate(self.policies):
            if name not in POLICIES:
                raise ConfigurationError(
                    f"policies[{index}]: unknown policy '{name}', expected one of "
                    f"{', '.join(POLICIES)}")
        if len(set(self.policies)) != len(self.policies):
            raise ConfigurationError(f"policies lists a policy twice: {list(self.policies)}")
        if not self.seeds:
            raise ConfigurationError("seeds must list at least one seed")
        for index, seed in enumerate(self.seeds):
            if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
                raise ConfigurationError(
                    f"seeds[{index}] must be a non-negative integer, got {seed!r}")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigurationError(f"seeds lists a seed twice: {list(self.seeds)}")

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise ConfigurationError("The experiment config must be a JSON object")
        top_level = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - top_level)
        if unknown:
            raise ConfigurationError(f"Unknown field '{unknown[0]}'")
        values = {name: build_section(section, data.get(name), name)
                  for name, section in SECTIONS.items()}
        defaults = cls()
        for name in ('policies', 'seeds', 'output_dir', 'include_branch_gate'):
            if name in data:
                values[name] = _coerce(data[name], getattr(defaults, name), name)
        return cls(**values)

    def to_dict(self):
        data = asdict(self)
        return json.loads(json.dumps(data))

    def digest(self):
        """SHA-256 of the canonical JSON form; the output directory does not count."""
        data = self.to_dict()
        del data['output_dir']
        canonical = json.dumps(data, sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()

    def with_overrides(self, seeds=None, output_dir=None):
        config = self
        if seeds is not None:
            config = replace(config, seeds=tuple(seeds))
        if output_dir is not None:
            config = replace(config, output_dir=output_dir)
        return config

    def sources(self, seed):
        """Domain samplers for a seed: the synthetic world or the external file's pools."""
        if self.world.data_path is None:
            return build_domains(self.world, self.model.n_features, self.model.n_classes, seed)
        pools = load_external(self.world.data_path)
        if pools[0].n_features != self.model.n_features:
            raise ConfigurationError(
                f"model.n_features ({self.model.n_features}) does not match the "
                f"{pools[0].n_features} features in '{self.world.data_path}'")
        n_classes = max(int(pool.labels.max()) for pool in pools) + 1
        if n_classes > self.model.n_classes:
            raise ConfigurationError(
                f"model.n_classes ({self.model.n_classes}) is smaller than the "
                f"{n_classes} classes in '{self.world.data_path}'")
        return pools


def load_config(path):
    try:
        with open(path, encoding='utf-8') as fh:
            data = json.load(fh)
    except OSError as e:
        raise ConfigurationError(f"Cannot read config '{path}': {e.strerror}") from e
    except json.JSONDecodeError as e:
        raise ConfigurationError(
            f"Config '{path}' is not valid JSON: {e.msg} (line {e.lineno})") from e
    config = ExperimentConfig.from_dict(data)
    logger.debug(f"Loaded config '{path}' with hash {config.digest()}")
    return config
