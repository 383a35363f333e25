import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np

from src.errors import ConfigurationError, PolicyError, ProtocolError
from src.moe import ParamScope, ScopeKind

logger = logging.getLogger('driftguard')


class ConfigKind(Enum):
    BOOTSTRAP = 'bootstrap'
    GLOBAL = 'global'
    GROUP = 'group'
    BASELINE_FULL = 'baseline_full'
    BASELINE_PER_DEVICE = 'baseline_per_device'
    BASELINE_PFL = 'baseline_pfl'
    BASELINE_PFL_PER_DEVICE = 'baseline_pfl_per_device'
    BASELINE_CLUSTER = 'baseline_cluster'


@dataclass(frozen=True)
class RetrainConfig:
    trig: bool
    devices: frozenset
    scope: ParamScope
    kind: ConfigKind
    group_index: int = None

    def __post_init__(self):
        object.__setattr__(self, 'devices', frozenset(self.devices))
        if not self.trig and self.devices:
            raise PolicyError(f"Untriggered {self.kind.value} config names devices")
        if self.trig and not self.devices:
            raise PolicyError(f"Triggered {self.kind.value} config has no devices")
        if self.kind is ConfigKind.GROUP and (
                self.scope.kind is not ScopeKind.LOCAL_BANK_PLUS_BRANCH_GATE
                or self.scope.bank_key is None):
            raise PolicyError("Group configs must carry their group's bank in the scope")

    @property
    def label(self):
        if self.group_index is None:
            return self.kind.value
        return f'{self.kind.value}({self.group_index})'

    def to_dict(self):
        return {'kind': self.label, 'devices': sorted(self.devices), 'scope': str(self.scope)}


@dataclass(frozen=True)
class PolicyThresholds:
    tau_global: float = 0.55
    tau_group: float = 0.55
    tau_device: float = 0.55

    def __post_init__(self):
        for name in ('tau_global', 'tau_group', 'tau_device'):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, float)) \
                    or not 0 <= value <= 1:
                raise ConfigurationError(f"thresholds.{name} must lie in [0, 1], got {value!r}")


def _accs(observations):
    if not observations:
        raise ProtocolError("Policies need observations from at least one device")
    return {o.device_id: o.avg_local_acc for o in observations}


def _group_mean(accs, group):
    return float(np.mean([accs[d] for d in group]))


def driftguard_configs(observations, grouping, thresholds):
    """Global retraining of the shared branch and group retraining of local banks."""
    accs = _accs(observations)
    uncovered = set(accs) - {d for group in grouping.groups for d in group}
    if uncovered:
        raise ProtocolError(f"Devices {sorted(uncovered)} are not covered by the grouping")
    configs = []
    if float(np.mean(list(accs.values()))) < thresholds.tau_global:
        configs.append(RetrainConfig(True, accs.keys(), ParamScope.shared_plus_branch_gate(),
                                     ConfigKind.GLOBAL))
    for index, group in enumerate(grouping.groups):
        if _group_mean(accs, group) < thresholds.tau_group:
            bank = grouping.bank_assignment[index]
            configs.append(RetrainConfig(True, group, ParamScope.local_bank(bank),
                                         ConfigKind.GROUP, index))
    return configs


def fcl_avetrig(observations, thresholds):
    accs = _accs(observations)
    if float(np.mean(list(accs.values()))) < thresholds.tau_device:
        return [RetrainConfig(True, accs.keys(), ParamScope.full_model(),
                              ConfigKind.BASELINE_FULL)]
    return []


def fcl_perdevice(observations, thresholds):
    accs = _accs(observations)
    degraded = {d for d, acc in accs.items() if acc < thresholds.tau_device}
    if degraded:
        return [RetrainConfig(True, degraded, ParamScope.full_model(),
                              ConfigKind.BASELINE_PER_DEVICE)]
    return []


def pfl_avetrig(observations, thresholds):
    accs = _accs(observations)
    if float(np.mean(list(accs.values()))) < thresholds.tau_device:
        return [RetrainConfig(True, accs.keys(), ParamScope.per_device_local_plus_shared(),
                              ConfigKind.BASELINE_PFL)]
    return []


def pfl_perdevice(observations, thresholds):
    accs = _accs(observations)
    degraded = {d for d, acc in accs.items() if acc < thresholds.tau_device}
    if degraded:
        return [RetrainConfig(True, degraded, ParamScope.per_device_local_plus_shared(),
                              ConfigKind.BASELINE_PFL_PER_DEVICE)]
    return []


def cluster_based(observations, grouping, thresholds):
    accs = _accs(observations)
    configs = []
    for index, group in enumerate(grouping.groups):
        if _group_mean(accs, group) < thresholds.tau_device:
            configs.append(RetrainConfig(
                True, group, ParamScope.full_model(grouping.bank_assignment.get(index)),
                ConfigKind.BASELINE_CLUSTER, index))
    return configs


class Layout(Enum):
    SHARED = 'shared'
    GROUP_BANKS = 'group_banks'
    DEVICE_BANKS = 'device_banks'
    GROUP_REPLICAS = 'group_replicas'


@dataclass(frozen=True)
class Policy:
    name: str
    layout: Layout
    generate: object

    @property
    def clusters(self):
        return self.layout in (Layout.GROUP_BANKS, Layout.GROUP_REPLICAS)

    def configs(self, observations, grouping, thresholds):
        if self.clusters:
            return self.generate(observations, grouping, thresholds)
        return self.generate(observations, thresholds)


POLICIES = {
    'driftguard': Policy('driftguard', Layout.GROUP_BANKS, driftguard_configs),
    'fcl_avetrig': Policy('fcl_avetrig', Layout.SHARED, fcl_avetrig),
    'fcl_perdevice': Policy('fcl_perdevice', Layout.SHARED, fcl_perdevice),
    'pfl_avetrig': Policy('pfl_avetrig', Layout.DEVICE_BANKS, pfl_avetrig),
    'pfl_perdevice': Policy('pfl_perdevice', Layout.DEVICE_BANKS, pfl_perdevice),
    'cluster_based': Policy('cluster_based', Layout.GROUP_REPLICAS, cluster_based),
}


def get_policy(name):
    try:
        return POLICIES[name]
    except KeyError:
        raise ConfigurationError(
            f"Unknown policy '{name}', expected one of {', '.join(POLICIES)}") from None
