import hashlib
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from src.clustering import assign_banks, cluster_devices
from src.errors import ProtocolError
from src.fleet import DeviceState, evaluate_fleet, observe_fleet
from src.learner import train_local
from src.metrics import CostLedger, build_report, cost_normalizer, kappa, step_accuracy
from src.moe import (BankModel, MoEModel, ModelBundle, ParamScope, ReplicaSet, bank_of,
                     flop_profile, params_for_scope)
from src.policy import ConfigKind, Layout, RetrainConfig
from src.seeding import substream

logger = logging.getLogger('driftguard')

INIT_BANK = 'init'
SHARED_BANK = 'global'
PERSONAL_KINDS = (ConfigKind.BASELINE_PFL, ConfigKind.BASELINE_PFL_PER_DEVICE)


def _params_digest(params):
    sha = hashlib.sha256()
    for pid in sorted(params):
        sha.update(str(pid).encode())
        sha.update(np.ascontiguousarray(params[pid]).tobytes())
    return sha.hexdigest()


def fedavg_aggregate(updates):
    """
    Sample-weighted mean of parameter dicts.

    updates maps device id -> (params, n_samples). Contributions are summed in
    ascending device-id order, so the result does not depend on the order
    participants report in.
    """
    if not updates:
        raise ProtocolError("FedAvg needs at least one update")
    ordered = [updates[device_id] for device_id in sorted(updates)]
    keys = set(ordered[0][0])
    for params, _ in ordered:
        if set(params) != keys:
            raise ProtocolError(
                f"FedAvg updates disagree on parameters: {sorted(map(str, keys ^ set(params)))}")
    total = sum(n for _, n in ordered)
    if total <= 0:
        raise ProtocolError(f"FedAvg needs a positive sample count, got {total}")
    weights = np.array([n / total for _, n in ordered])
    return {pid: np.tensordot(weights, np.stack([p[pid] for p, _ in ordered]), axes=1)
            for pid in sorted(keys)}


def partition_of(pid):
    if pid.module_path.startswith('shared/'):
        return 'shared'
    if pid.module_path.startswith('gate/'):
        return 'gate/branch'
    return f'local/{bank_of(pid)}'


def _stores(store):
    if isinstance(store, ReplicaSet):
        return [(f'{key}:', store.replicas[key]) for key in store.bank_keys()]
    return [('', store)]


def partition_digest(store):
    """SHA-256 per parameter partition of every bundle in the store."""
    digests = {}
    for prefix, bundle in _stores(store):
        groups = {'shared': bundle.shared, 'gate/branch': bundle.branch_gate}
        for key in bundle.bank_keys():
            groups[f'local/{key}'] = bundle.bank(key)
        for name, params in groups.items():
            digests[prefix + name] = _params_digest(params)
    return digests


@dataclass
class LocalUpdate:
    device_id: int
    params: dict
    n_samples: int
    epochs: int
    kappa: float
    partitions: frozenset


@dataclass
class RetrainOutcome:
    config: RetrainConfig
    epochs: list
    kappas: list
    touched: set = field(default_factory=set)

    def to_dict(self, cost):
        data = self.config.to_dict()
        data['epochs'] = [{str(d): e for d, e in sorted(r.items())} for r in self.epochs]
        data['flops'] = cost
        return data


def _scope_for(config, device):
    if config.kind is ConfigKind.GROUP and device.current_group != config.scope.bank_key:
        raise ProtocolError(
            f"Device {device.device_id} uses bank '{device.current_group}' but "
            f"{config.label} retrains '{config.scope.bank_key}'")
    return config.scope


def _train_device(device, config, store, settings):
    bundle, bank_key = store.resolve(device.current_group)
    view = bundle.view(bank_key)
    mask = params_for_scope(bundle, _scope_for(config, device)) & frozenset(view)
    train_set = device.training_set()
    trained, epochs, _ = train_local(BankModel(MoEModel(bundle.spec), bank_key), view,
                                     train_set, device.step_data.val, settings, mask)
    prefix = f'{device.current_group}:' if isinstance(store, ReplicaSet) else ''
    return LocalUpdate(
        device_id=device.device_id,
        params={pid: trained[pid] for pid in mask},
        n_samples=len(train_set),
        epochs=epochs,
        kappa=kappa(mask, flop_profile(bundle.spec, bank_key), len(train_set), epochs),
        partitions=frozenset(prefix + partition_of(pid) for pid in mask),
    )


def _write_back(store, devices, updates, config):
    by_id = {d.device_id: d for d in devices}
    if config.kind in PERSONAL_KINDS:
        bundle, _ = store.resolve(by_id[updates[0].device_id].current_group)
        common = {u.device_id: ({pid: v for pid, v in u.params.items()
                                  if not pid.module_path.startswith('local/')}, u.n_samples)
                  for u in updates}
        bundle.update(fedavg_aggregate(common))
        for u in updates:
            bundle.update({pid: v for pid, v in u.params.items()
                           if pid.module_path.startswith('local/')})
        return
    bundles = {id(store.resolve(by_id[u.device_id].current_group)[0]) for u in updates}
    if len(bundles) != 1:
        raise ProtocolError(f"{config.label} participants train different model replicas")
    bundle, _ = store.resolve(by_id[updates[0].device_id].current_group)
    bundle.update(fedavg_aggregate({u.device_id: (u.params, u.n_samples) for u in updates}))


def run_retraining(config, devices, store, settings, executor=None):
    """
    Execute one triggered config for settings.rounds rounds of masked local
    training followed by FedAvg, writing the result back into the store.
    """
    if not config.trig:
        return RetrainOutcome(config, [], [])
    by_id = {d.device_id: d for d in devices}
    unknown = config.devices - set(by_id)
    if unknown:
        raise ProtocolError(f"{config.label} names unknown devices {sorted(unknown)}")
    participants = [by_id[d] for d in sorted(config.devices)]
    outcome = RetrainOutcome(config, [], [])
    for round_index in range(settings.rounds):
        def train(device):
            return _train_device(device, config, store, settings)
        if executor is None:
            updates = [train(d) for d in participants]
        else:
            updates = list(executor.map(train, participants))
        updates.sort(key=lambda u: u.device_id)
        _write_back(store, participants, updates, config)
        outcome.epochs.append({u.device_id: u.epochs for u in updates})
        outcome.kappas.append({u.device_id: u.kappa for u in updates})
        for u in updates:
            outcome.touched |= u.partitions
        logger.debug(f"{config.label} round {round_index + 1}: epochs "
                     f"{[u.epochs for u in updates]}")
    return outcome


@dataclass
class StepRecord:
    step: int
    policy: str
    seed: int
    acc_pre: list
    acc_post: list
    groups: dict
    events: list
    flops_step: float
    flops_cum: float

    @property
    def mean_acc_pre(self):
        return step_accuracy(self.acc_pre)

    @property
    def mean_acc_post(self):
        return step_accuracy(self.acc_post)

    @property
    def event_kinds(self):
        return '|'.join(event['kind'] for event in self.events)

    def to_dict(self):
        return {
            'step': self.step,
            'policy': self.policy,
            'seed': self.seed,
            'mean_acc_pre': self.mean_acc_pre,
            'mean_acc_post': self.mean_acc_post,
            'acc_pre': self.acc_pre,
            'acc_post': self.acc_post,
            'groups': self.groups,
            'events': self.events,
            'flops_step': self.flops_step,
            'flops_cum': self.flops_cum,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass
class SimulationState:
    devices: list
    store: object
    grouping: object = None
    ledger: CostLedger = field(default_factory=CostLedger)
    records: list = field(default_factory=list)
    step: int = 0


def initial_store(policy, spec, seed):
    """Model store for a policy's layout; every layout draws the same initial parameters."""
    rng = substream(seed, 'init')
    if policy.layout is Layout.GROUP_REPLICAS:
        return ReplicaSet.initialize(spec, rng, key=INIT_BANK), INIT_BANK
    if policy.layout is Layout.SHARED:
        return ModelBundle.initialize(spec, rng, bank_key=SHARED_BANK), SHARED_BANK
    return ModelBundle.initialize(spec, rng, bank_key=INIT_BANK), INIT_BANK


class Simulation:
    """Drives one policy over one precomputed drift trace."""

    def __init__(self, policy, trace, spec, train, thresholds, cluster, **args):
        self.policy = policy
        self.trace = trace
        self.spec = spec
        self.train = train
        self.thresholds = thresholds
        self.cluster = cluster
        self.executor = args.get('executor')
        self.include_branch = args.get('include_branch', True)
        self.audit = args.get('audit', True)
        self.seed = trace.seed
        store, bank = initial_store(policy, spec, self.seed)
        devices = [DeviceState(c, bank) for c in range(trace.settings.n_devices)]
        self.state = SimulationState(devices, store)

    def execute(self, config, step):
        before = partition_digest(self.state.store) if self.audit else None
        outcome = run_retraining(config, self.state.devices, self.state.store, self.train,
                                 self.executor)
        if self.audit:
            after = partition_digest(self.state.store)
            changed = {name for name in before if before[name] != after.get(name)}
            leaked = changed - outcome.touched
            if leaked:
                raise ProtocolError(f"{config.label} modified partitions outside its scope: "
                                    f"{sorted(leaked)}")
        event = self.state.ledger.record(step, config, outcome.kappas, self.train.rounds)
        logger.info(f"{self.policy.name} seed {self.seed} step {step}: {config.label} on "
                    f"{len(config.devices)} devices, {event.cost:.4g} FLOPs")
        return outcome.to_dict(event.cost)

    def bootstrap(self):
        """Full-model federated training of the initial model on every device."""
        devices = self.state.devices
        config = RetrainConfig(True, [d.device_id for d in devices], ParamScope.full_model(),
                               ConfigKind.BOOTSTRAP)
        events = [self.execute(config, 1)]
        if self.policy.layout is Layout.DEVICE_BANKS:
            store = self.state.store
            for device in devices:
                key = f'device-{device.device_id}'
                store.clone_bank(INIT_BANK, key)
                device.current_group = key
            store.drop_bank(INIT_BANK)
        return events

    def regroup(self, observations):
        grouping = cluster_devices(observations, self.cluster)
        grouping = assign_banks(grouping, self.state.grouping, self.state.store)
        for device in self.state.devices:
            device.current_group = grouping.bank_of(device.device_id)
        logger.debug(f"Step {self.state.step}: groups {grouping.to_dict()}")
        self.state.grouping = grouping
        return grouping

    def simulate_step(self):
        state = self.state
        if state.step >= len(self.trace.steps):
            raise ProtocolError(f"Trace has only {len(self.trace.steps)} steps")
        entry = self.trace.steps[state.step]
        state.step = entry.step
        for device in state.devices:
            device.receive(entry.data[device.device_id], entry.mixtures[device.device_id])

        if entry.step == 1:
            acc_pre = evaluate_fleet(state.devices, state.store, self.executor)
            events = self.bootstrap()
        else:
            observations = observe_fleet(state.devices, state.store, self.executor,
                                         self.include_branch)
            acc_pre = [o.avg_local_acc for o in observations]
            grouping = self.regroup(observations) if self.policy.clusters else None
            configs = self.policy.configs(observations, grouping, self.thresholds)
            events = [self.execute(config, entry.step) for config in configs if config.trig]

        acc_post = evaluate_fleet(state.devices, state.store, self.executor)
        record = StepRecord(
            step=entry.step,
            policy=self.policy.name,
            seed=self.seed,
            acc_pre=acc_pre,
            acc_post=acc_post,
            groups=state.grouping.to_dict() if state.grouping is not None else None,
            events=events,
            flops_step=state.ledger.step_cost(entry.step),
            flops_cum=state.ledger.cumulative,
        )
        state.records.append(record)
        return record

    def run(self, on_step=None):
        while self.state.step < len(self.trace.steps):
            record = self.simulate_step()
            if on_step is not None:
                on_step(record)
        return self.state.records

    def normalizer(self):
        settings = self.trace.settings
        profile = flop_profile(self.spec, 'normalizer')
        all_params = frozenset().union(*(layer.param_ids for layer in profile))
        return cost_normalizer(profile, all_params, settings.n_devices, settings.n_steps,
                               self.train.rounds, settings.train_count + settings.val_count,
                               self.train.max_epochs)

    def report(self):
        records = self.state.records
        return build_report(self.policy.name, self.seed,
                            [r.mean_acc_post for r in records],
                            [r.mean_acc_pre for r in records],
                            self.state.ledger, self.normalizer(), len(records))
