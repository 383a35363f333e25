import copy
import json
import logging
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from src.errors import BankConflictError, ConfigurationError, ProtocolError, UnknownBankError
from src.learner import (ParamId, dense_forward, mean_cross_entropy, one_hot, softmax,
                         softmax_backward)

logger = logging.getLogger('driftguard')

BRANCH_W = ParamId('gate/branch', 'W')
BRANCH_B = ParamId('gate/branch', 'b')
SHARED_HEAD_W = ParamId('shared/head', 'W')
SHARED_HEAD_B = ParamId('shared/head', 'b')


def expert_id(layer, expert, tensor):
    return ParamId(f'shared/layer{layer}/expert{expert}', tensor)


def layer_gate_id(layer, tensor):
    return ParamId(f'shared/layer{layer}/gate', tensor)


def local_id(bank_key, layer_name, tensor):
    return ParamId(f'local/{bank_key}/{layer_name}', tensor)


def bank_of(pid):
    """Bank key of a local parameter id, None for shared and gate ids."""
    parts = pid.module_path.split('/')
    return parts[1] if parts[0] == 'local' else None


@dataclass(frozen=True)
class MoESpec:
    n_features: int = 16
    n_classes: int = 4
    shared_layers: int = 2
    experts_per_layer: int = 3
    top_k: int = 1
    hidden_dim: int = 32
    local_layers: int = 1
    local_hidden_dim: int = 16

    def __post_init__(self):
        for name, value in asdict(self).items():
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise ConfigurationError(f"model.{name} must be an integer >= 1, got {value!r}")
        if self.top_k > self.experts_per_layer:
            raise ConfigurationError(
                f"model.top_k ({self.top_k}) exceeds model.experts_per_layer "
                f"({self.experts_per_layer})")

    def layer_input_dim(self, layer):
        return self.n_features if layer == 0 else self.hidden_dim

    def local_layer_names(self):
        return [f'hidden{i}' for i in range(self.local_layers)] + ['head']

    def n_gate_units(self, include_branch=True):
        return self.shared_layers * self.experts_per_layer + (2 if include_branch else 0)


class ScopeKind(Enum):
    FULL_MODEL = 'full_model'
    SHARED_PLUS_BRANCH_GATE = 'shared_plus_branch_gate'
    LOCAL_BANK_PLUS_BRANCH_GATE = 'local_bank_plus_branch_gate'
    PER_DEVICE_LOCAL_PLUS_SHARED = 'per_device_local_plus_shared'


@dataclass(frozen=True)
class ParamScope:
    kind: ScopeKind
    bank_key: str = None

    @classmethod
    def full_model(cls, bank_key=None):
        return cls(ScopeKind.FULL_MODEL, bank_key)

    @classmethod
    def shared_plus_branch_gate(cls):
        return cls(ScopeKind.SHARED_PLUS_BRANCH_GATE)

    @classmethod
    def local_bank(cls, bank_key):
        return cls(ScopeKind.LOCAL_BANK_PLUS_BRANCH_GATE, bank_key)

    @classmethod
    def per_device_local_plus_shared(cls):
        return cls(ScopeKind.PER_DEVICE_LOCAL_PLUS_SHARED)

    def __str__(self):
        if self.bank_key is None:
            return self.kind.value
        return f'{self.kind.value}[{self.bank_key}]'


@dataclass
class GateTrace:
    """Gate outputs for a batch: one row per sample."""
    branch_weights: np.ndarray
    layer_selections: list
    layer_scores: list

    def gate_vectors(self, include_branch=True):
        parts = list(self.layer_selections)
        if include_branch:
            parts.append(self.branch_weights)
        return np.concatenate(parts, axis=1)

    def check(self, top_k):
        assert np.all(self.branch_weights >= 0)
        assert np.allclose(self.branch_weights.sum(axis=1), 1.0, rtol=0, atol=1e-9)
        for selection in self.layer_selections:
            assert np.all(selection.sum(axis=1) == top_k)


def _init_dense(rng, n_in, n_out, scale=None):
    scale = np.sqrt(2.0 / n_in) if scale is None else scale
    return rng.normal(0.0, scale, size=(n_in, n_out)), np.zeros(n_out)


def init_shared(spec, rng):
    params = {}
    for layer in range(spec.shared_layers):
        n_in = spec.layer_input_dim(layer)
        W, b = _init_dense(rng, n_in, spec.experts_per_layer, scale=1.0 / np.sqrt(n_in))
        params[layer_gate_id(layer, 'W')], params[layer_gate_id(layer, 'b')] = W, b
        for expert in range(spec.experts_per_layer):
            W, b = _init_dense(rng, n_in, spec.hidden_dim)
            params[expert_id(layer, expert, 'W')], params[expert_id(layer, expert, 'b')] = W, b
    params[SHARED_HEAD_W], params[SHARED_HEAD_B] = _init_dense(rng, spec.hidden_dim,
                                                               spec.n_classes)
    return params


def init_branch_gate(spec):
    return {BRANCH_W: np.zeros((spec.n_features, 2)), BRANCH_B: np.zeros(2)}


def init_bank(spec, bank_key, rng):
    if '/' in bank_key:
        raise ConfigurationError(f"Bank key '{bank_key}' must not contain '/'")
    params = {}
    n_in = spec.n_features
    for name in spec.local_layer_names():
        n_out = spec.n_classes if name == 'head' else spec.local_hidden_dim
        W, b = _init_dense(rng, n_in, n_out)
        params[local_id(bank_key, name, 'W')], params[local_id(bank_key, name, 'b')] = W, b
        n_in = n_out
    return params


@dataclass
class ModelBundle:
    spec: MoESpec
    shared: dict = field(default_factory=dict)
    branch_gate: dict = field(default_factory=dict)
    local_banks: dict = field(default_factory=dict)

    @classmethod
    def initialize(cls, spec, rng, bank_key='init'):
        shared = init_shared(spec, rng)
        return cls(spec, shared, init_branch_gate(spec), {bank_key: init_bank(spec, bank_key, rng)})

    def bank_keys(self):
        return sorted(self.local_banks)

    def bank(self, key):
        try:
            return self.local_banks[key]
        except KeyError:
            raise UnknownBankError(f"Unknown local bank '{key}'") from None

    def resolve(self, key):
        self.bank(key)
        return self, key

    def view(self, bank_key):
        """Every parameter a forward pass through bank_key reads."""
        params = dict(self.shared)
        params.update(self.branch_gate)
        params.update(self.bank(bank_key))
        return params

    def all_param_ids(self):
        ids = set(self.shared) | set(self.branch_gate)
        for bank in self.local_banks.values():
            ids |= set(bank)
        return frozenset(ids)

    def update(self, params):
        for pid, value in params.items():
            if pid in self.shared:
                self.shared[pid] = value
            elif pid in self.branch_gate:
                self.branch_gate[pid] = value
            else:
                bank = self.local_banks.get(bank_of(pid))
                if bank is None or pid not in bank:
                    raise ProtocolError(f"Parameter {pid} does not belong to this bundle")
                bank[pid] = value

    def clone_bank(self, src_key, dst_key):
        source = self.bank(src_key)
        if dst_key in self.local_banks:
            raise BankConflictError(f"Local bank '{dst_key}' already exists")
        if '/' in dst_key:
            raise ConfigurationError(f"Bank key '{dst_key}' must not contain '/'")
        clone = {}
        for pid, value in source.items():
            layer_name = pid.module_path.split('/')[2]
            clone[local_id(dst_key, layer_name, pid.tensor_name)] = value.copy()
        self.local_banks[dst_key] = clone
        logger.debug(f"Cloned local bank '{src_key}' into '{dst_key}'")
        return self

    def drop_bank(self, key):
        self.bank(key)
        del self.local_banks[key]

    def copy(self):
        return copy.deepcopy(self)

    def records(self):
        params = {}
        params.update(self.shared)
        params.update(self.branch_gate)
        for bank in self.local_banks.values():
            params.update(bank)
        return [(pid, list(params[pid].shape), params[pid].reshape(-1).tolist())
                for pid in sorted(params)]

    def to_payload(self):
        return {
            'spec': asdict(self.spec),
            'params': [{'module_path': pid.module_path, 'tensor_name': pid.tensor_name,
                        'shape': shape, 'values': values}
                       for pid, shape, values in self.records()],
        }

    def save(self, path):
        with open(path, 'w', encoding='utf-8') as fh:
            json.dump(self.to_payload(), fh)

    @classmethod
    def load(cls, path):
        with open(path, encoding='utf-8') as fh:
            return cls.from_payload(json.load(fh))

    @classmethod
    def from_payload(cls, payload):
        bundle = cls(MoESpec(**payload['spec']))
        for record in payload['params']:
            pid = ParamId(record['module_path'], record['tensor_name'])
            value = np.asarray(record['values'], dtype=np.float64).reshape(record['shape'])
            if pid.module_path.startswith('shared/'):
                bundle.shared[pid] = value
            elif pid.module_path.startswith('gate/'):
                bundle.branch_gate[pid] = value
            else:
                bundle.local_banks.setdefault(bank_of(pid), {})[pid] = value
        return bundle


class ReplicaSet:
    """One full single-bank model per key; the bank-store surface of ModelBundle."""
    LOCAL_BANK = 'local'

    def __init__(self, replicas=None):
        self.replicas = dict(replicas or {})

    @classmethod
    def initialize(cls, spec, rng, key='init'):
        return cls({key: ModelBundle.initialize(spec, rng, bank_key=cls.LOCAL_BANK)})

    def bank_keys(self):
        return sorted(self.replicas)

    def resolve(self, key):
        try:
            return self.replicas[key], self.LOCAL_BANK
        except KeyError:
            raise UnknownBankError(f"Unknown model replica '{key}'") from None

    def clone_bank(self, src_key, dst_key):
        source, _ = self.resolve(src_key)
        if dst_key in self.replicas:
            raise BankConflictError(f"Model replica '{dst_key}' already exists")
        self.replicas[dst_key] = source.copy()
        return self

    def drop_bank(self, key):
        self.resolve(key)
        del self.replicas[key]

    def save(self, path):
        payload = {'replicas': {key: self.replicas[key].to_payload()
                                for key in self.bank_keys()}}
        with open(path, 'w', encoding='utf-8') as fh:
            json.dump(payload, fh)

    @classmethod
    def load(cls, path):
        with open(path, encoding='utf-8') as fh:
            payload = json.load(fh)
        return cls({key: ModelBundle.from_payload(data)
                    for key, data in payload['replicas'].items()})


def params_for_scope(bundle, scope):
    shared_and_gate = frozenset(bundle.shared) | frozenset(bundle.branch_gate)
    if scope.kind is ScopeKind.FULL_MODEL:
        return bundle.all_param_ids()
    if scope.kind is ScopeKind.SHARED_PLUS_BRANCH_GATE:
        return shared_and_gate
    if scope.kind is ScopeKind.LOCAL_BANK_PLUS_BRANCH_GATE:
        return frozenset(bundle.bank(scope.bank_key)) | frozenset(bundle.branch_gate)
    if scope.kind is ScopeKind.PER_DEVICE_LOCAL_PLUS_SHARED:
        if scope.bank_key is None:
            return bundle.all_param_ids()
        return shared_and_gate | frozenset(bundle.bank(scope.bank_key))
    raise ConfigurationError(f"Unknown parameter scope {scope!r}")


def top_k_selection(scores, k):
    """0/1 mask of the k highest scores per row; ties go to the lower index."""
    scores = np.atleast_2d(scores)
    order = np.argsort(-scores, axis=1, kind='stable')[:, :k]
    selection = np.zeros_like(scores)
    np.put_along_axis(selection, order, 1.0, axis=1)
    return selection


def branch_gate(params, x):
    return softmax(dense_forward(x, params[BRANCH_W], params[BRANCH_B]))


def layer_gate(params, layer_idx, h, top_k):
    scores = softmax(dense_forward(h, params[layer_gate_id(layer_idx, 'W')],
                                   params[layer_gate_id(layer_idx, 'b')]))
    return top_k_selection(scores, top_k), np.atleast_2d(scores)


@dataclass
class _LayerCache:
    inputs: np.ndarray
    scores: np.ndarray
    selection: np.ndarray
    weights: np.ndarray
    pre: list
    act: list


@dataclass
class _ForwardCache:
    x: np.ndarray
    branch: np.ndarray
    layers: list
    shared_top: np.ndarray
    shared_logits: np.ndarray
    local: list
    local_top: np.ndarray
    local_logits: np.ndarray
    probs: np.ndarray


class MoEModel:
    """
    Two-branch mixture of experts.

    The shared branch stacks hard-gated expert layers (top_k of
    experts_per_layer, outputs mixed by the renormalised scores of the
    selected experts) under a dense head. The local branch is a plain dense
    network read from one local bank. A two-way soft gate on the raw input
    mixes the two branch logits before the final softmax.
    """

    def __init__(self, spec):
        self.spec = spec

    def _forward(self, params, bank_key, features):
        spec = self.spec
        x = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if x.shape[1] != spec.n_features:
            raise ConfigurationError(
                f"Expected {spec.n_features} features per sample, got {x.shape[1]}")
        branch = branch_gate(params, x)

        h = x
        layers = []
        for layer in range(spec.shared_layers):
            selection, scores = layer_gate(params, layer, h, spec.top_k)
            selected = scores * selection
            weights = selected / selected.sum(axis=1, keepdims=True)
            pre, act = [], []
            out = np.zeros((len(x), spec.hidden_dim))
            for expert in range(spec.experts_per_layer):
                # only routed rows are evaluated; the rest stay at zero
                rows = np.flatnonzero(selection[:, expert])
                z = np.zeros((len(x), spec.hidden_dim))
                if len(rows):
                    z[rows] = dense_forward(h[rows], params[expert_id(layer, expert, 'W')],
                                            params[expert_id(layer, expert, 'b')])
                a = np.maximum(z, 0.0)
                out += weights[:, expert:expert + 1] * a
                pre.append(z)
                act.append(a)
            layers.append(_LayerCache(h, scores, selection, weights, pre, act))
            h = out
        shared_logits = dense_forward(h, params[SHARED_HEAD_W], params[SHARED_HEAD_B])

        a = x
        local = []
        for name in spec.local_layer_names()[:-1]:
            z = dense_forward(a, params[local_id(bank_key, name, 'W')],
                              params[local_id(bank_key, name, 'b')])
            local.append((a, z))
            a = np.maximum(z, 0.0)
        local_logits = dense_forward(a, params[local_id(bank_key, 'head', 'W')],
                                     params[local_id(bank_key, 'head', 'b')])

        logits = branch[:, :1] * shared_logits + branch[:, 1:] * local_logits
        return _ForwardCache(x, branch, layers, h, shared_logits, local, a, local_logits,
                             softmax(logits))

    def forward(self, params, bank_key, features):
        cache = self._forward(params, bank_key, features)
        trace = GateTrace(cache.branch,
                          [layer.selection for layer in cache.layers],
                          [layer.scores for layer in cache.layers])
        trace.check(self.spec.top_k)
        return cache.probs, trace

    def gradients(self, params, bank_key, features, labels, mask):
        spec = self.spec
        labels = np.asarray(labels, dtype=np.int64)
        cache = self._forward(params, bank_key, features)
        n = len(labels)
        loss = mean_cross_entropy(cache.probs, labels)
        d_logits = (cache.probs - one_hot(labels, spec.n_classes)) / n
        grads = {}

        def keep(pid, value):
            if pid in mask:
                grads[pid] = value

        branch = cache.branch
        d_branch = np.stack([np.sum(d_logits * cache.shared_logits, axis=1),
                             np.sum(d_logits * cache.local_logits, axis=1)], axis=1)
        d_branch_logits = softmax_backward(branch, d_branch)
        keep(BRANCH_W, cache.x.T @ d_branch_logits)
        keep(BRANCH_B, d_branch_logits.sum(axis=0))

        d_local = branch[:, 1:] * d_logits
        head_w = local_id(bank_key, 'head', 'W')
        keep(head_w, cache.local_top.T @ d_local)
        keep(local_id(bank_key, 'head', 'b'), d_local.sum(axis=0))
        d_a = d_local @ params[head_w].T
        names = spec.local_layer_names()[:-1]
        for name, (a_in, z) in zip(reversed(names), reversed(cache.local)):
            d_z = d_a * (z > 0)
            w = local_id(bank_key, name, 'W')
            keep(w, a_in.T @ d_z)
            keep(local_id(bank_key, name, 'b'), d_z.sum(axis=0))
            d_a = d_z @ params[w].T

        d_shared = branch[:, :1] * d_logits
        keep(SHARED_HEAD_W, cache.shared_top.T @ d_shared)
        keep(SHARED_HEAD_B, d_shared.sum(axis=0))
        d_h = d_shared @ params[SHARED_HEAD_W].T
        for layer in reversed(range(spec.shared_layers)):
            lc = cache.layers[layer]
            d_weights = np.zeros_like(lc.weights)
            d_in = np.zeros_like(lc.inputs)
            for expert in range(spec.experts_per_layer):
                d_z = lc.weights[:, expert:expert + 1] * d_h * (lc.pre[expert] > 0)
                w = expert_id(layer, expert, 'W')
                keep(w, lc.inputs.T @ d_z)
                keep(expert_id(layer, expert, 'b'), d_z.sum(axis=0))
                if layer > 0:
                    d_in += d_z @ params[w].T
                d_weights[:, expert] = np.sum(d_h * lc.act[expert], axis=1)
            # selection is not differentiated, only the renormalised scores are
            total = np.sum(lc.scores * lc.selection, axis=1, keepdims=True)
            d_scores = lc.selection * (
                d_weights - np.sum(lc.weights * d_weights, axis=1, keepdims=True)) / total
            d_gate = softmax_backward(lc.scores, d_scores)
            gate_w = layer_gate_id(layer, 'W')
            keep(gate_w, lc.inputs.T @ d_gate)
            keep(layer_gate_id(layer, 'b'), d_gate.sum(axis=0))
            if layer > 0:
                d_h = d_in + d_gate @ params[gate_w].T
        return loss, grads


class BankModel:
    """Binds an MoEModel to one local bank so the learner can train it."""

    def __init__(self, model, bank_key):
        self.model = model
        self.bank_key = bank_key

    def predict(self, params, features):
        probs, _ = self.model.forward(params, self.bank_key, features)
        return probs

    def gradients(self, params, features, labels, mask):
        return self.model.gradients(params, self.bank_key, features, labels, mask)


def forward(bundle, bank_key, x):
    return MoEModel(bundle.spec).forward(bundle.view(bank_key), bank_key, x)


@dataclass(frozen=True)
class LayerCost:
    name: str
    n_in: int
    n_out: int
    multiplicity: int
    param_ids: frozenset


def flop_profile(spec, bank_key):
    """Dense layers a forward pass evaluates, with the parameters each one owns."""
    profile = [LayerCost('branch_gate', spec.n_features, 2, 1, frozenset({BRANCH_W, BRANCH_B}))]
    for layer in range(spec.shared_layers):
        n_in = spec.layer_input_dim(layer)
        profile.append(LayerCost(
            f'layer{layer}.gate', n_in, spec.experts_per_layer, 1,
            frozenset({layer_gate_id(layer, 'W'), layer_gate_id(layer, 'b')})))
        experts = frozenset(expert_id(layer, e, t)
                            for e in range(spec.experts_per_layer) for t in ('W', 'b'))
        profile.append(LayerCost(f'layer{layer}.experts', n_in, spec.hidden_dim,
                                 spec.top_k, experts))
    profile.append(LayerCost('shared.head', spec.hidden_dim, spec.n_classes, 1,
                             frozenset({SHARED_HEAD_W, SHARED_HEAD_B})))
    n_in = spec.n_features
    for name in spec.local_layer_names():
        n_out = spec.n_classes if name == 'head' else spec.local_hidden_dim
        profile.append(LayerCost(
            f'local.{name}', n_in, n_out, 1,
            frozenset({local_id(bank_key, name, 'W'), local_id(bank_key, name, 'b')})))
        n_in = n_out
    return profile
