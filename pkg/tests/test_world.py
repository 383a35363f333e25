#!/usr/bin/env python3
from collections import Counter
from dataclasses import replace

import numpy as np
import pytest

from src.errors import ConfigurationError, LoadError
from src.world import (DeviceDistribution, DriftEvent, DriftPattern, WorldSettings,
                       build_domains, generate_trace, initial_distributions, load_external,
                       sample_step, schedule_events, update_distribution)

SETTINGS = WorldSettings()


def small_settings(**kwargs):
    base = dict(n_devices=6, n_steps=8, train_count=6, val_count=4)
    base.update(kwargs)
    return WorldSettings(**base)


def test_drift_count_stays_in_band():
    rng = np.random.default_rng(0)
    dominant = [d % 3 for d in range(20)]
    counts = Counter()
    selected = np.zeros(20)
    trials = 10000
    for _ in range(trials):
        events = schedule_events(2, 20, rng, SETTINGS, dominant, 3)
        counts[len(events)] += 1
        for event in events:
            selected[event.device] += 1
    assert set(counts) == {2, 3}
    assert np.all(np.abs(selected / trials - 0.125) < 0.01)


def test_no_drift_at_first_step():
    assert schedule_events(1, 20, np.random.default_rng(0), SETTINGS, [0] * 20, 3) == []


def test_zero_drift_rate_never_drifts():
    settings = replace(SETTINGS, drift_rate=(0.0, 0.0))
    rng = np.random.default_rng(1)
    for step in range(2, 50):
        assert schedule_events(step, 20, rng, settings, [0] * 20, 3) == []


def test_events_target_another_domain_with_capped_length():
    rng = np.random.default_rng(2)
    dominant = [d % 3 for d in range(20)]
    for step in range(2, 200):
        for event in schedule_events(step, 20, rng, SETTINGS, dominant, 3):
            assert event.target_domain != dominant[event.device]
            assert event.start_step == step
            if event.pattern is DriftPattern.INCREMENTAL:
                assert event.length in (2, 3, 4)
            else:
                assert event.length == 1


def test_incremental_lengths_respect_horizon_cap():
    settings = WorldSettings(n_steps=10)
    assert settings.incremental_cap == 2
    assert settings.allowed_lengths() == [2]


def test_incremental_drift_is_linear():
    dist = DeviceDistribution.pure(0, 3)
    dist.enqueue(DriftEvent(0, 2, DriftPattern.INCREMENTAL, 1, 4))
    update_distribution(dist, 1)
    assert dist.mixture.tolist() == [1.0, 0.0, 0.0]
    weights = []
    for step in range(2, 7):
        update_distribution(dist, step)
        weights.append(dist.mixture[1])
        assert dist.mixture.sum() == pytest.approx(1.0, abs=1e-9)
    assert weights == pytest.approx([0.25, 0.5, 0.75, 1.0, 1.0])
    assert dist.pending == []


def test_instantaneous_drift_is_immediate():
    dist = DeviceDistribution.pure(0, 3)
    dist.enqueue(DriftEvent(0, 3, DriftPattern.INSTANTANEOUS, 2))
    update_distribution(dist, 2)
    assert dist.mixture.tolist() == [1.0, 0.0, 0.0]
    update_distribution(dist, 3)
    assert dist.mixture.tolist() == [0.0, 0.0, 1.0]


def test_instantaneous_drift_overrides_incremental():
    dist = DeviceDistribution.pure(0, 3)
    dist.enqueue(DriftEvent(0, 2, DriftPattern.INCREMENTAL, 1, 4))
    update_distribution(dist, 2)
    dist.enqueue(DriftEvent(0, 3, DriftPattern.INSTANTANEOUS, 2))
    update_distribution(dist, 3)
    assert dist.mixture.tolist() == [0.0, 0.0, 1.0]
    update_distribution(dist, 4)
    assert dist.mixture.tolist() == [0.0, 0.0, 1.0]


def test_new_incremental_event_rebases_and_closes_older_one():
    dist = DeviceDistribution.pure(0, 3)
    dist.enqueue(DriftEvent(0, 2, DriftPattern.INCREMENTAL, 1, 4))
    update_distribution(dist, 2)
    assert dist.mixture == pytest.approx([0.75, 0.25, 0.0])
    dist.enqueue(DriftEvent(0, 3, DriftPattern.INCREMENTAL, 2, 2))
    update_distribution(dist, 3)
    assert dist.mixture == pytest.approx([0.25, 0.25, 0.5])
    assert [active.event.target_domain for active in dist.pending] == [2]
    update_distribution(dist, 4)
    assert dist.mixture.tolist() == [0.0, 0.0, 1.0]
    assert dist.pending == []


def test_empty_queue_keeps_distribution():
    dist = DeviceDistribution.pure(1, 3)
    for step in range(1, 10):
        update_distribution(dist, step)
    assert dist.mixture.tolist() == [0.0, 1.0, 0.0]


def test_sample_step_pure_mixture():
    sources = build_domains(SETTINGS, 16, 4, seed=0)
    data = sample_step(DeviceDistribution.pure(0, 3), sources, (20, 10),
                       np.random.default_rng(0))
    assert len(data.train) == 20 and len(data.val) == 10
    assert set(data.train.domains) == {0} and set(data.val.domains) == {0}


def test_sample_step_mixture_proportions():
    sources = build_domains(SETTINGS, 16, 4, seed=0)
    dist = DeviceDistribution(np.array([0.5, 0.5, 0.0]))
    data = sample_step(dist, sources, (5000, 5000), np.random.default_rng(1))
    domains = np.concatenate([data.train.domains, data.val.domains])
    assert abs(np.mean(domains == 0) - 0.5) < 0.02
    assert not np.any(domains == 2)


def test_sample_step_is_deterministic():
    sources = build_domains(SETTINGS, 16, 4, seed=0)
    first = sample_step(DeviceDistribution.pure(2, 3), sources, (20, 10),
                        np.random.default_rng(5))
    second = sample_step(DeviceDistribution.pure(2, 3), sources, (20, 10),
                         np.random.default_rng(5))
    assert np.array_equal(first.train.features, second.train.features)
    assert np.array_equal(first.val.labels, second.val.labels)


def test_domains_cover_every_class():
    sources = build_domains(SETTINGS, 16, 4, seed=3)
    for source in sources:
        _, labels = source.draw(400, np.random.default_rng(0))
        assert set(labels) == {0, 1, 2, 3}


def test_initial_domains_round_robin():
    dists = initial_distributions(small_settings(), 3, seed=0)
    assert [d.dominant_domain() for d in dists] == [0, 1, 2, 0, 1, 2]


def test_initial_domains_random_is_seeded():
    settings = small_settings(initial_domains='random')
    first = [d.dominant_domain() for d in initial_distributions(settings, 3, seed=4)]
    second = [d.dominant_domain() for d in initial_distributions(settings, 3, seed=4)]
    assert first == second


def test_trace_is_a_pure_function_of_seed():
    settings = small_settings()
    first = generate_trace(settings, build_domains(settings, 16, 4, 9), 9)
    second = generate_trace(settings, build_domains(settings, 16, 4, 9), 9)
    other = generate_trace(settings, build_domains(settings, 16, 4, 10), 10)
    assert first.digest() == second.digest()
    assert first.digest() != other.digest()
    assert list(first.records()) == list(second.records())


def test_trace_mixtures_stay_normalised():
    settings = small_settings(n_devices=20, n_steps=30, drift_rate=(0.1, 0.15))
    trace = generate_trace(settings, build_domains(settings, 16, 4, 1), 1)
    assert trace.steps[0].events == []
    for entry in trace.steps:
        assert 2 <= len(entry.events) <= 3 or entry.step == 1
        for mixture in entry.mixtures:
            assert mixture.sum() == pytest.approx(1.0, abs=1e-9)


def test_trace_records_list_each_device_step():
    settings = small_settings()
    trace = generate_trace(settings, build_domains(settings, 16, 4, 0), 0)
    records = list(trace.records())
    assert len(records) == settings.n_steps * settings.n_devices
    assert records[0]['step'] == 1 and records[0]['device'] == 0
    assert sum(records[0]['domain_counts']) == settings.train_count + settings.val_count


@pytest.mark.parametrize('kwargs, field', [
    ({'n_devices': 0}, 'world.n_devices'),
    ({'drift_rate': (0.2, 0.1)}, 'world.drift_rate'),
    ({'drift_rate': (0.1,)}, 'world.drift_rate'),
    ({'initial_domains': 'sorted'}, 'world.initial_domains'),
    ({'incremental_probability': 1.5}, 'world.incremental_probability'),
])
def test_world_settings_validation(kwargs, field):
    with pytest.raises(ConfigurationError, match=field):
        WorldSettings(**kwargs)


def write_vectors(path, rows, header='#features=2 domains=2 classes=2'):
    path.write_text('\n'.join([header] + rows) + '\n', encoding='utf-8')
    return path


def test_load_external_counts(tmp_path):
    rows = [f'{d},{c},{i}.0,{-i}.5' for d in range(2) for c in range(2) for i in range(10)]
    pools = load_external(write_vectors(tmp_path / 'data.csv', rows))
    assert [len(pool) for pool in pools] == [20, 20]
    assert pools[0].n_features == 2


def test_load_external_non_numeric_feature(tmp_path):
    path = write_vectors(tmp_path / 'data.csv', ['0,0,1.0,2.0', '1,1,abc,2.0'])
    with pytest.raises(LoadError, match=r'data.csv:3: non-numeric feature value'):
        load_external(path)


def test_load_external_unknown_domain(tmp_path):
    path = write_vectors(tmp_path / 'data.csv', ['0,0,1.0,2.0', '5,1,1.0,2.0'])
    with pytest.raises(LoadError, match=r':3: unknown domain id 5'):
        load_external(path)


def test_load_external_needs_two_domains(tmp_path):
    path = write_vectors(tmp_path / 'data.csv', ['0,0,1.0,2.0', '0,1,1.0,2.0'],
                         header='#features=2 domains=1 classes=2')
    with pytest.raises(LoadError, match=r'data.csv:1: drift needs at least 2 domains'):
        load_external(path)


def test_load_external_empty_file(tmp_path):
    path = tmp_path / 'empty.csv'
    path.write_text('', encoding='utf-8')
    with pytest.raises(LoadError, match='is empty'):
        load_external(path)


def test_load_external_bad_header(tmp_path):
    path = write_vectors(tmp_path / 'data.csv', ['0,0,1.0,2.0'], header='features: 2')
    with pytest.raises(LoadError, match=':1: expected header'):
        load_external(path)


def test_external_pools_reshuffle_when_spent(tmp_path):
    rows = [f'{d},{i % 2},{i}.0,0.0' for d in range(2) for i in range(4)]
    pools = load_external(write_vectors(tmp_path / 'data.csv', rows))
    rng = np.random.default_rng(0)
    first, _ = pools[0].draw(4, rng)
    assert sorted(first[:, 0]) == [0.0, 1.0, 2.0, 3.0]
    second, _ = pools[0].draw(6, rng)
    assert len(second) == 6
