#!/usr/bin/env python3
import csv
import json
import logging
import os

import pytest

from src.config import ExperimentConfig
from src.errors import ConfigurationError
from src.experiment import (CURVE_COLUMNS, STEP_COLUMNS, SWEEP_COLUMNS, Experiment, compare,
                            curve_rows, render_summary, with_sweep_value)
from src.metrics import MetricsReport, smooth_curve

SMALL = {
    'world': {'n_devices': 4, 'n_steps': 3, 'train_count': 8, 'val_count': 4},
    'model': {'n_features': 4, 'n_classes': 3, 'shared_layers': 1, 'experts_per_layer': 2,
              'hidden_dim': 5, 'local_hidden_dim': 4},
    'train': {'max_epochs': 2, 'batch_size': 4, 'learning_rate': 0.05, 'patience': 1,
              'rounds': 1},
    'policies': ['driftguard', 'fcl_avetrig'],
    'seeds': [0, 1, 2],
}


def small_config(tmp_path, name='out', **overrides):
    data = dict(SMALL, output_dir=str(tmp_path / name))
    data.update(overrides)
    return ExperimentConfig.from_dict(data)


def read_json(path):
    with open(path, encoding='utf-8') as fh:
        return json.load(fh)


def make_report(policy, seed, mean_acc, cost, per_step=(0.5, 0.5)):
    return MetricsReport(policy=policy, seed=seed, per_step_acc=list(per_step),
                         per_step_acc_pre=list(per_step), mean_acc=mean_acc, total_cost=cost,
                         total_cost_normalized=cost, normalizer=1.0,
                         efficiency=mean_acc / cost, event_counts={'global': 2},
                         cumulative_cost=[cost] * len(per_step))


def test_run_writes_every_artefact(tmp_path):
    config = small_config(tmp_path)
    reports = Experiment(config).run()
    out = tmp_path / 'out'
    assert len(reports) == 6
    for policy in ('driftguard', 'fcl_avetrig'):
        for seed in (0, 1, 2):
            payload = read_json(out / 'runs' / f'{policy}-seed{seed}.json')
            assert payload['complete'] is True
            assert payload['config_hash'] == config.digest()
            assert payload['metrics']['policy'] == policy
            assert isinstance(payload['metrics']['above_reference_count'], int)
            lines = (out / 'runs' / f'{policy}-seed{seed}.jsonl').read_text().splitlines()
            assert [json.loads(line)['step'] for line in lines] == [1, 2, 3]
            assert (out / 'runs' / f'{policy}-seed{seed}.model.json').exists()
    with open(out / 'steps.csv', newline='', encoding='utf-8') as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == STEP_COLUMNS
    assert len(rows) == 1 + 6 * 3
    assert rows[1][:3] == ['1', 'driftguard', '0']
    assert rows[1][5] == 'bootstrap'
    summary = (out / 'summary.txt').read_text()
    assert summary.startswith(f'config {config.digest()}\n')
    assert 'Steps above the pooled median accuracy:' in summary


def test_run_writes_smoothed_curves(tmp_path):
    reports = Experiment(small_config(tmp_path)).run()
    with open(tmp_path / 'out' / 'curves.csv', newline='', encoding='utf-8') as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == CURVE_COLUMNS
    assert len(rows) == 1 + 6 * 3
    first = reports[0]
    body = [row for row in rows[1:] if row[1] == first.policy and row[2] == str(first.seed)]
    assert [row[0] for row in body] == ['1', '2', '3']
    assert [float(row[3]) for row in body] == pytest.approx(first.per_step_acc, abs=1e-6)
    assert [float(row[4]) for row in body] == \
        pytest.approx(smooth_curve(first.per_step_acc), abs=1e-6)
    assert [float(row[5]) for row in body] == pytest.approx(first.cumulative_cost, abs=0.1)


def test_curve_rows_smooth_a_step_change():
    report = make_report('driftguard', 3, 0.5, 10.0, per_step=(0.0, 0.0, 1.0, 1.0))
    rows = curve_rows(report)
    assert [row[:3] for row in rows] == [[s, 'driftguard', 3] for s in (1, 2, 3, 4)]
    smoothed = [float(row[4]) for row in rows]
    assert smoothed == sorted(smoothed)
    assert 0.0 < smoothed[0] < smoothed[-1] < 1.0


def test_policies_share_one_trace_per_seed(tmp_path):
    Experiment(small_config(tmp_path)).run()
    runs = tmp_path / 'out' / 'runs'
    for seed in (0, 1, 2):
        hashes = {read_json(runs / f'{p}-seed{seed}.json')['trace_hash']
                  for p in ('driftguard', 'fcl_avetrig')}
        assert len(hashes) == 1


def test_runs_are_byte_identical(tmp_path):
    Experiment(small_config(tmp_path, 'first')).run()
    Experiment(small_config(tmp_path, 'second'), max_concurrency=4).run()
    first = (tmp_path / 'first' / 'steps.csv').read_bytes()
    assert first == (tmp_path / 'second' / 'steps.csv').read_bytes()
    assert (tmp_path / 'first' / 'summary.txt').read_bytes() == \
        (tmp_path / 'second' / 'summary.txt').read_bytes()


def test_failed_run_is_marked_incomplete(tmp_path, mocker, caplog):
    mocker.patch('src.runtime.Simulation.report', side_effect=RuntimeError('boom'))
    with caplog.at_level(logging.WARNING, logger='driftguard'):
        with pytest.raises(RuntimeError, match='boom'):
            Experiment(small_config(tmp_path)).run()
    payload = read_json(tmp_path / 'out' / 'runs' / 'driftguard-seed0.json')
    assert payload['complete'] is False
    assert payload['metrics'] is None
    assert 'Run driftguard seed 0 is incomplete after 3 steps' in caplog.text


def test_output_dir_is_created(tmp_path, caplog):
    target = tmp_path / 'nested' / 'results'
    experiment = Experiment(small_config(tmp_path), output_dir=str(target))
    with caplog.at_level(logging.WARNING, logger='driftguard'):
        experiment.check_output_dir()
    assert os.path.isdir(target / 'runs')
    assert 'does not exist, creating now' in caplog.text


def test_trace_files(tmp_path):
    config = small_config(tmp_path, seeds=[4])
    paths = Experiment(config).trace()
    assert paths == [str(tmp_path / 'out' / 'trace-seed4.jsonl')]
    lines = (tmp_path / 'out' / 'trace-seed4.jsonl').read_text().splitlines()
    header = json.loads(lines[0])
    assert header['seed'] == 4 and len(header['trace_hash']) == 64
    assert len(lines) == 1 + 4 * 3
    assert json.loads(lines[1])['step'] == 1


def test_sweep_writes_one_row_per_value_and_seed(tmp_path):
    config = small_config(tmp_path, seeds=[0, 1])
    rows = Experiment(config).sweep('tau_global', [0.0, 1.0])
    assert len(rows) == 4
    with open(tmp_path / 'out' / 'sweep.csv', newline='', encoding='utf-8') as fh:
        written = list(csv.reader(fh))
    assert written[0] == SWEEP_COLUMNS
    quiet = [r for r in rows if r[1] == 0.0]
    eager = [r for r in rows if r[1] == 1.0]
    for low, high in zip(quiet, eager):
        assert low[7] == 0
        assert high[7] >= low[7]
        assert float(high[4]) > 0


def test_with_sweep_value():
    config = ExperimentConfig()
    assert with_sweep_value(config, 'tau_global', 0.4).thresholds.tau_global == 0.4
    assert with_sweep_value(config, 'distance_threshold', 0.1).clustering.distance_threshold \
        == 0.1
    with pytest.raises(ConfigurationError, match="Unknown sweep parameter 'rounds'"):
        with_sweep_value(config, 'rounds', 2)


def test_render_summary_marks_best_cell():
    reports = [make_report('driftguard', 0, 0.85, 0.07),
               make_report('fcl_avetrig', 0, 0.61, 0.29)]
    lines = render_summary(reports).splitlines()
    assert lines[0].split() == ['method', 'seed', '0']
    assert lines[1].startswith('driftguard') and lines[1].endswith('12.14 (0.85 / 0.07)*')
    assert lines[2].endswith('2.10 (0.61 / 0.29)')
    assert '  driftguard seed 0: 2' in lines


def test_render_summary_single_report():
    lines = render_summary([make_report('driftguard', 1, 0.6, 0.16)]).splitlines()
    assert lines[1].endswith('3.75 (0.60 / 0.16)*')


def test_compare_skips_incomplete_reports(tmp_path, caplog):
    Experiment(small_config(tmp_path, seeds=[0])).run()
    runs = tmp_path / 'out' / 'runs'
    broken = tmp_path / 'broken.json'
    broken.write_text(json.dumps({'complete': False, 'metrics': None}), encoding='utf-8')
    paths = [str(runs / 'driftguard-seed0.json'), str(runs / 'fcl_avetrig-seed0.json'),
             str(broken)]
    with caplog.at_level(logging.WARNING, logger='driftguard'):
        summary = compare(paths)
    assert 'is incomplete, skipping it' in caplog.text
    assert summary.count('*') == 1
    assert 'driftguard' in summary and 'fcl_avetrig' in summary


def test_compare_without_complete_reports(tmp_path):
    broken = tmp_path / 'broken.json'
    broken.write_text(json.dumps({'complete': False}), encoding='utf-8')
    with pytest.raises(ConfigurationError, match='No complete run reports'):
        compare([str(broken)])
    with pytest.raises(ConfigurationError, match='Cannot read run report'):
        compare([str(tmp_path / 'missing.json')])


def test_progress_bar_counts_every_step(tmp_path, mocker):
    bar = mocker.patch('src.experiment.tqdm')
    experiment = Experiment(small_config(tmp_path, seeds=[0]), progress=True)
    experiment.run()
    assert bar.call_args.kwargs['total'] == 2 * 3
    assert bar.return_value.update.call_count == 6
    bar.return_value.close.assert_called_once()
    assert experiment.steps_simulated == 6 and experiment.runs_completed == 2
