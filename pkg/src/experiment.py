import concurrent.futures
import contextlib
import csv
import json
import logging
import os
import sys
import time
from dataclasses import replace

from tqdm import tqdm

from src.errors import ConfigurationError
from src.metrics import MetricsReport, above_reference_count, smooth_curve
from src.policy import get_policy
from src.runtime import Simulation
from src.world import generate_trace

logger = logging.getLogger('driftguard')

STEP_COLUMNS = ['step', 'method', 'seed', 'mean_acc_pre', 'mean_acc_post', 'event_kinds',
                'flops_step', 'flops_cum']
CURVE_COLUMNS = ['step', 'method', 'seed', 'mean_acc', 'mean_acc_smoothed', 'flops_cum']
SWEEP_COLUMNS = ['param', 'value', 'seed', 'mean_acc', 'tc_raw', 'tc_normalized', 'efficiency',
                 'global_events', 'group_events']
SWEEP_PARAMS = ('tau_global', 'distance_threshold')


def step_row(record):
    return [record.step, record.policy, record.seed, f'{record.mean_acc_pre:.6f}',
            f'{record.mean_acc_post:.6f}', record.event_kinds, f'{record.flops_step:.1f}',
            f'{record.flops_cum:.1f}']


def curve_rows(report):
    """Per-step accuracy next to its smoothed curve and the cumulative cost."""
    smoothed = smooth_curve(report.per_step_acc)
    return [[step, report.policy, report.seed, f'{acc:.6f}', f'{smooth:.6f}', f'{cost:.1f}']
            for step, (acc, smooth, cost) in enumerate(
                zip(report.per_step_acc, smoothed, report.cumulative_cost), start=1)]


def run_payload(policy, seed, report, config_hash, trace_hash, complete):
    return {
        'policy': policy,
        'seed': seed,
        'complete': complete,
        'config_hash': config_hash,
        'trace_hash': trace_hash,
        'metrics': report.to_dict() if report else None,
    }


def with_sweep_value(config, param, value):
    if param == 'tau_global':
        return replace(config, thresholds=replace(config.thresholds, tau_global=value))
    if param == 'distance_threshold':
        return replace(config, clustering=replace(config.clustering, distance_threshold=value))
    raise ConfigurationError(f"Unknown sweep parameter '{param}', expected one of "
                             f"{', '.join(SWEEP_PARAMS)}")


def render_summary(reports):
    """Efficiency cells per method and seed; '*' marks the best cell of a seed."""
    seeds = sorted({r.seed for r in reports})
    methods = list(dict.fromkeys(r.policy for r in reports))
    cells = {(r.policy, r.seed): r for r in reports}
    best = {}
    for seed in seeds:
        column = [r for r in reports if r.seed == seed]
        best[seed] = max(r.efficiency for r in column)

    header = ['method'] + [f'seed {s}' for s in seeds]
    rows = []
    for method in methods:
        row = [method]
        for seed in seeds:
            report = cells.get((method, seed))
            if report is None:
                row.append('-')
                continue
            mark = '*' if report.efficiency == best[seed] else ''
            row.append(report.cell + mark)
        rows.append(row)
    widths = [max(len(str(line[i])) for line in [header] + rows) for i in range(len(header))]

    lines = ['  '.join(str(v).ljust(w) for v, w in zip(line, widths)).rstrip()
             for line in [header] + rows]
    lines.append('')
    lines.append('Steps above the pooled median accuracy:')
    for seed in seeds:
        column = {r.policy: r.per_step_acc for r in reports if r.seed == seed}
        counts = above_reference_count(column)
        lines.append(f'  seed {seed}: ' + ', '.join(f'{m}={c}' for m, c in counts.items()))
    lines.append('')
    lines.append('Global retraining events:')
    for report in reports:
        lines.append(f'  {report.policy} seed {report.seed}: '
                     f'{report.event_counts.get("global", 0)}')
    return '\n'.join(lines) + '\n'


def compare(paths):
    reports = []
    for path in paths:
        try:
            with open(path, encoding='utf-8') as fh:
                payload = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigurationError(f"Cannot read run report '{path}': {e}") from e
        if not payload.get('complete'):
            logger.warning(f"Run report '{path}' is incomplete, skipping it")
            continue
        reports.append(MetricsReport.from_dict(payload['metrics']))
    if not reports:
        raise ConfigurationError("No complete run reports to compare")
    return render_summary(reports)


class Experiment:
    """Runs every configured policy on one shared drift trace per seed."""

    def __init__(self, config, **args):
        self.config = config
        self.config_hash = config.digest()
        self.output_dir = os.path.expanduser(args.get('output_dir') or config.output_dir)
        self.progress = args.get('progress', False)
        self.max_concurrency = args.get('max_concurrency', 1)
        if self.max_concurrency > 1:
            logger.info(f"Using {self.max_concurrency} workers for device training.")
        self.runs_completed = 0
        self.steps_simulated = 0
        self.pbar = None

    def print_action_report(self, run_time):
        logger.info(f"Completed {self.runs_completed} runs ({self.steps_simulated} steps) in "
                    f"{run_time:.2f} seconds. Average Throughput: "
                    f"{self.steps_simulated / run_time:.2f} steps/second")

    def check_output_dir(self):
        if not os.path.exists(self.output_dir):
            logger.warning(f"Output directory '{self.output_dir}' does not exist, creating now")
            try:
                os.makedirs(self.output_dir)
            except OSError:
                raise OSError(f"Cannot create output '{self.output_dir}' directory. "
                              f"No write access!")
        os.makedirs(os.path.join(self.output_dir, 'runs'), exist_ok=True)

    def make_trace(self, seed):
        trace = generate_trace(self.config.world, self.config.sources(seed), seed)
        logger.info(f"Seed {seed}: drift trace {trace.digest()[:12]} with "
                    f"{sum(len(s.events) for s in trace.steps)} drift events")
        return trace

    def _progress_bar(self, total):
        if not self.progress:
            return None
        return tqdm(desc="Simulating ", total=total, unit="step", position=0, leave=True,
                    ascii=(sys.platform == 'win32'))

    def _advance(self, record):
        self.steps_simulated += 1
        if self.pbar is not None:
            self.pbar.update(1)

    def simulate(self, config, policy_name, trace, executor):
        return Simulation(get_policy(policy_name), trace, config.model, config.train,
                          config.thresholds, config.clustering, executor=executor,
                          include_branch=config.include_branch_gate)

    def run_policy(self, policy_name, trace, executor):
        """One run with its JSON-lines trace; the JSON report is flagged incomplete on failure."""
        stem = os.path.join(self.output_dir, 'runs', f'{policy_name}-seed{trace.seed}')
        trace_hash = trace.digest()
        simulation = self.simulate(self.config, policy_name, trace, executor)
        records = []
        try:
            with open(f'{stem}.jsonl', 'w', encoding='utf-8') as fh:
                def on_step(record):
                    fh.write(record.to_json() + '\n')
                    records.append(record)
                    self._advance(record)
                simulation.run(on_step)
            report = simulation.report()
            simulation.state.store.save(f'{stem}.model.json')
        except BaseException:
            with open(f'{stem}.json', 'w', encoding='utf-8') as fh:
                json.dump(run_payload(policy_name, trace.seed, None, self.config_hash, trace_hash,
                                      False), fh, indent=2, sort_keys=True)
            logger.warning(f"Run {policy_name} seed {trace.seed} is incomplete after "
                           f"{len(records)} steps")
            raise
        self.runs_completed += 1
        return records, report, trace_hash

    def run(self):
        start_time = time.time()
        self.check_output_dir()
        config = self.config
        total = len(config.seeds) * len(config.policies) * config.world.n_steps
        all_records, reports = [], []
        with self._executor() as executor, self._bar(total):
            for seed in config.seeds:
                trace = self.make_trace(seed)
                seed_reports = []
                for policy_name in config.policies:
                    records, report, trace_hash = self.run_policy(policy_name, trace, executor)
                    all_records.extend(records)
                    seed_reports.append(report)
                counts = above_reference_count({r.policy: r.per_step_acc for r in seed_reports})
                for report in seed_reports:
                    report.above_reference_count = counts[report.policy]
                    self.write_report(report, trace_hash)
                reports.extend(seed_reports)

        self.write_steps(all_records)
        self.write_curves(reports)
        summary = render_summary(reports)
        with open(os.path.join(self.output_dir, 'summary.txt'), 'w', encoding='utf-8') as fh:
            fh.write(f'config {self.config_hash}\n\n')
            fh.write(summary)

        run_time = time.time() - start_time
        if self.steps_simulated and run_time:
            self.print_action_report(run_time)
        return reports

    def write_report(self, report, trace_hash):
        path = os.path.join(self.output_dir, 'runs', f'{report.policy}-seed{report.seed}.json')
        with open(path, 'w', encoding='utf-8') as fh:
            json.dump(run_payload(report.policy, report.seed, report, self.config_hash,
                                  trace_hash, True), fh, indent=2, sort_keys=True)

    def write_steps(self, records):
        path = os.path.join(self.output_dir, 'steps.csv')
        with open(path, 'w', newline='', encoding='utf-8') as fh:
            writer = csv.writer(fh, lineterminator='\n')
            writer.writerow(STEP_COLUMNS)
            for record in records:
                writer.writerow(step_row(record))

    def write_curves(self, reports):
        path = os.path.join(self.output_dir, 'curves.csv')
        with open(path, 'w', newline='', encoding='utf-8') as fh:
            writer = csv.writer(fh, lineterminator='\n')
            writer.writerow(CURVE_COLUMNS)
            for report in reports:
                writer.writerows(curve_rows(report))

    def trace(self):
        """Write the drift trace of every seed without simulating any policy."""
        self.check_output_dir()
        paths = []
        for seed in self.config.seeds:
            trace = self.make_trace(seed)
            path = os.path.join(self.output_dir, f'trace-seed{seed}.jsonl')
            with open(path, 'w', encoding='utf-8') as fh:
                fh.write(json.dumps({'seed': seed, 'config_hash': self.config_hash,
                                     'trace_hash': trace.digest()}, sort_keys=True) + '\n')
                for entry in trace.records():
                    fh.write(json.dumps(entry, sort_keys=True) + '\n')
            paths.append(path)
        return paths

    def sweep(self, param, values):
        """DriftGuard over a range of one threshold, every value on the same trace per seed."""
        start_time = time.time()
        self.check_output_dir()
        configs = [(value, with_sweep_value(self.config, param, value)) for value in values]
        rows = []
        total = len(self.config.seeds) * len(configs) * self.config.world.n_steps
        with self._executor() as executor, self._bar(total):
            for seed in self.config.seeds:
                trace = self.make_trace(seed)
                for value, config in configs:
                    simulation = self.simulate(config, 'driftguard', trace, executor)
                    simulation.run(self._advance)
                    report = simulation.report()
                    self.runs_completed += 1
                    rows.append([param, value, seed, f'{report.mean_acc:.6f}',
                                 f'{report.total_cost:.1f}',
                                 f'{report.total_cost_normalized:.6f}',
                                 f'{report.efficiency:.6f}',
                                 report.event_counts.get('global', 0),
                                 report.event_counts.get('group', 0)])
        path = os.path.join(self.output_dir, 'sweep.csv')
        with open(path, 'w', newline='', encoding='utf-8') as fh:
            writer = csv.writer(fh, lineterminator='\n')
            writer.writerow(SWEEP_COLUMNS)
            writer.writerows(rows)
        run_time = time.time() - start_time
        if self.steps_simulated and run_time:
            self.print_action_report(run_time)
        return rows

    def _executor(self):
        if self.max_concurrency > 1:
            return concurrent.futures.ThreadPoolExecutor(max_workers=self.max_concurrency)
        return contextlib.nullcontext()

    @contextlib.contextmanager
    def _bar(self, total):
        self.pbar = self._progress_bar(total)
        try:
            yield self.pbar
        finally:
            if self.pbar is not None:
                self.pbar.close()
            self.pbar = None


