#!/usr/bin/env python3
import argparse
import logging
import os
import sys

from src.config import load_config
from src.experiment import SWEEP_PARAMS, Experiment, compare

__version__ = '0.3.1'

PROGRAM_DESCRIPTION = """\
Deterministic simulator for drift-aware federated continual learning.
A fleet of devices sees its data distribution drift over discrete time steps. Each
policy decides when to retrain, which devices take part and which parameters change;
the simulator reports accuracy, retraining FLOPs and their ratio for every policy on
the same drift trace.
"""

logger = logging.getLogger('driftguard')


def _add_config_options(parser):
    parser.add_argument(
        '--config',
        required=True,
        help="""\
Experiment configuration file (JSON).
""",
    )

    parser.add_argument(
        '--seed',
        type=int,
        action='append',
        help="""\
Master seed to run instead of the configured seed list.
Repeat the flag to run several seeds.
""",
    )

    parser.add_argument(
        '--out',
        help="""\
Output directory, overriding the configured `output_dir`.
""",
    )


def parse_args(args=sys.argv[1:]):
    parser = argparse.ArgumentParser(
        description=PROGRAM_DESCRIPTION,
        formatter_class=argparse.RawTextHelpFormatter)

    parser.version = f"v{__version__}"

    parser.add_argument(
        '-v',
        '--version',
        action='version',
    )

    parser.add_argument(
        '-c',
        '--max-concurrency',
        type=int,
        default=1,
        choices=range(1, 255),
        metavar='1-255',
        help="Sets the number of threads training devices in parallel. "
             "Defaults to 1.  Results do not depend on this value."
    )

    exclusive_group_debug_silent = parser.add_mutually_exclusive_group()

    exclusive_group_debug_silent.add_argument(
        '--debug',
        action='store_true',
        default=False,
        help="""\
Enable debugging.
""",
    )

    exclusive_group_debug_silent.add_argument(
        '--quiet',
        action='store_true',
        default=False,
        help="""\
Run without output.
""",
    )

    exclusive_group_debug_silent.add_argument(
        '--progress',
        action='store_true',
        default=False,
        help="""\
Run with progressbar output.
""",
    )

    parser.add_argument(
        '--log',
        action='store',
        help="""\
Specify a log file to write to.
This flag can be used in conjunction with the flag `--quiet` or `--progress`.
""",
    )

    commands = parser.add_subparsers(dest='command', metavar='COMMAND')
    commands.required = True

    run = commands.add_parser(
        'run', help="Run every configured policy on one shared drift trace per seed.")
    _add_config_options(run)

    trace = commands.add_parser(
        'trace', help="Write the drift trace of every seed without running any policy.")
    _add_config_options(trace)

    sweep = commands.add_parser(
        'sweep', help="Run DriftGuard over a range of values of one threshold.")
    _add_config_options(sweep)
    sweep.add_argument(
        '--param',
        required=True,
        choices=SWEEP_PARAMS,
        help="Threshold to vary.",
    )
    sweep.add_argument(
        '--values',
        required=True,
        nargs='+',
        type=float,
        help="Values to try, e.g. --values 0.48 0.51 0.55 0.59",
    )

    comparison = commands.add_parser(
        'compare', help="Render the efficiency table of finished run reports.")
    comparison.add_argument(
        'reports',
        nargs='+',
        metavar='REPORT',
        help="Run report files (runs/<policy>-seed<seed>.json).",
    )

    return parser.parse_args(args)


def setup_logging(options):
    """Configure logging."""
    root = logging.getLogger('')
    root.setLevel(logging.WARNING)
    formatter = logging.Formatter(
        '[%(asctime)s] - [%(levelname)s] - %(message)s', '%Y-%m-%d %H:%M:%S')
    ch = logging.StreamHandler()
    ch.setFormatter(formatter)
    root.addHandler(ch)
    if not options.quiet ^ options.progress:
        logger.setLevel(options.debug and logging.DEBUG or logging.INFO)
    else:
        logger.setLevel(logging.WARNING)
    if options.log:
        logfile = os.path.expanduser(options.log)
        fh = logging.FileHandler(logfile)
        fh.setFormatter(formatter)
        logger.addHandler(fh)
    logger.debug("Debug logging output enabled.")
    logger.debug("Running driftguard version %s", __version__)


def main(options):
    if options.command == 'compare':
        summary = compare(options.reports)
        print(summary, end='')
        return summary

    config = load_config(options.config).with_overrides(seeds=options.seed,
                                                         output_dir=options.out)
    experiment = Experiment(
        config,
        progress=options.progress,
        max_concurrency=options.max_concurrency,
    )
    if options.command == 'trace':
        return experiment.trace()
    if options.command == 'sweep':
        return experiment.sweep(options.param, options.values)
    return experiment.run()


if __name__ == '__main__':
    try:
        options = parse_args()
        setup_logging(options)
        main(options)
    except Exception as e:
        logger.warning(e)
        sys.exit(1)
    except KeyboardInterrupt:
        logger.error("Exiting driftguard...")
        sys.exit(1)
    sys.exit(0)
