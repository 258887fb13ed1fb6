"""
Command line interface: run and validate experiment configurations.

    cmlibs-kinetics run --config bench1d_exact --out results/bench1d
    cmlibs-kinetics validate --config my_experiment.ini
    cmlibs-kinetics list-configs
"""
import argparse
import json
import logging
import os
import sys

from cmlibs.kinetics import __version__
from cmlibs.kinetics.general import EXIT_FAILURE, EXIT_SUCCESS, ConfigurationError, KineticsError
from cmlibs.kinetics.runner.config import OUTPUT_FORMATS, bundled_config_names, load_config, validate_config
from cmlibs.kinetics.runner.experiment import run_experiment

logger = logging.getLogger(__name__)

ERROR_FILE = 'error.json'


def _parser():
    parser = argparse.ArgumentParser(prog='cmlibs-kinetics', description='Reaction rate estimation experiments.')
    parser.add_argument('--version', action='version', version=f'%(prog)s {__version__}')
    parser.add_argument('--log-level', default='WARNING', choices=('DEBUG', 'INFO', 'WARNING', 'ERROR'),
                        help='Logging level (default WARNING)')
    commands = parser.add_subparsers(dest='command', required=True)

    run = commands.add_parser('run', help='Run an experiment')
    run.add_argument('--config', required=True, help='Configuration file, bundled configuration name or run manifest')
    run.add_argument('--seed', type=int, default=None, help='Master seed, overriding the configuration')
    run.add_argument('--workers', type=int, default=os.cpu_count() or 1, help='Worker processes (default: CPU count)')
    run.add_argument('--out', default=None, help='Output directory, overriding the configuration')
    run.add_argument('--format', dest='fmt', choices=OUTPUT_FORMATS, default=None,
                     help='csv, or dat to also write rate series as gnuplot data')

    validate = commands.add_parser('validate', help='Check a configuration without running it')
    validate.add_argument('--config', required=True, help='Configuration file or bundled configuration name')

    commands.add_parser('list-configs', help='List the bundled configurations')
    return parser


def _report_error(error, directory):
    record = error.as_record() if isinstance(error, KineticsError) else \
        {'error': 'internal', 'type': type(error).__name__, 'message': str(error)}
    record['exit_code'] = getattr(error, 'exit_code', EXIT_FAILURE)
    text = json.dumps(record, indent=2, sort_keys=True)
    print(text, file=sys.stderr)
    if directory:
        try:
            os.makedirs(directory, exist_ok=True)
            with open(os.path.join(directory, ERROR_FILE), 'w') as f:
                f.write(text + '\n')
        except OSError as e:
            logger.warning('Could not write %s to %s: %s', ERROR_FILE, directory, e)
    return record['exit_code']


def main(argv=None):
    """
    Run the command line interface.

    :param argv: Arguments, sys.argv[1:] by default.
    :return: Exit code: 0 success, 2 configuration error, 3 numerical error,
        4 insufficient data.
    """
    args = _parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format='%(levelname)s %(name)s: %(message)s')
    if args.command == 'list-configs':
        for name in bundled_config_names():
            print(name)
        return EXIT_SUCCESS

    directory = None
    try:
        if args.command == 'validate':
            resolved = validate_config(args.config)
            print('ok')
            print(json.dumps(resolved, indent=2, sort_keys=True))
            return EXIT_SUCCESS
        directory = args.out
        config = load_config(args.config)
        config = config.with_overrides(seed=args.seed, out=args.out, fmt=args.fmt)
        directory = config.directory
        if args.workers < 1:
            raise ConfigurationError(f'--workers must be at least 1, got {args.workers}.')
        names = run_experiment(config, workers=args.workers)
    except KineticsError as e:
        return _report_error(e, directory)
    except Exception as e:
        logger.exception('Experiment failed')
        return _report_error(e, directory)
    print(f'Wrote {len(names)} files to {config.directory}')
    return EXIT_SUCCESS


if __name__ == '__main__':
    sys.exit(main())
