"""
Experiment configuration files.

A configuration is a single INI file with the sections experiment, dynamics,
partition, basins, msm, rts, milestoning and output. Lists are whitespace
separated. Only [experiment] kind and seed and [dynamics] benchmark are
mandatory; every other key has a default.
"""
import configparser
import dataclasses
import logging
import math
import os
import re

from cmlibs.kinetics.dynamics.propagator import benchmark_dynamics
from cmlibs.kinetics.dynamics.potential import benchmark_names
from cmlibs.kinetics.fileio import read_manifest
from cmlibs.kinetics.general import ConfigurationError
from cmlibs.kinetics.geometry.region import parse_region
from cmlibs.kinetics.markov.msm import DEFAULT_TAU_LIST

logger = logging.getLogger(__name__)

EXPERIMENT_KINDS = ('exact', 'msm_sweep', 'rts', 'milestoning', 'compare_all')
PARTITION_KINDS = ('intervals', 'stripes', 'fine', 'levelsets')
OUTPUT_FORMATS = ('csv', 'dat')
CONFIG_DIRECTORY = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'configs')

_DEFAULT_PARTITIONS = {
    'bench1d': ('intervals', 32),
    'bench2d': ('stripes', 20),
    'fig1d': ('fine', None),
}

_REQUIRED = object()


def _integer(text):
    return int(text)


def _number(text):
    value = float(text)
    if not math.isfinite(value):
        raise ValueError(f'"{text}" is not a finite number')
    return value


def _integers(text):
    return tuple(int(v) for v in text.split())


def _numbers(text):
    return tuple(_number(v) for v in text.split())


def _names(text):
    names = tuple(text.split())
    if not names:
        raise ValueError('the list is empty')
    return names


def _pair(text):
    values = _integers(text)
    if len(values) != 2:
        raise ValueError(f'expected two cell indices, got "{text}"')
    return values


def _choice(options):
    def parse(text):
        value = text.strip().lower()
        if value not in options:
            raise ValueError(f'"{text}" is not one of {", ".join(options)}')
        return value
    return parse


_SCHEMA = {
    'experiment': {
        'kind': (_choice(EXPERIMENT_KINDS), _REQUIRED),
        'name': (str, None),
        'seed': (_integer, _REQUIRED),
    },
    'dynamics': {
        'benchmark': (_choice(tuple(benchmark_names())), _REQUIRED),
        'beta': (_number, None),
        'diffusion': (_number, None),
        'dt': (_number, None),
        'spacing': (_number, None),
        'move_prob': (_number, None),
    },
    'partition': {
        'kind': (_choice(PARTITION_KINDS), None),
        'n_cells': (_integer, None),
        'theta': (_number, 0.0),
        'epsilon': (_number, 0.1),
    },
    'msm': {
        'tau_list': (_integers, DEFAULT_TAU_LIST),
        'samples_per_cell': (_integer, 0),
        'budget': (_number, 1.0e5),
        'error_taus': (_integers, ()),
        'resamples': (_integer, 0),
        'sensitivity_taus': (_integers, (1,)),
        'markovity_steps': (_integer, 0),
    },
    'rts': {
        'walkers': (_integer, 10),
        'steps': (_integer, 1000),
        'burn_in': (_integer, 0),
        'points': (_integer, 100),
        'colours': (_names, ('a', 'b')),
        'colour_masses': (_numbers, None),
        'max_group_size': (_integer, None),
        'equilibration_steps': (_integer, 0),
        'equilibration_rounds': (_integer, 0),
        'checkpoint_every': (_integer, 0),
    },
    'milestoning': {
        'steps_per_cell': (_integer, 10000),
        'walkers': (_integer, 1),
        'source': (_pair, None),
        'cemetery': (_pair, None),
    },
    'output': {
        'directory': (str, None),
        'format': (_choice(OUTPUT_FORMATS), 'csv'),
    },
}

_SECTIONS = ('experiment', 'dynamics', 'partition', 'basins', 'msm', 'rts', 'milestoning', 'output')


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    """
    A resolved experiment configuration: every key of every section holds its
    parsed value or default.
    """
    kind: str
    name: str
    seed: int
    dynamics: dict
    partition: dict
    basins: dict
    msm: dict
    rts: dict
    milestoning: dict
    output: dict
    path: str = None

    @property
    def benchmark(self):
        return self.dynamics['benchmark']

    @property
    def directory(self):
        return self.output['directory']

    @property
    def format(self):
        return self.output['format']

    def dynamics_overrides(self):
        return {k: v for k, v in self.dynamics.items() if k != 'benchmark' and v is not None}

    def to_dict(self):
        """
        Get the effective configuration as a dict of sections, lists as lists.
        """
        result = {'experiment': {'kind': self.kind, 'name': self.name, 'seed': self.seed}}
        for section in _SECTIONS[1:]:
            result[section] = {k: list(v) if isinstance(v, tuple) else v for k, v in getattr(self, section).items()}
        return result

    def with_overrides(self, seed=None, out=None, fmt=None):
        """
        Get a copy with the seed, output directory or format replaced.
        """
        output = dict(self.output)
        if out is not None:
            output['directory'] = out
        if fmt is not None:
            if fmt not in OUTPUT_FORMATS:
                raise ConfigurationError(f'Output format must be one of {", ".join(OUTPUT_FORMATS)}, got "{fmt}".')
            output['format'] = fmt
        if seed is not None and not 0 <= int(seed) < 2 ** 64:
            raise ConfigurationError(f'Seed must lie in 0..2^64-1, got {seed}.')
        return dataclasses.replace(self, seed=self.seed if seed is None else int(seed), output=output)


def bundled_config_names():
    """
    Get the names of the configurations shipped with the package.
    """
    return sorted(os.path.splitext(name)[0] for name in os.listdir(CONFIG_DIRECTORY) if name.endswith('.ini'))


def resolve_config_path(source):
    """
    Get the file of a configuration given as a path or as a bundled name.
    """
    if os.path.isfile(source):
        return source
    bundled = os.path.join(CONFIG_DIRECTORY, f'{os.path.splitext(source)[0]}.ini')
    if os.path.isfile(bundled):
        return bundled
    raise ConfigurationError(f'No configuration file or bundled configuration named "{source}".')


def _line_numbers(text):
    """
    Map (section, key) to the line it is set on; (section, None) to the header line.
    """
    lines = {}
    section = None
    for number, raw in enumerate(text.splitlines(), 1):
        stripped = raw.strip()
        if not stripped or stripped[0] in '#;':
            continue
        if stripped.startswith('[') and ']' in stripped:
            section = stripped[1:stripped.index(']')].strip()
            lines.setdefault((section, None), number)
        elif section is not None and raw[:1] not in ' \t':
            key = re.split('[=:]', stripped, maxsplit=1)[0].strip().lower()
            lines[(section, key)] = number
    return lines


def _as_text(value):
    if isinstance(value, (list, tuple)):
        return ' '.join(_as_text(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text, path=None):
    """
    Parse and validate configuration text.

    :param text: INI text.
    :param path: Optional file name, used for the default experiment name.
    :return: ExperimentConfig.
    """
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=('#', ';'),
                                       default_section='defaults')
    try:
        parser.read_string(text, source=path or '<config>')
    except configparser.ParsingError as e:
        line = e.errors[0][0] if e.errors else None
        raise ConfigurationError(f'Cannot parse configuration: {e.message.splitlines()[0]}', line=line)
    except configparser.Error as e:
        raise ConfigurationError(f'Cannot parse configuration: {e.message}', line=getattr(e, 'lineno', None))
    sections = {name: dict(parser.items(name)) for name in parser.sections()}
    return _build(sections, _line_numbers(text), path)


def _build(sections, lines, path):
    problems = []

    def problem(section, key, message):
        line = lines.get((section, key), lines.get((section, None)))
        problems.append({'section': section, 'key': key, 'line': line, 'message': message})

    values = {}
    for section in sections:
        if section not in _SECTIONS:
            problem(section, None, f'Unknown section [{section}].')
    for section, schema in _SCHEMA.items():
        given = sections.get(section, {})
        for key in given:
            if key not in schema:
                problem(section, key, f'Unknown key "{key}" in [{section}].')
        resolved = {}
        for key, (parse, default) in schema.items():
            if key in given:
                try:
                    resolved[key] = parse(given[key])
                except ValueError as e:
                    problem(section, key, f'Invalid value for {key}: {e}.')
                    resolved[key] = None if default is _REQUIRED else default
            elif default is _REQUIRED:
                problem(section, key, f'Missing mandatory key "{key}" in [{section}].')
                resolved[key] = None
            else:
                resolved[key] = default
        values[section] = resolved
    values['basins'] = {k: ' '.join(v.split()) for k, v in sections.get('basins', {}).items()}
    _check(values, problem)
    if problems:
        summary = '; '.join(f"line {p['line']}: {p['message']}" if p['line'] else p['message'] for p in problems)
        raise ConfigurationError(f'Invalid configuration {path or ""}: {summary}', problems=problems)
    experiment = values.pop('experiment')
    name = experiment['name'] or (os.path.splitext(os.path.basename(path))[0] if path else 'experiment')
    if values['output']['directory'] is None:
        values['output']['directory'] = os.path.join('results', name)
    return ExperimentConfig(experiment['kind'], name, experiment['seed'], path=path, **values)


def _check(values, problem):
    """
    Cross-field checks, reporting every problem found.
    """
    seed = values['experiment']['seed']
    if seed is not None and not 0 <= seed < 2 ** 64:
        problem('experiment', 'seed', f'Seed must lie in 0..2^64-1, got {seed}.')
    dimension = _check_dynamics(values['dynamics'], problem)
    _check_partition(values['partition'], values['dynamics']['benchmark'], dimension, problem)
    _check_basins(values['basins'], dimension, problem)
    _check_msm(values['msm'], problem)
    _check_rts(values['rts'], values['basins'], problem)
    _check_milestoning(values['milestoning'], values['partition'], problem)


def _check_dynamics(dynamics, problem):
    if dynamics['benchmark'] is None:
        return None
    overrides = {k: v for k, v in dynamics.items() if k != 'benchmark' and v is not None}
    try:
        return benchmark_dynamics(dynamics['benchmark'], **overrides).dimension
    except (ConfigurationError, ValueError) as e:
        problem('dynamics', None, str(e))
        return None


def _check_partition(partition, benchmark, dimension, problem):
    kind, n_cells = _DEFAULT_PARTITIONS.get(benchmark, (None, None))
    if partition['kind'] is None:
        partition['kind'] = kind
    if partition['n_cells'] is None and partition['kind'] in ('intervals', 'stripes'):
        partition['n_cells'] = n_cells or 2
    kind = partition['kind']
    if kind in ('intervals', 'stripes') and partition['n_cells'] < 2:
        problem('partition', 'n_cells', f'A partition needs at least 2 cells, got {partition["n_cells"]}.')
    if kind == 'intervals' and dimension not in (None, 1):
        problem('partition', 'kind', f'Interval partitions are one dimensional, the dynamics has dimension {dimension}.')
    if kind == 'stripes':
        if dimension not in (None, 2):
            problem('partition', 'kind', f'Stripe partitions are two dimensional, the dynamics has dimension {dimension}.')
        theta = partition['theta']
        if not 0.0 <= theta < 90.0:
            problem('partition', 'theta', f'Stripe angle theta must satisfy 0 <= theta < 90, got {theta}: as theta '
                    'approaches 90 the boundaries become parallel to the reaction coordinate and the cells no '
                    'longer resolve the transition.')
    if kind == 'levelsets' and not 0.0 < partition['epsilon'] <= 1.0:
        problem('partition', 'epsilon', f'Level set width must satisfy 0 < epsilon <= 1, got {partition["epsilon"]}.')


def _check_basins(basins, dimension, problem):
    for name in ('a', 'b', 'abar'):
        if name not in basins:
            problem('basins', None, f'Basin "{name}" is not defined in [basins].')
    for name, text in basins.items():
        try:
            region = parse_region(text)
        except ConfigurationError as e:
            problem('basins', name, str(e))
            continue
        if dimension is not None and region.dimension != dimension:
            problem('basins', name, f'Basin "{name}" has dimension {region.dimension}, the dynamics has dimension {dimension}.')


def _check_msm(msm, problem):
    taus = msm['tau_list']
    if not taus:
        problem('msm', 'tau_list', 'Lag time list is empty.')
    elif taus[0] < 1 or any(b <= a for a, b in zip(taus, taus[1:])):
        problem('msm', 'tau_list', f'Lag times must be positive and strictly increasing, got {list(taus)}.')
    for key in ('error_taus', 'sensitivity_taus'):
        if any(t < 1 for t in msm[key]):
            problem('msm', key, f'Lag times must be positive, got {list(msm[key])}.')
    for key in ('samples_per_cell', 'resamples', 'markovity_steps'):
        if msm[key] < 0:
            problem('msm', key, f'{key} must be non-negative, got {msm[key]}.')
    if 0 < msm['markovity_steps'] < 1000:
        problem('msm', 'markovity_steps', f'Non-Markovity needs at least 1000 steps, got {msm["markovity_steps"]}.')
    if not msm['budget'] > 0.0:
        problem('msm', 'budget', f'Sampling budget must be positive, got {msm["budget"]}.')
    if msm['resamples'] and not msm['error_taus']:
        problem('msm', 'resamples', 'Resampling the statistical error needs error_taus.')


def _check_rts(rts, basins, problem):
    for key in ('walkers', 'steps', 'points'):
        if rts[key] < 1:
            problem('rts', key, f'{key} must be at least 1, got {rts[key]}.')
    for key in ('equilibration_steps', 'equilibration_rounds', 'checkpoint_every'):
        if rts[key] < 0:
            problem('rts', key, f'{key} must be non-negative, got {rts[key]}.')
    if not 0 <= rts['burn_in'] < rts['steps']:
        problem('rts', 'burn_in', f'Burn-in must satisfy 0 <= burn_in < steps, got {rts["burn_in"]}.')
    colours = rts['colours']
    if len(colours) < 2 or len(set(colours)) != len(colours):
        problem('rts', 'colours', f'Need at least 2 distinct basin names, got {list(colours)}.')
    for name in colours:
        if name not in basins:
            problem('rts', 'colours', f'Colour basin "{name}" is not defined in [basins].')
    masses = rts['colour_masses']
    if masses is not None:
        if len(masses) != len(colours) or any(m <= 0.0 for m in masses) or abs(sum(masses) - 1.0) > 1.0e-9:
            problem('rts', 'colour_masses', f'Colour masses {list(masses)} must be positive, one per colour and sum to 1.')
    if rts['max_group_size'] is not None and rts['max_group_size'] < rts['walkers']:
        problem('rts', 'max_group_size', f'max_group_size {rts["max_group_size"]} is below the {rts["walkers"]} walkers per group.')
    if rts['equilibration_rounds'] and not rts['equilibration_steps']:
        problem('rts', 'equilibration_steps', 'Equilibration rounds need equilibration_steps.')


def _check_milestoning(milestoning, partition, problem):
    for key in ('steps_per_cell', 'walkers'):
        if milestoning[key] < 1:
            problem('milestoning', key, f'{key} must be at least 1, got {milestoning[key]}.')
    n_cells = partition['n_cells'] if partition['kind'] in ('intervals', 'stripes') else None
    for key in ('source', 'cemetery'):
        pair = milestoning[key]
        if pair is None:
            continue
        if pair[0] == pair[1] or min(pair) < 0 or (n_cells is not None and max(pair) >= n_cells):
            problem('milestoning', key, f'Milestone {key} {list(pair)} must be two different cells of the partition.')


def load_config(source):
    """
    Load a configuration from an INI file, a bundled configuration name or
    the manifest of an earlier run.

    :param source: Path or bundled name.
    :return: ExperimentConfig.
    """
    path = resolve_config_path(source)
    if path.endswith('.json'):
        manifest = read_manifest(path)
        sections = {section: {k: _as_text(v) for k, v in entries.items() if v is not None}
                    for section, entries in manifest['config'].items()}
        sections.setdefault('experiment', {})['seed'] = str(manifest['seed'])
        return _build(sections, {}, path)
    with open(path) as f:
        text = f.read()
    config = parse_config(text, path)
    logger.info('Loaded %s experiment "%s" from %s', config.kind, config.name, path)
    return config


def validate_config(source):
    """
    Validate a configuration without running it.

    :param source: Path or bundled name.
    :return: The effective configuration as a dict of sections.
    """
    return load_config(source).to_dict()
