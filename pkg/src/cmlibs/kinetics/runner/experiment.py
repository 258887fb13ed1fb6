"""
Runs configured experiments and writes their outputs: rate series, error
analyses, flux logs and milestone statistics as CSV, rate series also as
gnuplot .dat files, and a manifest holding the resolved configuration.
"""
import logging
import os

import numpy
import scipy.sparse
import scipy.sparse.csgraph

from cmlibs.kinetics import __version__
from cmlibs.kinetics.dynamics.propagator import benchmark_dynamics
from cmlibs.kinetics.fileio import (
    write_crossing_stats, write_flux_log, write_manifest, write_rate_dat, write_rate_series, write_table,
    write_transition_matrix)
from cmlibs.kinetics.general import DiagnosticError, RngStream
from cmlibs.kinetics.geometry.region import parse_region
from cmlibs.kinetics.markov.msm import (
    cell_weights, coarse_from_fine, eigen_sensitivity, multinomial_resample, non_markovity_R, rate_vs_lagtime,
    statistical_error_curve, systematic_error)
from cmlibs.kinetics.markov.partition import (
    GridLocator, fine_partition, optimal_cells, partition_1d, partition_2d_slanted)
from cmlibs.kinetics.markov.spectral import (
    DENSE_LIMIT, BasinSpec, TransitionMatrix, build_fine_matrix, committor, exact_rates, mean_first_passage_times,
    spectral_decompose, stationary_distribution)
from cmlibs.kinetics.sampling.milestoning import (
    mean_passage_time, milestone_matrix, milestones_from_partition, run_milestoning)
from cmlibs.kinetics.sampling.rts import (
    free_energy, mean_flux_matrix, multicolor_mfpt, rate_from_flux, rate_series, run_rts)

logger = logging.getLogger(__name__)

MANIFEST_NAME = 'manifest.json'


class OutputDirectory(object):
    """
    Collects the files written by an experiment.
    """

    def __init__(self, directory, fmt='csv'):
        os.makedirs(directory, exist_ok=True)
        self._directory = directory
        self._format = fmt
        self._names = []

    @property
    def directory(self):
        return self._directory

    @property
    def names(self):
        return list(self._names)

    def path(self, name):
        if name not in self._names:
            self._names.append(name)
        return os.path.join(self._directory, name)

    def rate_series(self, stem, series):
        write_rate_series(self.path(f'{stem}.csv'), series)
        if self._format == 'dat':
            write_rate_dat(self.path(f'{stem}.dat'), series)

    def table(self, name, header, rows):
        write_table(self.path(name), header, rows)


class _Setup(object):
    """
    Dynamics, fine chain and basins shared by the experiment kinds.
    """

    def __init__(self, config):
        self.config = config
        self.dynamics = benchmark_dynamics(config.benchmark, **config.dynamics_overrides())
        self.regions = {name: parse_region(text) for name, text in config.basins.items()}
        self.fine = build_fine_matrix(self.dynamics)
        self.basins = BasinSpec.from_regions(self.fine.states, self.regions['a'], self.regions['b'], self.regions['abar'])
        self._rho = None
        self._partition = None

    @property
    def dt(self):
        return self.dynamics.dt

    @property
    def rho(self):
        if self._rho is None:
            self._rho = stationary_distribution(self.fine)
        return self._rho

    @property
    def partition(self):
        if self._partition is None:
            self._partition = build_partition(self.config, self.dynamics, self.fine, self.basins)
        return self._partition


def build_partition(config, dynamics, fine=None, basins=None):
    """
    Get the partition described by the [partition] section.

    :param fine: Fine TransitionMatrix, needed for committor level sets.
    :param basins: BasinSpec over the fine states, needed for committor level sets.
    :return: CellPartition.
    """
    settings = config.partition
    domain = dynamics.params.domain
    if settings['kind'] == 'intervals':
        return partition_1d(domain, settings['n_cells'])
    if settings['kind'] == 'stripes':
        return partition_2d_slanted(domain, settings['n_cells'], settings['theta'])
    if settings['kind'] == 'fine':
        return fine_partition(dynamics)
    values = committor(fine, basins)
    states = fine.states if numpy.ndim(fine.states) == 1 else None
    return optimal_cells(values, settings['epsilon'], locator=GridLocator.from_dynamics(dynamics), fine_states=states)


def _exact(setup, outputs):
    estimate = exact_rates(setup.fine, setup.basins, setup.dt)
    outputs.table('exact_rates.csv', ('rate_fwd', 'rate_bwd', 'mean_passage_time'),
                  [(estimate.forward, estimate.backward, estimate.mean_passage_time)])
    decomposition = spectral_decompose(setup.fine, min(5, setup.fine.dimension), abar=setup.basins.abar)
    timescales = decomposition.implied_timescales(setup.dt)
    outputs.table('timescales.csv', ('k', 'timescale'), [(k + 2, float(t)) for k, t in enumerate(timescales)])
    values = committor(setup.fine, setup.basins)
    states = setup.fine.states
    if numpy.ndim(states) == 1:
        outputs.table('committor.csv', ('x', 'committor'), zip(states.tolist(), values.tolist()))
    else:
        outputs.table('committor.csv', ('x', 'y', 'committor'),
                      [(float(s[0]), float(s[1]), float(v)) for s, v in zip(states, values)])
    return estimate


def _msm_sweep(setup, outputs, workers):
    config = setup.config
    settings = config.msm
    partition = setup.partition
    rng = RngStream(config.seed, 'msm')
    series = rate_vs_lagtime(setup.fine, partition, settings['tau_list'], setup.dt, setup.basins, dynamics=setup.dynamics,
                             n_samples_per_cell=settings['samples_per_cell'], rng=rng, workers=workers)
    outputs.rate_series('rates_msm', series)

    error_taus = settings['error_taus'] or settings['tau_list']
    curve = statistical_error_curve(setup.fine, error_taus, settings['budget'], setup.dt, partition=partition)
    header = ['tau', 'samples', 'mu2', 'sigma_mu', 'relative_error', 'cost_factor', 'decay_factor']
    rows = [[e.tau, e.samples, e.mu2, e.sigma_mu, e.relative_error, e.cost_factor, e.decay_factor] for e in curve]
    if settings['resamples']:
        header.append('empirical_sigma_mu')
        for row, error in zip(rows, curve):
            row.append(_resampled_spread(setup, partition, error.tau, error.samples, settings['resamples'], rng))
    outputs.table('statistical_error.csv', header, rows)

    summary = []
    for tau in settings['sensitivity_taus']:
        coarse = coarse_from_fine(setup.fine, partition, tau, rho=setup.rho)
        sensitivity = eigen_sensitivity(coarse)
        outputs.table(f'sensitivity_tau{tau}.csv', ['cell'] + [str(c) for c in range(coarse.dimension)],
                      [[i] + row.tolist() for i, row in enumerate(sensitivity.entries)])
        summary.append((tau, float(numpy.max(numpy.abs(sensitivity.entries))), sensitivity.max_minor()))
    outputs.table('sensitivity.csv', ('tau', 'max_entry', 'max_minor'), summary)

    if setup.fine.dimension <= DENSE_LIMIT:
        shifts = [systematic_error(setup.fine, partition, tau) for tau in settings['tau_list']]
        outputs.table('systematic_error.csv', ('tau', 'predicted_shift', 'exact_shift'),
                      [(s.tau, s.predicted, s.exact) for s in shifts])
    else:
        logger.info('Skipping systematic error analysis for %d fine states', setup.fine.dimension)

    if settings['markovity_steps']:
        outputs.table('non_markovity.csv', ('tau', 'R'), _non_markovity(setup, partition, settings, rng))
    return series


def _resampled_spread(setup, partition, tau, samples, resamples, rng):
    """
    Get the spread of mu_2 over empirical matrices drawn with the given
    samples per row from the exact coarse matrix.
    """
    coarse = coarse_from_fine(setup.fine, partition, tau, rho=setup.rho)
    values = []
    for k in range(resamples):
        drawn = multinomial_resample(coarse, samples, rng.derive('resample', tau, k))
        values.append(float(numpy.real(spectral_decompose(drawn, min(3, drawn.dimension)).eigenvalue(2))))
    return float(numpy.std(values, ddof=1)) if len(values) > 1 else 0.0


def _non_markovity(setup, partition, settings, rng):
    """
    Get R of the cell sequence of one long trajectory, sampled every tau steps.
    """
    dynamics = setup.dynamics
    stream = rng.derive('markovity')
    x = dynamics.uniform_in_region(setup.regions['a'], 1, stream.derive('start'))
    labels = numpy.empty(settings['markovity_steps'], dtype=numpy.int64)
    move = stream.derive('run')
    for n in range(labels.size):
        x = dynamics.step(x, move)
        labels[n] = partition.assign(dynamics.coordinates(x))[0]
    rows = []
    for tau in settings['tau_list']:
        sequence = labels[::tau]
        if sequence.size < 1000 or numpy.unique(sequence).size < 2:
            break
        rows.append((tau, non_markovity_R(sequence)))
    return rows


def _rts(setup, outputs):
    config = setup.config
    settings = config.rts
    colours = list(settings['colours'])
    regions = [setup.regions[name] for name in colours]
    rng = RngStream(config.seed, 'rts')
    ensemble, records = run_rts(setup.dynamics, setup.partition, regions, settings['walkers'], settings['steps'], rng,
                                max_group_size=settings['max_group_size'], colour_masses=settings['colour_masses'],
                                equilibration_steps=settings['equilibration_steps'],
                                equilibration_rounds=settings['equilibration_rounds'],
                                checkpoint=outputs.path('checkpoint.txt'), checkpoint_every=settings['checkpoint_every'])
    exact = exact_rates(setup.fine, setup.basins, setup.dt) if colours[:2] == ['a', 'b'] else None
    outputs.rate_series('rates_rts', rate_series(records, settings['burn_in'], setup.dt, settings['points'], exact))
    write_flux_log(outputs.path('flux_log.csv'), records, colours)
    energy = free_energy(ensemble, setup.dynamics.beta)
    outputs.table('free_energy.csv', ('cell', 'free_energy'), [(c, float(e)) for c, e in enumerate(energy)])
    estimate = rate_from_flux(records, settings['burn_in'], setup.dt)
    drift = abs(ensemble.total_mass() - 1.0)
    outputs.table('rts_summary.csv', ('rate_fwd', 'rate_bwd', 'stderr_fwd', 'stderr_bwd', 'weight_drift'),
                  [(estimate.forward, estimate.backward, estimate.stderr_forward, estimate.stderr_backward, drift)])
    if len(colours) > 2:
        flux = mean_flux_matrix(records, settings['burn_in'], setup.dt)
        rows = []
        for target in range(len(colours)):
            times = multicolor_mfpt(flux, setup.dt, target)
            rows.extend((colours[source], colours[target], float(times[source]))
                        for source in range(len(colours)) if source != target)
        outputs.table('mfpt.csv', ('source', 'target', 'mean_passage_time'), rows)
    return estimate


def _beyond(milestones, cemetery, start_cell):
    """
    Get the cells separated from start_cell by the cemetery milestone.
    """
    pairs = [pair for i, pair in enumerate(milestones.pairs) if i != cemetery]
    size = 1 + max(max(pair) for pair in milestones.pairs)
    if pairs:
        a, b = numpy.array(pairs).T
        graph = scipy.sparse.csr_matrix((numpy.ones(a.size), (a, b)), shape=(size, size))
    else:
        graph = scipy.sparse.csr_matrix((size, size))
    _, labels = scipy.sparse.csgraph.connected_components(graph, directed=False)
    cells = numpy.flatnonzero(labels != labels[start_cell])
    if cells.size == 0:
        # the cemetery does not cut the cell graph; use its far cell
        cells = numpy.array([milestones.pair(cemetery)[1]])
    return cells


def _reference_passage_time(setup, milestones, source, labels):
    """
    Get the mean time to cross the cemetery from the fine states bordering the
    source milestone, weighted by the stationary distribution.
    """
    a, b = milestones.pair(source)
    beyond = _beyond(milestones, milestones.cemetery, a)
    target = numpy.isin(labels, beyond)
    times = mean_first_passage_times(setup.fine, target, setup.dt)
    neighbours = setup.dynamics.neighbour_pairs()
    first, second = labels[neighbours[:, 0]], labels[neighbours[:, 1]]
    across = ((first == a) & (second == b)) | ((first == b) & (second == a))
    border = numpy.unique(neighbours[across].ravel())
    border = border[~target[border]]
    weights = setup.rho[border]
    return float(numpy.sum(weights * times[border]) / numpy.sum(weights))


def _milestoning(setup, outputs, workers):
    config = setup.config
    settings = config.milestoning
    partition = setup.partition
    milestones = milestones_from_partition(partition, setup.dynamics, cemetery=settings['cemetery'])
    source = 0 if settings['source'] is None else milestones.locate(settings['source'])
    rng = RngStream(config.seed)
    stats = run_milestoning(setup.dynamics, partition, milestones, settings['steps_per_cell'], rng,
                            n_walkers=settings['walkers'], workers=workers)
    weights = cell_weights(setup.rho, partition, setup.fine.states)
    matrix, excluded = milestone_matrix(stats, milestones, weights)
    write_transition_matrix(outputs.path('milestone_matrix.csv'), matrix)
    write_crossing_stats(outputs.path('crossings.csv'), stats, milestones)
    kept = [i for i in range(milestones.size) if i not in excluded]
    if milestones.cemetery not in kept or source not in kept:
        raise DiagnosticError('The source or cemetery milestone was never visited.',
                              details={'excluded': [milestones.pair(i) for i in excluded]})
    entries = matrix.dense()[numpy.ix_(kept, kept)]
    numpy.fill_diagonal(entries, 0.0)
    numpy.fill_diagonal(entries, 1.0 - entries.sum(axis=1))
    reduced = TransitionMatrix(entries, states=numpy.array([milestones.pair(i) for i in kept]))
    times = mean_passage_time(reduced, kept.index(milestones.cemetery), setup.dt)
    outputs.table('passage_times.csv', ('cell_a', 'cell_b', 'mean_passage_time'),
                  [(*milestones.pair(i), float(t)) for i, t in zip(kept, times)])
    labels = partition.check_cover(setup.fine.states)
    estimate = float(times[kept.index(source)])
    reference = _reference_passage_time(setup, milestones, source, labels)
    outputs.table('milestoning_summary.csv',
                  ('source_a', 'source_b', 'cemetery_a', 'cemetery_b', 'mean_passage_time', 'exact_mean_passage_time',
                   'ratio', 'reflection_failures'),
                  [(*milestones.pair(source), *milestones.pair(milestones.cemetery), estimate, reference,
                    estimate / reference, stats.reflection_failures)])
    return estimate, reference


def _compare_all(setup, outputs, workers):
    exact = _exact(setup, outputs)
    msm_series = _msm_sweep(setup, outputs, workers)
    rts_estimate = _rts(setup, outputs)
    milestoning_time, reference_time = _milestoning(setup, outputs, workers)
    nan = float('nan')
    rows = [
        ('exact', exact.forward, exact.backward, 0.0, 0.0),
        (f'msm_tau{int(msm_series.index[-1])}', float(msm_series.forward[-1]), float(msm_series.backward[-1]),
         float(msm_series.stderr_forward[-1]), float(msm_series.stderr_backward[-1])),
        ('rts', rts_estimate.forward, rts_estimate.backward, rts_estimate.stderr_forward, rts_estimate.stderr_backward),
        ('milestoning', 1.0 / milestoning_time, nan, nan, nan),
        ('milestoning_reference', 1.0 / reference_time, nan, nan, nan),
    ]
    outputs.table('comparison.csv', ('method', 'rate_fwd', 'rate_bwd', 'stderr_fwd', 'stderr_bwd'), rows)


def run_experiment(config, workers=1):
    """
    Run the experiment of a configuration and write its outputs and manifest
    to the configured output directory.

    :param config: ExperimentConfig.
    :param workers: Worker processes for parallel sampling.
    :return: Names of the files written.
    """
    outputs = OutputDirectory(config.directory, config.format)
    logger.info('Running %s experiment "%s" with seed %d', config.kind, config.name, config.seed)
    setup = _Setup(config)
    if config.kind == 'exact':
        _exact(setup, outputs)
    elif config.kind == 'msm_sweep':
        _msm_sweep(setup, outputs, workers)
    elif config.kind == 'rts':
        _rts(setup, outputs)
    elif config.kind == 'milestoning':
        _milestoning(setup, outputs, workers)
    else:
        _compare_all(setup, outputs, workers)
    names = outputs.names + [MANIFEST_NAME]
    write_manifest(outputs.path(MANIFEST_NAME), config.to_dict(), config.seed, __version__, names)
    logger.info('Wrote %d files to %s', len(names), outputs.directory)
    return sorted(names)
