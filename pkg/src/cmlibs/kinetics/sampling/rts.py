"""
Reactive trajectory sampling: weighted walkers coloured by the basin they
last visited, kept at a fixed number per cell and colour by the equal weight
resampler, with colour change fluxes giving the rates.
"""
import logging
import math
from dataclasses import dataclass

import numpy
import scipy.sparse
import scipy.sparse.csgraph

from cmlibs.kinetics.general import (
    ConfigurationError, DiagnosticError, InsufficientDataError, ResourceError, RngStream, compensated_sum)
from cmlibs.kinetics.markov.msm import RateSeries
from cmlibs.kinetics.markov.spectral import RateEstimate, TransitionMatrix, mean_first_passage_times, stationary_distribution

logger = logging.getLogger(__name__)

WEIGHT_FLOOR = 1.0e-300
# Relative tolerance for comparing accumulated weights with the target weight.
RESAMPLE_TOLERANCE = 1.0e-9
CHECKPOINT_VERSION = 1


@dataclass
class Walker:
    """
    A weighted sample of the dynamics. colour is the index of the basin the
    walker last visited.
    """
    position: object
    weight: float
    colour: int

    def __post_init__(self):
        if not self.weight > 0.0:
            raise ValueError(f'Walker weight must be positive, got {self.weight}.')
        if self.colour < 0:
            raise ValueError(f'Walker colour must be non-negative, got {self.colour}.')


class Ensemble(object):
    """
    Walkers stored as parallel arrays of positions, weights, colours and cells.
    """

    def __init__(self, positions, weights, colours, cells, partition, target, n_colours=2):
        """
        :param positions: Walker positions, one row or entry per walker.
        :param weights: Positive walker weights.
        :param colours: Colour index of each walker, 0..n_colours-1.
        :param cells: Cell index of each walker.
        :param partition: CellPartition used for resampling.
        :param target: Number of walkers kept per cell and colour.
        :param n_colours: Number of colours.
        """
        if target < 1:
            raise ValueError(f'Target walkers per cell and colour must be at least 1, got {target}.')
        if n_colours < 2:
            raise ValueError(f'Need at least 2 colours, got {n_colours}.')
        self.positions = numpy.asarray(positions)
        self.weights = numpy.asarray(weights, dtype=float)
        self.colours = numpy.asarray(colours, dtype=numpy.int64)
        self.cells = numpy.asarray(cells, dtype=numpy.int64)
        if not (len(self.positions) == self.weights.size == self.colours.size == self.cells.size):
            raise ValueError('Walker arrays have different lengths.')
        if self.weights.size and not numpy.all(self.weights > 0.0):
            raise ValueError('Walker weights must be positive.')
        if self.colours.size and (numpy.min(self.colours) < 0 or numpy.max(self.colours) >= n_colours):
            raise ValueError(f'Walker colours must lie in 0..{n_colours - 1}.')
        self.partition = partition
        self.target = int(target)
        self.n_colours = int(n_colours)

    @classmethod
    def from_walkers(cls, walkers, dynamics, partition, target, n_colours=2):
        positions = numpy.array([w.position for w in walkers])
        cells = partition.assign(dynamics.coordinates(positions)) if walkers else numpy.zeros(0, dtype=numpy.int64)
        return cls(positions, [w.weight for w in walkers], [w.colour for w in walkers], cells, partition, target, n_colours)

    @property
    def size(self):
        return self.weights.size

    def walkers(self):
        return [Walker(p, float(w), int(c)) for p, w, c in zip(self.positions, self.weights, self.colours)]

    def colour_mass(self):
        """
        Get the total weight of each colour, summed without round-off accumulation.
        """
        return numpy.array([compensated_sum(self.weights[self.colours == c]) for c in range(self.n_colours)])

    def total_mass(self):
        return compensated_sum(self.weights)

    def cell_mass(self):
        return numpy.bincount(self.cells, weights=self.weights, minlength=self.partition.n_cells)

    def groups(self):
        """
        Get the walker indices of every non-empty (cell, colour) group, in
        increasing cell then colour order.

        :return: List of ((cell, colour), indices).
        """
        key = self.cells * self.n_colours + self.colours
        order = numpy.argsort(key, kind='stable')
        boundaries = numpy.flatnonzero(numpy.diff(key[order])) + 1
        return [((int(key[g[0]]) // self.n_colours, int(key[g[0]]) % self.n_colours), g)
                for g in numpy.split(order, boundaries) if g.size]

    def copy(self):
        return Ensemble(self.positions.copy(), self.weights.copy(), self.colours.copy(), self.cells.copy(),
                        self.partition, self.target, self.n_colours)

    def __repr__(self):
        return f'Ensemble({self.size} walkers, {self.n_colours} colours, target {self.target})'


@dataclass(frozen=True)
class FluxRecord:
    """
    Weight moved in one step. transfers[c, d] is the weight of colour c
    walkers that turned colour d, colour_mass the weight of each colour at the
    start of the step. cell_flow[i, j] is the weight moving from cell i to
    cell j and cell_mass the weight in each cell at the start of the step.
    """
    step: int
    transfers: numpy.ndarray
    colour_mass: numpy.ndarray
    cell_flow: numpy.ndarray = None
    cell_mass: numpy.ndarray = None

    def __post_init__(self):
        outgoing = self.transfers.sum(axis=1)
        if numpy.any(outgoing > self.colour_mass * (1.0 + 1.0e-12) + 1.0e-300):
            raise ValueError(f'Transferred weight exceeds the source colour weight at step {self.step}.')

    def flux(self, dt):
        """
        Get J[c, d], the transferred weight normalised by the source colour weight and dt.
        """
        with numpy.errstate(divide='ignore', invalid='ignore'):
            flux = self.transfers / self.colour_mass[:, numpy.newaxis] / dt
        return numpy.where(self.colour_mass[:, numpy.newaxis] > 0.0, flux, 0.0)


def _resample_indices(weights, target, rng):
    """
    Select target walkers from a group, with multiplicity, so that all have
    weight W / target, following the split and merge procedure: walkers are
    taken from the light end of the descending weight list; a walker at least
    as heavy as the target weight is split into copies, lighter ones are merged
    pairwise keeping one with probability proportional to its weight.

    :param weights: Weights of the walkers in the group.
    :param target: Number of walkers to return.
    :param rng: RngStream for the merge decisions.
    :return: Tuple of (selected indices, target weight, loop iterations).
    """
    weights = numpy.asarray(weights, dtype=float)
    if weights.size == 0:
        raise ValueError('Cannot resample an empty group.')
    if target < 1:
        raise ValueError(f'Target number of walkers must be at least 1, got {target}.')
    total = compensated_sum(weights)
    tw = total / target
    remaining = weights.tolist()
    pending = [int(i) for i in numpy.argsort(-weights, kind='stable')]
    selected = []
    iterations = 0
    x = pending.pop()
    while True:
        iterations += 1
        wx = remaining[x]
        if wx >= tw * (1.0 - RESAMPLE_TOLERANCE) or not pending:
            copies = max(1, int(math.floor(wx / tw + RESAMPLE_TOLERANCE)))
            copies = min(copies, target - len(selected))
            selected.extend([x] * copies)
            leftover = wx - copies * tw
            if len(selected) < target and leftover > tw * RESAMPLE_TOLERANCE:
                pending.append(x)
                remaining[x] = leftover
            if pending and len(selected) < target:
                x = pending.pop()
            else:
                break
        else:
            y = pending.pop()
            wy = remaining[y]
            wxy = wx + wy
            if rng.uniform() < wy / wxy:
                x = y
            remaining[x] = wxy
    if len(selected) < target:
        # round-off left the group short of its target
        selected.extend([selected[-1]] * (target - len(selected)))
    return numpy.array(selected, dtype=numpy.int64), tw, iterations


def resample(group, target, rng):
    """
    Resample walkers of one cell and colour to target walkers of equal weight
    W / target, W being the total input weight.

    :param group: List of Walker.
    :param target: Number of output walkers.
    :param rng: RngStream.
    :return: List of target Walker.
    """
    if not group:
        raise ValueError('Cannot resample an empty group.')
    indices, tw, _ = _resample_indices([w.weight for w in group], target, rng)
    return [Walker(group[i].position, tw, group[i].colour) for i in indices]


def _apply_weight_floor(weights):
    """
    Fold walkers lighter than WEIGHT_FLOOR into the heaviest walker of the group.

    :return: Tuple of (kept mask, adjusted weights).
    """
    light = weights < WEIGHT_FLOOR
    if not numpy.any(light) or numpy.all(light):
        return numpy.ones(weights.size, dtype=bool), weights
    adjusted = weights.copy()
    adjusted[numpy.argmax(weights)] += compensated_sum(weights[light])
    return ~light, adjusted


def resample_ensemble(ensemble, rng, max_group_size=None):
    """
    Resample every non-empty (cell, colour) group of an ensemble to its target.
    Each group draws from its own stream derived from rng.

    :return: New Ensemble.
    """
    positions, weights, colours, cells = [], [], [], []
    for (cell, colour), indices in ensemble.groups():
        if max_group_size is not None and indices.size > max_group_size:
            raise ResourceError(f'Cell {cell} colour {colour} holds {indices.size} walkers, above the cap of {max_group_size}.')
        kept, group_weights = _apply_weight_floor(ensemble.weights[indices])
        indices = indices[kept]
        selected, tw, iterations = _resample_indices(group_weights[kept], ensemble.target, rng.derive(cell, colour))
        if logger.isEnabledFor(logging.DEBUG):
            logger.debug('Resampled cell %d colour %d: %d walkers to %d of weight %.6e in %d iterations',
                         cell, colour, indices.size, ensemble.target, tw, iterations)
        chosen = indices[selected]
        positions.append(ensemble.positions[chosen])
        weights.append(numpy.full(chosen.size, tw))
        colours.append(numpy.full(chosen.size, colour, dtype=numpy.int64))
        cells.append(numpy.full(chosen.size, cell, dtype=numpy.int64))
    if not positions:
        return ensemble.copy()
    return Ensemble(numpy.concatenate(positions), numpy.concatenate(weights), numpy.concatenate(colours),
                    numpy.concatenate(cells), ensemble.partition, ensemble.target, ensemble.n_colours)


def _check_regions(regions, n_colours):
    if len(regions) != n_colours:
        raise ConfigurationError(f'Need one basin region per colour, got {len(regions)} regions for {n_colours} colours.')


def rts_step(ensemble, dynamics, regions, rng, step, max_group_size=None, track_cells=False):
    """
    Advance the ensemble one step: move every walker, recolour walkers that
    entered the basin of another colour, record the transferred weight, then
    resample every (cell, colour) group to the target.

    The step draws from rng.derive('rts', step) only, so a run resumed at any
    step reproduces the uninterrupted run.

    :param ensemble: Ensemble.
    :param dynamics: Dynamics propagating walker positions.
    :param regions: Basin Region of each colour.
    :param rng: Master RngStream.
    :param step: Step index.
    :param max_group_size: Optional cap on the walkers of a group before resampling.
    :param track_cells: Record cell to cell flows in the FluxRecord.
    :return: Tuple of (new Ensemble, FluxRecord).
    """
    _check_regions(regions, ensemble.n_colours)
    stream = rng.derive('rts', step)
    colour_mass = ensemble.colour_mass()
    positions = dynamics.step(ensemble.positions, stream.derive('move'))
    coordinates = dynamics.coordinates(positions)
    colours = ensemble.colours.copy()
    for colour, region in enumerate(regions):
        colours[region.contains(coordinates)] = colour
    transfers = numpy.zeros((ensemble.n_colours, ensemble.n_colours))
    changed = colours != ensemble.colours
    if numpy.any(changed):
        for source in range(ensemble.n_colours):
            for destination in range(ensemble.n_colours):
                if source != destination:
                    mask = changed & (ensemble.colours == source) & (colours == destination)
                    transfers[source, destination] = compensated_sum(ensemble.weights[mask])
    cells = ensemble.partition.assign(coordinates)
    flow = cell_mass = None
    if track_cells:
        n_cells = ensemble.partition.n_cells
        cell_mass = ensemble.cell_mass()
        flow = numpy.bincount(ensemble.cells * n_cells + cells, weights=ensemble.weights,
                              minlength=n_cells * n_cells).reshape(n_cells, n_cells)
    moved = Ensemble(positions, ensemble.weights, colours, cells, ensemble.partition, ensemble.target, ensemble.n_colours)
    resampled = resample_ensemble(moved, stream.derive('resample'), max_group_size=max_group_size)
    return resampled, FluxRecord(int(step), transfers, colour_mass, flow, cell_mass)


def _block_stderr(series):
    """
    Get the standard error of the mean of a correlated series by block
    averaging. Block lengths double from 1 while at least 16 blocks remain; the
    first length whose error estimate grows by less than 5% on doubling is
    taken as decorrelated, otherwise the longest length is used.
    """
    series = numpy.asarray(series, dtype=float)
    if series.size < 2:
        return numpy.nan
    estimates = []
    length = 1
    while series.size // length >= 16 or length == 1:
        count = series.size // length
        if count < 2:
            break
        blocks = series[:count * length].reshape(count, length).mean(axis=1)
        estimates.append(float(numpy.std(blocks, ddof=1) / numpy.sqrt(count)))
        length *= 2
    for current, following in zip(estimates, estimates[1:]):
        if following <= current * 1.05:
            return current
    return estimates[-1]


def _flux_series(records, burn_in, dt, pair):
    source, destination = pair
    return numpy.array([r.flux(dt)[source, destination] for r in records if r.step >= burn_in])


def rate_from_flux(records, burn_in, dt, forward=(0, 1), backward=(1, 0)):
    """
    Get rates as the mean colour change flux after burn-in, with block
    averaged standard errors.

    :param records: FluxRecord list.
    :param burn_in: Records with step below this are discarded.
    :param dt: Time per step.
    :param forward: Colour pair (source, destination) of the forward reaction.
    :param backward: Colour pair of the backward reaction.
    :return: RateEstimate.
    """
    forward_series = _flux_series(records, burn_in, dt, forward)
    if forward_series.size == 0:
        raise InsufficientDataError(f'No flux records after the burn-in of {burn_in} steps.')
    backward_series = _flux_series(records, burn_in, dt, backward)
    return RateEstimate(float(numpy.mean(forward_series)), float(numpy.mean(backward_series)),
                        _block_stderr(forward_series), _block_stderr(backward_series))


def rate_series(records, burn_in, dt, points=100, exact=None):
    """
    Get the running rate estimates at up to *points* steps after burn-in.

    :param exact: Optional RateEstimate of the exact rates.
    :return: RateSeries indexed by step.
    """
    kept = [r for r in records if r.step >= burn_in]
    if not kept:
        raise InsufficientDataError(f'No flux records after the burn-in of {burn_in} steps.')
    stops = numpy.unique(numpy.linspace(1, len(kept), min(points, len(kept))).astype(numpy.int64))
    steps, forward, backward, stderr_forward, stderr_backward = [], [], [], [], []
    for stop in stops:
        estimate = rate_from_flux(kept[:stop], burn_in, dt)
        steps.append(kept[stop - 1].step)
        forward.append(estimate.forward)
        backward.append(estimate.backward)
        stderr_forward.append(0.0 if numpy.isnan(estimate.stderr_forward) else estimate.stderr_forward)
        stderr_backward.append(0.0 if numpy.isnan(estimate.stderr_backward) else estimate.stderr_backward)
    return RateSeries(steps, forward, backward, stderr_forward, stderr_backward,
                      exact_forward=None if exact is None else exact.forward,
                      exact_backward=None if exact is None else exact.backward, index_name='step')


def mean_flux_matrix(records, burn_in, dt):
    """
    Get the mean colour flux matrix F after burn-in.
    """
    kept = [r.flux(dt) for r in records if r.step >= burn_in]
    if not kept:
        raise InsufficientDataError(f'No flux records after the burn-in of {burn_in} steps.')
    return numpy.mean(kept, axis=0)


def cell_flux_matrix(records, burn_in=0):
    """
    Accumulate cell to cell flows from flux records.

    :return: Tuple (N, T): N[i, j] the weight moved from cell i to j, T[i] the
        weight-steps spent in cell i.
    """
    kept = [r for r in records if r.step >= burn_in and r.cell_flow is not None]
    if not kept:
        raise InsufficientDataError('No cell flows recorded.')
    counts = numpy.sum([r.cell_flow for r in kept], axis=0)
    times = numpy.sum([r.cell_mass for r in kept], axis=0)
    return counts, times


def steady_state_weights(counts, times):
    """
    Solve the balance of cell fluxes
    sum_j W_i N_ij / T_i = sum_j W_j N_ji / T_j
    for the steady state cell weights W, normalised to sum to 1.

    :param counts: N, matrix of weight moved between cells.
    :param times: T, weight-time spent in each cell.
    :return: Weight vector.
    """
    counts = numpy.array(counts, dtype=float)
    times = numpy.asarray(times, dtype=float)
    if counts.ndim != 2 or counts.shape[0] != counts.shape[1] or times.shape != (counts.shape[0],):
        raise ValueError('Flux counts must be square with one time per cell.')
    if numpy.any(counts < 0.0) or numpy.any(times < 0.0):
        raise ValueError('Flux counts and times must be non-negative.')
    size = counts.shape[0]
    if size == 1:
        return numpy.ones(1)
    numpy.fill_diagonal(counts, 0.0)
    with numpy.errstate(divide='ignore', invalid='ignore'):
        generator = numpy.where(times[:, numpy.newaxis] > 0.0, counts / times[:, numpy.newaxis], 0.0)
    count, labels = scipy.sparse.csgraph.connected_components(scipy.sparse.csr_matrix(generator > 0.0),
                                                              directed=True, connection='strong')
    if count > 1:
        components = [numpy.flatnonzero(labels == c).tolist() for c in range(count)]
        raise DiagnosticError(f'Cell flux graph is not strongly connected: {count} components.',
                              details={'components': components})
    outflow = generator.sum(axis=1)
    uniformised = generator / numpy.max(outflow)
    numpy.fill_diagonal(uniformised, 1.0 - uniformised.sum(axis=1))
    return stationary_distribution(TransitionMatrix(numpy.clip(uniformised, 0.0, 1.0)))


def multicolor_mfpt(flux, dt, target):
    """
    Get mean passage times into a target basin from colour fluxes: the step
    matrix is P = dt F off the diagonal, completed so rows sum to 1, and the
    passage times solve (P - I) (T / dt) = -1 off the target.

    :param flux: Mean flux matrix F between coloured basins.
    :param dt: Time per step.
    :param target: Index of the absorbing basin.
    :return: Mean passage time from every basin, 0 for the target.
    """
    flux = numpy.array(flux, dtype=float)
    if flux.ndim != 2 or flux.shape[0] != flux.shape[1]:
        raise ValueError(f'Flux matrix must be square, got shape {flux.shape}.')
    entries = dt * flux
    numpy.fill_diagonal(entries, 0.0)
    if numpy.any(entries < 0.0):
        raise ConfigurationError('Fluxes must be non-negative.')
    stay = 1.0 - entries.sum(axis=1)
    if numpy.any(stay < -1.0e-12):
        raise ConfigurationError('Flux times dt exceeds 1 on some rows; the fluxes cannot be normalised.')
    numpy.fill_diagonal(entries, numpy.clip(stay, 0.0, None))
    return mean_first_passage_times(TransitionMatrix(entries), [target], dt)


def initialize_ensemble(dynamics, partition, regions, target, rng, colour_masses=None, walkers_per_region=None,
                        max_group_size=None):
    """
    Seed walkers uniformly in each basin with the colour of that basin and
    Boltzmann weights, normalised so each colour carries its initial mass,
    then resample to the target per cell and colour.

    :param dynamics: Dynamics of the walkers.
    :param partition: CellPartition.
    :param regions: Basin Region of each colour.
    :param target: Walkers per cell and colour.
    :param rng: Master RngStream.
    :param colour_masses: Initial mass of each colour, summing to 1; equal by default.
    :param walkers_per_region: Walkers seeded per basin before resampling.
    :return: Ensemble.
    """
    n_colours = len(regions)
    if n_colours < 2:
        raise ConfigurationError('Need at least 2 basins.')
    masses = numpy.full(n_colours, 1.0 / n_colours) if colour_masses is None else numpy.asarray(colour_masses, dtype=float)
    if masses.size != n_colours or numpy.any(masses <= 0.0) or abs(numpy.sum(masses) - 1.0) > 1.0e-12:
        raise ConfigurationError(f'Colour masses {masses.tolist()} must be positive, one per basin and sum to 1.')
    count = int(walkers_per_region or 4 * target)
    positions, weights, colours = [], [], []
    for colour, region in enumerate(regions):
        x = dynamics.uniform_in_region(region, count, rng.derive('init', colour))
        energy = dynamics.potential.energy(dynamics.coordinates(x))
        boltzmann = numpy.exp(-dynamics.beta * (energy - numpy.min(energy)))
        positions.append(x)
        weights.append(masses[colour] * boltzmann / compensated_sum(boltzmann))
        colours.append(numpy.full(count, colour, dtype=numpy.int64))
    positions = numpy.concatenate(positions)
    cells = partition.assign(dynamics.coordinates(positions))
    ensemble = Ensemble(positions, numpy.concatenate(weights), numpy.concatenate(colours), cells, partition, target, n_colours)
    ensemble = resample_ensemble(ensemble, rng.derive('init', 'resample'), max_group_size=max_group_size)
    logger.info('Initialised %d walkers over %d basins', ensemble.size, n_colours)
    return ensemble


def reweight_ensemble(ensemble, cell_weights):
    """
    Scale walker weights so the weight of each colour is spread over its
    occupied cells in proportion to the given cell weights. Colour masses are
    unchanged.

    :return: New Ensemble.
    """
    cell_weights = numpy.asarray(cell_weights, dtype=float)
    if cell_weights.size != ensemble.partition.n_cells:
        raise ValueError(f'Got {cell_weights.size} cell weights for {ensemble.partition.n_cells} cells.')
    weights = ensemble.weights.copy()
    for colour, mass in enumerate(ensemble.colour_mass()):
        members = ensemble.colours == colour
        if not numpy.any(members):
            continue
        occupied = numpy.unique(ensemble.cells[members])
        share = cell_weights[occupied]
        if numpy.any(share <= 0.0):
            raise DiagnosticError('Occupied cells have zero steady state weight.',
                                  details={'cells': occupied[share <= 0.0]})
        share = mass * share / numpy.sum(share)
        for cell, amount in zip(occupied, share):
            group = members & (ensemble.cells == cell)
            weights[group] *= amount / compensated_sum(weights[group])
    return Ensemble(ensemble.positions.copy(), weights, ensemble.colours.copy(), ensemble.cells.copy(),
                    ensemble.partition, ensemble.target, ensemble.n_colours)


def free_energy(ensemble, beta):
    """
    Get the free energy -ln(W_i) / beta of every cell from the weight of all
    colours, shifted to a minimum of 0; empty cells are infinite.
    """
    mass = ensemble.cell_mass()
    energy = numpy.full(mass.size, numpy.inf)
    occupied = mass > 0.0
    energy[occupied] = -numpy.log(mass[occupied]) / beta
    if numpy.any(occupied):
        energy -= numpy.min(energy[occupied])
    return energy


def save_checkpoint(path, ensemble, step, rng):
    """
    Write the ensemble and stream identity to a line based text file. Floats
    are written with repr so a resumed run is bit identical.

    :param path: File name.
    :param ensemble: Ensemble.
    :param step: Next step to run.
    :param rng: Master RngStream.
    """
    positions = ensemble.positions
    integral = numpy.issubdtype(positions.dtype, numpy.integer)
    dimension = 1 if positions.ndim == 1 else positions.shape[1]
    with open(path, 'w') as f:
        f.write(f'cmlibs.kinetics rts checkpoint {CHECKPOINT_VERSION}\n')
        f.write(f'step {int(step)}\n')
        f.write(f'seed {rng.seed}\n')
        f.write(f'key {" ".join(str(k) for k in rng.key)}\n')
        f.write(f'colours {ensemble.n_colours}\n')
        f.write(f'target {ensemble.target}\n')
        f.write(f'positions {"int" if integral else "float"} {dimension}\n')
        f.write(f'walkers {ensemble.size}\n')
        for position, weight, colour in zip(positions, ensemble.weights, ensemble.colours):
            values = numpy.atleast_1d(position)
            text = ' '.join(str(int(v)) if integral else repr(float(v)) for v in values)
            f.write(f'{int(colour)} {float(weight)!r} {text}\n')


def _header(lines, index, name):
    parts = lines[index].split()
    if not parts or parts[0] != name:
        raise ConfigurationError(f'Expected "{name}" in checkpoint.', line=index + 1)
    return parts[1:]


def load_checkpoint(path, dynamics, partition):
    """
    Read a checkpoint written by save_checkpoint.

    :return: Tuple of (Ensemble, next step, RngStream).
    """
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or not lines[0].startswith('cmlibs.kinetics rts checkpoint'):
        raise ConfigurationError(f'{path} is not an rts checkpoint.', line=1)
    version = int(lines[0].split()[-1])
    if version != CHECKPOINT_VERSION:
        raise ConfigurationError(f'Unsupported checkpoint version {version}.', line=1)
    step = int(_header(lines, 1, 'step')[0])
    seed = int(_header(lines, 2, 'seed')[0])
    key = tuple(int(k) if k.lstrip('-').isdigit() else k for k in _header(lines, 3, 'key'))
    n_colours = int(_header(lines, 4, 'colours')[0])
    target = int(_header(lines, 5, 'target')[0])
    kind, dimension = _header(lines, 6, 'positions')
    count = int(_header(lines, 7, 'walkers')[0])
    rows = [line.split() for line in lines[8:8 + count]]
    if len(rows) != count:
        raise ConfigurationError(f'Checkpoint lists {count} walkers but holds {len(rows)}.')
    colours = [int(r[0]) for r in rows]
    weights = [float(r[1]) for r in rows]
    convert = int if kind == 'int' else float
    positions = numpy.array([[convert(v) for v in r[2:]] for r in rows])
    if int(dimension) == 1:
        positions = positions.reshape(count)
    cells = partition.assign(dynamics.coordinates(positions)) if count else numpy.zeros(0, dtype=numpy.int64)
    return Ensemble(positions, weights, colours, cells, partition, target, n_colours), step, RngStream(seed, key)


def run_rts(dynamics, partition, regions, target, n_steps, rng, ensemble=None, start=0, max_group_size=None,
            colour_masses=None, equilibration_steps=0, equilibration_rounds=0, checkpoint=None, checkpoint_every=0,
            records=None):
    """
    Run reactive trajectory sampling.

    Optionally first runs equilibration rounds: after each round of
    equilibration_steps steps the steady state cell weights are solved from
    the observed cell fluxes and applied to the walkers.

    :param dynamics: Dynamics.
    :param partition: CellPartition.
    :param regions: Basin Region of each colour.
    :param target: Walkers per cell and colour.
    :param n_steps: Production steps, counted from start.
    :param rng: Master RngStream.
    :param ensemble: Ensemble to resume from; seeded in the basins by default.
    :param start: Index of the first step.
    :param max_group_size: Cap on walkers per group before resampling.
    :param colour_masses: Initial colour masses.
    :param checkpoint: Optional checkpoint file name.
    :param checkpoint_every: Steps between checkpoints; 0 writes only at the end.
    :param records: Optional list receiving the FluxRecords; a new list by default.
    :return: Tuple of (final Ensemble, FluxRecord list).
    """
    if ensemble is None:
        ensemble = initialize_ensemble(dynamics, partition, regions, target, rng, colour_masses=colour_masses,
                                       max_group_size=max_group_size)
        for round_index in range(equilibration_rounds):
            stream = rng.derive('equilibrate', round_index)
            trial = []
            for step in range(equilibration_steps):
                ensemble, record = rts_step(ensemble, dynamics, regions, stream, step, max_group_size, track_cells=True)
                trial.append(record)
            weights = steady_state_weights(*cell_flux_matrix(trial))
            ensemble = reweight_ensemble(ensemble, weights)
            logger.info('Equilibration round %d: reweighted %d cells', round_index + 1, weights.size)
    records = [] if records is None else records
    for step in range(start, start + n_steps):
        ensemble, record = rts_step(ensemble, dynamics, regions, rng, step, max_group_size)
        records.append(record)
        if checkpoint and checkpoint_every and (step + 1 - start) % checkpoint_every == 0:
            save_checkpoint(checkpoint, ensemble, step + 1, rng)
    if checkpoint:
        save_checkpoint(checkpoint, ensemble, start + n_steps, rng)
    logger.info('Ran %d RTS steps with %d walkers', n_steps, ensemble.size)
    return ensemble, records
