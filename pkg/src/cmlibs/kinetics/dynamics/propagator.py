"""
Stochastic propagators: the overdamped Brownian integrator, the grid
Metropolis walker and the dynamics objects the estimators drive.

Continuous positions are float arrays, flat in 1D. Grid positions are flat
lattice state indices.
"""
import logging
from dataclasses import dataclass, field

import numpy

from cmlibs.kinetics.dynamics.potential import benchmark_potential
from cmlibs.kinetics.general import ConfigurationError, DiagnosticError, PropagationError

logger = logging.getLogger(__name__)


def _as_domain(domain):
    domain = tuple(domain)
    if len(domain) == 2 and numpy.ndim(domain[0]) == 0:
        domain = (domain,)
    return tuple((float(lo), float(hi)) for lo, hi in domain)


@dataclass(frozen=True)
class BrownianParams:
    """
    Parameters of the overdamped Brownian integrator.
    """
    beta: float
    diffusion: float
    dt: float
    domain: tuple

    def __post_init__(self):
        object.__setattr__(self, 'domain', _as_domain(self.domain))
        if not self.beta > 0.0:
            raise ConfigurationError(f'beta must be positive, got {self.beta}.')
        if not self.diffusion > 0.0:
            raise ConfigurationError(f'diffusion must be positive, got {self.diffusion}.')
        if not self.dt > 0.0:
            raise ConfigurationError(f'dt must be positive, got {self.dt}.')
        for lo, hi in self.domain:
            if not lo < hi:
                raise ConfigurationError(f'Domain [{lo}, {hi}] is empty.')

    @property
    def kernel_width(self):
        """
        Standard deviation of the one step displacement, sqrt(2 D dt).
        """
        return float(numpy.sqrt(2.0 * self.diffusion * self.dt))


@dataclass(frozen=True)
class GridWalkerParams:
    """
    Parameters of the grid Metropolis walker. Each of the 2d neighbours is
    proposed with probability move_prob, the remaining probability proposes
    staying put. move_prob defaults to 1/(2d).
    """
    beta: float
    spacing: float
    domain: tuple
    move_prob: float = None
    dt: float = 1.0
    lattice: 'Lattice' = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, 'domain', _as_domain(self.domain))
        if not self.beta > 0.0:
            raise ConfigurationError(f'beta must be positive, got {self.beta}.')
        if not self.spacing > 0.0:
            raise ConfigurationError(f'Grid spacing must be positive, got {self.spacing}.')
        if self.dims not in (1, 2):
            raise ConfigurationError(f'Grid walker supports 1 or 2 dimensions, got {self.dims}.')
        if self.move_prob is None:
            object.__setattr__(self, 'move_prob', 1.0 / (2 * self.dims))
        if not 0.0 < self.move_prob <= 1.0 / (2 * self.dims) + 1.0e-15:
            raise ConfigurationError(f'move_prob must be in (0, 1/{2 * self.dims}], got {self.move_prob}.')
        if not self.dt > 0.0:
            raise ConfigurationError(f'dt must be positive, got {self.dt}.')
        object.__setattr__(self, 'lattice', Lattice(self.domain, self.spacing))

    @property
    def dims(self):
        return len(self.domain)


class Lattice(object):
    """
    Regular grid of states covering a box, nodes on the box boundary included.
    """

    def __init__(self, domain, spacing):
        domain = _as_domain(domain)
        shape = []
        for lo, hi in domain:
            intervals = (hi - lo) / spacing
            count = int(round(intervals))
            if count < 1 or abs(intervals - count) > 1.0e-6 * max(1.0, intervals):
                raise ConfigurationError(f'Grid spacing {spacing} does not divide the domain [{lo}, {hi}].')
            shape.append(count + 1)
        self._lower = numpy.array([lo for lo, _ in domain])
        self._spacing = float(spacing)
        self._shape = tuple(shape)

    @property
    def dimension(self):
        return len(self._shape)

    @property
    def shape(self):
        return self._shape

    @property
    def spacing(self):
        return self._spacing

    @property
    def size(self):
        return int(numpy.prod(self._shape))

    def unflatten(self, flat):
        """
        Get integer grid indices, shape (n, d), of flat state indices.
        """
        flat = numpy.asarray(flat, dtype=numpy.int64)
        return numpy.stack(numpy.unravel_index(flat, self._shape), axis=-1)

    def flatten(self, index):
        index = numpy.asarray(index, dtype=numpy.int64)
        return numpy.ravel_multi_index(tuple(numpy.moveaxis(index, -1, 0)), self._shape)

    def inside(self, index):
        index = numpy.asarray(index)
        return numpy.all((index >= 0) & (index < numpy.asarray(self._shape)), axis=-1)

    def coordinates(self, flat):
        """
        Get coordinates of flat state indices: a flat array in 1D, shape (n, d) otherwise.
        """
        points = self._lower + self._spacing * self.unflatten(flat)
        return points[..., 0] if self.dimension == 1 else points

    def all_coordinates(self):
        return self.coordinates(numpy.arange(self.size))

    def locate(self, coordinates):
        """
        Get the flat index of the grid node nearest each position.
        """
        coordinates = numpy.asarray(coordinates, dtype=float)
        if self.dimension == 1:
            coordinates = coordinates[..., numpy.newaxis]
        index = numpy.rint((coordinates - self._lower) / self._spacing).astype(numpy.int64)
        index = numpy.clip(index, 0, numpy.asarray(self._shape) - 1)
        return self.flatten(index)

    def neighbour_pairs(self):
        """
        Get all pairs (i, j), i < j, of flat indices of adjacent nodes.
        """
        flat = numpy.arange(self.size)
        index = self.unflatten(flat)
        pairs = []
        for axis in range(self.dimension):
            shifted = index.copy()
            shifted[:, axis] += 1
            inside = self.inside(shifted)
            pairs.append(numpy.stack([flat[inside], self.flatten(shifted[inside])], axis=-1))
        return numpy.concatenate(pairs)


def reflect_into_interval(x, lower, upper):
    """
    Mirror positions at the walls of [lower, upper] until they lie inside.
    """
    length = upper - lower
    y = numpy.mod(numpy.asarray(x, dtype=float) - lower, 2.0 * length)
    y = numpy.where(y > length, 2.0 * length - y, y)
    return lower + y


def _reflect_into_box(x, domain):
    if len(domain) == 1:
        return reflect_into_interval(x, *domain[0])
    x = numpy.array(x, dtype=float)
    for axis, (lo, hi) in enumerate(domain):
        x[..., axis] = reflect_into_interval(x[..., axis], lo, hi)
    return x


def brownian_step(x, potential, params, rng, noise=None):
    """
    Advance positions one step of the Ermak-McCammon integrator with constant
    scalar diffusion:

        x' = x - beta D grad U(x) dt + sqrt(2 D dt) W

    Positions leaving the domain are mirrored back at the walls.

    :param x: Position or array of positions.
    :param potential: Potential.
    :param params: BrownianParams.
    :param rng: RngStream supplying the standard normal draws W.
    :param noise: Optional W overriding the draws from rng.
    :return: New position(s), same shape as x.
    """
    x = numpy.asarray(x, dtype=float)
    gradient = numpy.asarray(potential.gradient(x), dtype=float)
    finite = numpy.isfinite(gradient)
    if not numpy.all(finite):
        bad = x[~finite] if x.ndim else x
        raise PropagationError(f'Non-finite force at position {numpy.ravel(bad)[0]!r}.')
    if noise is None:
        noise = rng.normal(x.shape if x.ndim else None)
    moved = x - params.beta * params.diffusion * gradient * params.dt + params.kernel_width * numpy.asarray(noise, dtype=float)
    moved = _reflect_into_box(moved, params.domain)
    return float(moved) if moved.ndim == 0 else moved


def metropolis_step(x, potential, params, rng, energies=None):
    """
    Advance grid walkers one Metropolis step. A neighbour is proposed with
    params.move_prob per direction and accepted with probability
    min{1, exp(-beta (U_new - U_old))}; proposals leaving the domain are
    rejected.

    :param x: Flat lattice index or array of indices.
    :param potential: Potential.
    :param params: GridWalkerParams.
    :param rng: RngStream; two uniform draws per walker.
    :param energies: Optional table of U at every lattice state.
    :return: New index or array of indices.
    """
    scalar = numpy.ndim(x) == 0
    x = numpy.atleast_1d(numpy.asarray(x, dtype=numpy.int64))
    lattice = params.lattice
    count = x.size
    choice = numpy.floor(rng.uniform(count) / params.move_prob).astype(numpy.int64)
    proposed = choice < 2 * lattice.dimension
    index = lattice.unflatten(x)
    trial = index.copy()
    axis = numpy.minimum(choice // 2, lattice.dimension - 1)
    trial[numpy.arange(count), axis] += numpy.where(proposed, numpy.where(choice % 2 == 0, -1, 1), 0)
    valid = proposed & lattice.inside(trial)
    target = x.copy()
    target[valid] = lattice.flatten(trial[valid])
    if energies is None:
        old_energy = potential.energy(lattice.coordinates(x))
        new_energy = potential.energy(lattice.coordinates(target))
    else:
        old_energy = energies[x]
        new_energy = energies[target]
    acceptance = numpy.exp(-params.beta * numpy.maximum(new_energy - old_energy, 0.0))
    accepted = valid & (rng.uniform(count) < acceptance)
    result = numpy.where(accepted, target, x)
    return int(result[0]) if scalar else result


def _rejection_sample(candidates, weights, count, rng, propose):
    """
    Draw *count* samples by picking a candidate uniformly, perturbing it with
    *propose* and accepting with probability given by *weights*(sample).
    """
    samples = []
    collected = 0
    estimate = max(float(numpy.mean(weights(candidates))), 1.0e-3)
    while collected < count:
        batch = int(min(max(1.2 * (count - collected) / estimate, 256), 1.0e7))
        trial = propose(candidates[rng.integers(0, len(candidates), batch)])
        keep, trial = trial
        keep &= rng.uniform(batch) < weights(trial)
        samples.append(trial[keep])
        collected += int(numpy.count_nonzero(keep))
    return numpy.concatenate(samples)[:count]


class BrownianDynamics(object):
    """
    One dimensional overdamped Brownian dynamics with a fine grid of bins used
    for the exact reference chain and for cell sampling.
    """

    kind = 'brownian'

    def __init__(self, potential, params, spacing=None):
        if potential.getDimension() != 1 or len(params.domain) != 1:
            raise ConfigurationError('Brownian dynamics is one dimensional.')
        self._potential = potential
        self._params = params
        lo, hi = params.domain[0]
        self._spacing = float(spacing) if spacing is not None else (hi - lo) / 1000.0
        if not self._spacing > 0.0:
            raise ConfigurationError(f'Fine grid spacing must be positive, got {spacing}.')
        self._fine_count = int(numpy.floor((hi - lo) / self._spacing + 1.0e-9)) + 1

    @property
    def potential(self):
        return self._potential

    @property
    def params(self):
        return self._params

    @property
    def beta(self):
        return self._params.beta

    @property
    def dt(self):
        return self._params.dt

    @property
    def dimension(self):
        return 1

    @property
    def spacing(self):
        return self._spacing

    def step(self, x, rng):
        return brownian_step(x, self._potential, self._params, rng)

    def coordinates(self, x):
        return numpy.asarray(x, dtype=float)

    def fine_states(self):
        """
        Get the fine bin centres lo + i dx lying inside the domain.
        """
        return self._params.domain[0][0] + self._spacing * numpy.arange(self._fine_count)

    def fine_index(self, x):
        lo = self._params.domain[0][0]
        index = numpy.rint((numpy.asarray(x, dtype=float) - lo) / self._spacing).astype(numpy.int64)
        return numpy.clip(index, 0, self._fine_count - 1)

    def neighbour_pairs(self):
        flat = numpy.arange(self._fine_count - 1)
        return numpy.stack([flat, flat + 1], axis=-1)

    def sample_in_cell(self, partition, cell, count, rng):
        """
        Draw positions from the Boltzmann distribution restricted to a cell, by
        rejection from a uniform proposal over the fine bins of the cell.
        """
        centres = self.fine_states()
        candidates = centres[partition.assign(centres) == cell]
        if candidates.size == 0:
            raise DiagnosticError(f'Cell {cell} contains no fine states.', details={'cell': cell})
        half = 0.5 * self._spacing
        lo, hi = self._params.domain[0]
        energy = self._potential.energy(candidates)
        slope = numpy.abs(self._potential.gradient(candidates))
        reference = float(numpy.min(energy - slope * half))

        def weights(x):
            return numpy.exp(-self.beta * (self._potential.energy(x) - reference))

        def propose(x):
            trial = numpy.clip(x + self._spacing * (rng.uniform(x.size) - 0.5), lo, hi)
            return partition.assign(trial) == cell, trial

        if numpy.all(weights(candidates) < 1.0e-300):
            raise DiagnosticError(f'Cell {cell} is empty under the Boltzmann weight.', details={'cell': cell})
        return _rejection_sample(candidates, weights, count, rng, propose)

    def uniform_in_region(self, region, count, rng):
        lo, hi = self._params.domain[0]
        bounds = region.bounds()
        if bounds is not None:
            lo, hi = max(lo, bounds[0][0]), min(hi, bounds[1][0])
        if not lo < hi:
            raise ConfigurationError(f'Region {region!r} does not intersect the domain.')
        samples = []
        collected = 0
        while collected < count:
            trial = lo + (hi - lo) * rng.uniform(max(2 * count, 64))
            trial = trial[region.contains(trial)]
            samples.append(trial)
            collected += trial.size
        return numpy.concatenate(samples)[:count]

    def __repr__(self):
        return f'BrownianDynamics({self._potential.getName()!r}, {self._params})'


class MetropolisDynamics(object):
    """
    Metropolis random walk on a regular grid.
    """

    kind = 'metropolis'

    def __init__(self, potential, params):
        if potential.getDimension() != params.dims:
            raise ConfigurationError(f'Potential dimension {potential.getDimension()} does not match grid dimension {params.dims}.')
        self._potential = potential
        self._params = params
        self._lattice = params.lattice
        self._energies = numpy.asarray(potential.energy(self._lattice.all_coordinates()), dtype=float)
        if not numpy.all(numpy.isfinite(self._energies)):
            raise PropagationError(f'Potential {potential.getName()} is not finite on the grid.')

    @property
    def potential(self):
        return self._potential

    @property
    def params(self):
        return self._params

    @property
    def lattice(self):
        return self._lattice

    @property
    def energies(self):
        return self._energies

    @property
    def beta(self):
        return self._params.beta

    @property
    def dt(self):
        return self._params.dt

    @property
    def dimension(self):
        return self._params.dims

    def step(self, x, rng):
        return metropolis_step(x, self._potential, self._params, rng, energies=self._energies)

    def coordinates(self, x):
        return self._lattice.coordinates(x)

    def fine_states(self):
        return self._lattice.all_coordinates()

    def fine_index(self, x):
        return numpy.asarray(x, dtype=numpy.int64)

    def neighbour_pairs(self):
        return self._lattice.neighbour_pairs()

    def sample_in_cell(self, partition, cell, count, rng):
        """
        Draw grid states from the Boltzmann distribution restricted to a cell,
        by rejection with the cell's largest weight.
        """
        candidates = numpy.flatnonzero(partition.assign(self.fine_states()) == cell)
        if candidates.size == 0:
            raise DiagnosticError(f'Cell {cell} contains no grid states.', details={'cell': cell})
        reference = float(numpy.min(self._energies[candidates]))
        weights = numpy.exp(-self.beta * (self._energies - reference))
        if numpy.all(weights[candidates] < 1.0e-300):
            raise DiagnosticError(f'Cell {cell} is empty under the Boltzmann weight.', details={'cell': cell})
        return _rejection_sample(candidates, lambda x: weights[x], count, rng,
                                 lambda x: (numpy.ones(x.size, dtype=bool), x))

    def uniform_in_region(self, region, count, rng):
        states = numpy.flatnonzero(region.contains(self.fine_states()))
        if states.size == 0:
            raise ConfigurationError(f'Region {region!r} contains no grid states.')
        return states[rng.integers(0, states.size, count)]

    def __repr__(self):
        return f'MetropolisDynamics({self._potential.getName()!r}, {self._params})'


def benchmark_dynamics(name, **overrides):
    """
    Get the dynamics of a benchmark with its published parameters.

    bench1d is Brownian with beta = 5, D = 0.06, dt = 0.03 and fine spacing
    0.03. bench2d is a Metropolis walk with beta = 10 and spacing 0.01; its
    time step scales with spacing squared so rates stay in units of the
    spacing 0.01 step. fig1d is a Metropolis walk with beta = 1, spacing 0.04
    and move probability 0.25 each side.

    :param name: Benchmark name.
    :param overrides: Parameter overrides: beta, diffusion, dt, spacing, move_prob.
    :return: BrownianDynamics or MetropolisDynamics.
    """
    potential = benchmark_potential(name)
    unknown = set(overrides) - {'beta', 'diffusion', 'dt', 'spacing', 'move_prob'}
    if unknown:
        raise ConfigurationError(f'Unknown dynamics parameters: {", ".join(sorted(unknown))}.')
    settings = {k: v for k, v in overrides.items() if v is not None}
    domain = potential.getDomain()
    if name == 'bench1d':
        params = BrownianParams(beta=settings.get('beta', 5.0), diffusion=settings.get('diffusion', 0.06),
                                dt=settings.get('dt', 0.03), domain=domain)
        return BrownianDynamics(potential, params, spacing=settings.get('spacing', 0.03))
    if name == 'bench2d':
        spacing = settings.get('spacing', 0.01)
        params = GridWalkerParams(beta=settings.get('beta', 10.0), spacing=spacing, domain=domain,
                                  move_prob=settings.get('move_prob'), dt=settings.get('dt', (spacing / 0.01) ** 2))
        return MetropolisDynamics(potential, params)
    params = GridWalkerParams(beta=settings.get('beta', 1.0), spacing=settings.get('spacing', 0.04), domain=domain,
                              move_prob=settings.get('move_prob', 0.25), dt=settings.get('dt', 1.0))
    return MetropolisDynamics(potential, params)
