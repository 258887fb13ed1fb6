"""
Partitions of configuration space into macro-state cells.
"""
import math

import numpy

from cmlibs.kinetics.general import ConfigurationError
from cmlibs.kinetics.geometry.plane import Plane

# Positions within this fraction of a cell width below a boundary count as on it.
TIE_TOLERANCE = 1.0e-9


class CellPartition(object):
    """
    Base class for partitions. assign maps positions to cell indices
    0..n_cells-1; a position on a boundary between two cells belongs to the
    cell on the right, the side the boundary normal points to.
    """

    geometry = 'cells'

    def __init__(self, n_cells):
        if n_cells < 1:
            raise ConfigurationError(f'A partition needs at least one cell, got {n_cells}.')
        self._n_cells = int(n_cells)

    @property
    def n_cells(self):
        return self._n_cells

    def assign(self, x):
        """
        Get the cell index of each position.

        :param x: Position or array of positions.
        :return: Integer array of cell indices.
        """
        raise NotImplementedError()

    def boundary_planes(self):
        """
        Get the planar boundaries between adjacent cells.

        :return: Dict mapping cell pairs (a, b), a < b, to the Plane separating
            them with normal pointing into b. Non-planar boundaries are omitted.
        """
        return {}

    def check_cover(self, fine_states):
        """
        Check every cell holds at least one fine state.

        :return: Cell index of each fine state.
        """
        labels = numpy.asarray(self.assign(fine_states))
        counts = numpy.bincount(labels, minlength=self._n_cells)
        empty = numpy.flatnonzero(counts == 0)
        if empty.size:
            raise ConfigurationError(f'Partition cells {empty.tolist()} contain no fine states.')
        return labels

    def describe(self):
        return {'geometry': self.geometry, 'n_cells': self._n_cells}


class UniformIntervals(CellPartition):
    """
    Equal intervals covering [lower, upper].
    """

    geometry = 'intervals'

    def __init__(self, lower, upper, n_cells):
        super().__init__(n_cells)
        if not lower < upper:
            raise ConfigurationError(f'Partition domain [{lower}, {upper}] is empty.')
        self._lower = float(lower)
        self._upper = float(upper)
        self._width = (self._upper - self._lower) / self._n_cells

    def assign(self, x):
        x = numpy.asarray(x, dtype=float)
        if x.ndim > 1:
            x = x[..., 0]
        index = numpy.floor((x - self._lower) / self._width + TIE_TOLERANCE).astype(numpy.int64)
        return numpy.clip(index, 0, self._n_cells - 1)

    def cell_bounds(self, cell):
        return self._lower + cell * self._width, self._lower + (cell + 1) * self._width

    def boundary_planes(self):
        return {(k - 1, k): Plane([self._lower + k * self._width], [1.0]) for k in range(1, self._n_cells)}

    def describe(self):
        return dict(super().describe(), lower=self._lower, upper=self._upper)


class SlantedStripes(CellPartition):
    """
    Equal width stripes along u = x cos(theta) + y sin(theta) spanning a box.
    """

    geometry = 'stripes'

    def __init__(self, domain, n_cells, theta):
        super().__init__(n_cells)
        if not 0.0 <= theta < 90.0:
            raise ConfigurationError(f'Stripe angle theta must satisfy 0 <= theta < 90, got {theta}: as theta '
                                     'approaches 90 the boundaries become parallel to the reaction coordinate '
                                     'and cells no longer resolve the transition, degenerating the sampling.')
        (xlo, xhi), (ylo, yhi) = domain
        self._theta = float(theta)
        radians = math.radians(theta)
        self._direction = numpy.array([math.cos(radians), math.sin(radians)])
        corners = numpy.array([[xlo, ylo], [xlo, yhi], [xhi, ylo], [xhi, yhi]])
        projection = corners @ self._direction
        self._lower = float(numpy.min(projection))
        self._width = (float(numpy.max(projection)) - self._lower) / self._n_cells

    @property
    def theta(self):
        return self._theta

    def assign(self, x):
        x = numpy.asarray(x, dtype=float)
        u = x @ self._direction
        index = numpy.floor((u - self._lower) / self._width + TIE_TOLERANCE).astype(numpy.int64)
        return numpy.clip(index, 0, self._n_cells - 1)

    def boundary_planes(self):
        normal = self._direction.tolist()
        return {(k - 1, k): Plane((self._direction * (self._lower + k * self._width)).tolist(), normal)
                for k in range(1, self._n_cells)}

    def describe(self):
        return dict(super().describe(), theta=self._theta)


class GridLocator(object):
    """
    Maps positions to the index of the nearest node of a regular grid.
    """

    def __init__(self, lower, spacing, shape):
        self._lower = numpy.atleast_1d(numpy.asarray(lower, dtype=float))
        self._spacing = float(spacing)
        self._shape = tuple(int(s) for s in shape)

    @classmethod
    def from_dynamics(cls, dynamics):
        if dynamics.kind == 'brownian':
            states = dynamics.fine_states()
            return cls([states[0]], dynamics.spacing, (states.size,))
        lattice = dynamics.lattice
        return cls([lo for lo, _ in dynamics.params.domain], lattice.spacing, lattice.shape)

    @property
    def size(self):
        return int(numpy.prod(self._shape))

    def __call__(self, x):
        x = numpy.asarray(x, dtype=float)
        if len(self._shape) == 1 and not (x.ndim >= 2 and x.shape[-1] == 1):
            x = x[..., numpy.newaxis]
        index = numpy.rint((x - self._lower) / self._spacing).astype(numpy.int64)
        index = numpy.clip(index, 0, numpy.asarray(self._shape) - 1)
        return numpy.ravel_multi_index(tuple(numpy.moveaxis(index, -1, 0)), self._shape)


class TablePartition(CellPartition):
    """
    A partition given by a cell label per fine state. Positions are mapped to
    fine states by a locator; without one, positions are fine state indices.
    """

    geometry = 'table'

    def __init__(self, labels, locator=None, fine_states=None, geometry=None, compact=True):
        """
        :param labels: Cell label of every fine state.
        :param locator: Callable mapping positions to fine state indices.
        :param fine_states: Optional fine state coordinates, used to place
            boundary planes in 1D.
        :param geometry: Optional geometry descriptor.
        :param compact: Renumber labels to 0..n-1, dropping unused labels.
        """
        labels = numpy.asarray(labels, dtype=numpy.int64)
        if compact:
            _, labels = numpy.unique(labels, return_inverse=True)
        super().__init__(int(numpy.max(labels)) + 1 if labels.size else 0)
        self._labels = labels.astype(numpy.int64)
        self._locator = locator
        self._fine_states = None if fine_states is None else numpy.asarray(fine_states, dtype=float)
        if geometry is not None:
            self.geometry = geometry

    @property
    def labels(self):
        return self._labels

    def assign(self, x):
        if self._locator is None:
            return self._labels[numpy.asarray(x, dtype=numpy.int64)]
        return self._labels[self._locator(x)]

    def boundary_planes(self):
        if self._fine_states is None or self._fine_states.ndim != 1:
            return {}
        change = numpy.flatnonzero(self._labels[1:] != self._labels[:-1])
        planes = {}
        repeated = set()
        for k in change:
            a, b = int(self._labels[k]), int(self._labels[k + 1])
            key = (min(a, b), max(a, b))
            if key in planes:
                repeated.add(key)
            normal = 1.0 if a < b else -1.0
            planes[key] = Plane([0.5 * (self._fine_states[k] + self._fine_states[k + 1])], [normal])
        for key in repeated:
            del planes[key]
        return planes


def partition_1d(domain, n_cells):
    """
    Get uniform intervals covering a 1D domain; the rightmost interval is closed.

    :param domain: (lower, upper) or ((lower, upper),).
    :param n_cells: Number of cells, at least 2.
    """
    if n_cells < 2:
        raise ConfigurationError(f'A 1D partition needs at least 2 cells, got {n_cells}.')
    if numpy.ndim(domain[0]) > 0:
        domain = domain[0]
    return UniformIntervals(domain[0], domain[1], n_cells)


def partition_2d_slanted(domain, n_cells, theta_deg):
    """
    Get equal stripes slanted at theta degrees over a 2D box. theta = 0 gives
    boundaries parallel to the y axis.
    """
    if n_cells < 2:
        raise ConfigurationError(f'A 2D partition needs at least 2 cells, got {n_cells}.')
    return SlantedStripes(domain, n_cells, theta_deg)


def fine_partition(dynamics):
    """
    Get the partition with one cell per fine state of the dynamics.
    """
    locator = GridLocator.from_dynamics(dynamics)
    fine_states = dynamics.fine_states()
    return TablePartition(numpy.arange(locator.size), locator=locator,
                          fine_states=fine_states if numpy.ndim(fine_states) == 1 else None, geometry='fine')


def optimal_cells(committor_vector, epsilon, locator=None, fine_states=None):
    """
    Get cells bounded by committor level sets: cell i holds the fine states
    with i epsilon <= pi < (i + 1) epsilon, states with pi = 1 forming their own
    top cell. Empty level sets are dropped and the remaining cells renumbered.

    :param committor_vector: Committor value of every fine state.
    :param epsilon: Level set width, 0 < epsilon <= 1.
    :param locator: Optional callable mapping positions to fine state indices.
    :param fine_states: Optional fine state coordinates.
    :return: TablePartition.
    """
    if not 0.0 < epsilon <= 1.0:
        raise ConfigurationError(f'Level set width must satisfy 0 < epsilon <= 1, got {epsilon}.')
    values = numpy.asarray(committor_vector, dtype=float)
    if values.size and (numpy.min(values) < 0.0 or numpy.max(values) > 1.0):
        raise ConfigurationError('Committor values must lie in [0, 1].')
    levels = numpy.floor(values / epsilon + TIE_TOLERANCE).astype(numpy.int64)
    partition = TablePartition(levels, locator=locator, fine_states=fine_states, geometry='levelsets')
    partition.epsilon = float(epsilon)
    return partition
