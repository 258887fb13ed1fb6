"""
Milestoning over the boundaries of a cell partition: crossing detection,
cell confined sampling, the milestone transition matrix and mean passage
times.
"""
import logging
from dataclasses import dataclass, field

import numpy

from cmlibs.kinetics.general import ConfigurationError, RngStream, map_tasks
from cmlibs.kinetics.markov.spectral import TransitionMatrix, mean_first_passage_times

logger = logging.getLogger(__name__)


class MilestoneSet(object):
    """
    Milestones are the interfaces between adjacent cells, identified by their
    cell pair (a, b) with a < b. Faces on the domain boundary are not
    milestones. One milestone is the absorbing cemetery.
    """

    def __init__(self, pairs, planes=None, cemetery=None):
        """
        :param pairs: Adjacent cell pairs.
        :param planes: Optional dict mapping pairs to their boundary Plane.
        :param cemetery: Index or cell pair of the absorbing milestone; the
            last milestone by default.
        """
        pairs = sorted({(int(min(a, b)), int(max(a, b))) for a, b in pairs})
        if not pairs:
            raise ConfigurationError('Partition has no interior boundaries to use as milestones.')
        if any(a == b for a, b in pairs):
            raise ValueError('A milestone must separate two different cells.')
        self._pairs = pairs
        self._index = {pair: i for i, pair in enumerate(pairs)}
        planes = planes or {}
        self._planes = [planes.get(pair) for pair in pairs]
        self._by_cell = {}
        for i, (a, b) in enumerate(pairs):
            self._by_cell.setdefault(a, []).append(i)
            self._by_cell.setdefault(b, []).append(i)
        self.setCemetery(len(pairs) - 1 if cemetery is None else cemetery)

    @property
    def size(self):
        return len(self._pairs)

    @property
    def pairs(self):
        return list(self._pairs)

    @property
    def cemetery(self):
        return self._cemetery

    def setCemetery(self, cemetery):
        self._cemetery = self.locate(cemetery)

    def locate(self, milestone):
        """
        Get the index of a milestone given by index or cell pair.
        """
        if numpy.ndim(milestone) == 0:
            index = int(milestone)
            if not 0 <= index < len(self._pairs):
                raise ConfigurationError(f'Milestone index {index} is out of range 0..{len(self._pairs) - 1}.')
            return index
        a, b = (int(v) for v in milestone)
        try:
            return self._index[(min(a, b), max(a, b))]
        except KeyError:
            raise ConfigurationError(f'Cells {a} and {b} are not adjacent, so there is no milestone between them.')

    def pair(self, index):
        return self._pairs[index]

    def plane(self, index):
        return self._planes[index]

    def milestones_of_cell(self, cell):
        return list(self._by_cell.get(int(cell), []))

    def other_cell(self, index, cell):
        a, b = self._pairs[index]
        return b if cell == a else a

    def shared_cell(self, i, j):
        """
        Get the cell bordered by both milestones, or None.
        """
        common = set(self._pairs[i]) & set(self._pairs[j])
        return common.pop() if len(common) == 1 else None

    def exit_milestone(self, cell, destination):
        """
        Get the milestone crossed leaving cell for destination. For a jump over
        several cells, the milestone of cell towards the destination.
        """
        key = (min(cell, destination), max(cell, destination))
        if key in self._index:
            return self._index[key]
        candidates = self._by_cell.get(int(cell), [])
        if not candidates:
            raise ConfigurationError(f'Cell {cell} has no milestones.')
        return min(candidates, key=lambda i: abs(self.other_cell(i, cell) - destination))

    def __repr__(self):
        return f'MilestoneSet({self.size} milestones, cemetery {self._pairs[self._cemetery]})'


def milestones_from_partition(partition, dynamics, cemetery=None):
    """
    Get the milestones of a partition: the cell pairs joined by neighbouring
    fine states of the dynamics, with the partition's planes where it has them.

    :param partition: CellPartition.
    :param dynamics: Dynamics providing fine states and their neighbour pairs.
    :param cemetery: Index or cell pair of the absorbing milestone.
    :return: MilestoneSet.
    """
    labels = partition.check_cover(dynamics.fine_states())
    neighbours = dynamics.neighbour_pairs()
    a, b = labels[neighbours[:, 0]], labels[neighbours[:, 1]]
    crossing = a != b
    pairs = set(zip(numpy.minimum(a, b)[crossing].tolist(), numpy.maximum(a, b)[crossing].tolist()))
    return MilestoneSet(pairs, planes=partition.boundary_planes(), cemetery=cemetery)


@dataclass(frozen=True)
class CrossingEvent:
    """
    Passage from one cell to another between consecutive trajectory frames.
    skipped counts the cells jumped over.
    """
    step: int
    source: int
    destination: int
    skipped: int = 0

    @property
    def milestone(self):
        return min(self.source, self.destination), max(self.source, self.destination)


def detect_crossings(trajectory, partition):
    """
    Get the cell changes along a trajectory of positions.

    :param trajectory: Positions, one per frame.
    :param partition: CellPartition.
    :return: List of CrossingEvent in order.
    """
    cells = numpy.atleast_1d(partition.assign(trajectory))
    if cells.size < 2:
        raise ValueError('A trajectory needs at least 2 frames.')
    steps = numpy.flatnonzero(cells[1:] != cells[:-1]) + 1
    return [CrossingEvent(int(s), int(cells[s - 1]), int(cells[s]), int(abs(int(cells[s]) - int(cells[s - 1])) - 1))
            for s in steps]


@dataclass
class CrossingStats:
    """
    Counts from cell confined sampling.

    crossings[i, j] counts crossings of milestone j with i the last milestone
    crossed; label_steps[c, i] counts steps spent in cell c with i the last
    milestone crossed; cell_steps[c] counts all steps simulated in cell c.
    """
    crossings: numpy.ndarray
    label_steps: numpy.ndarray
    cell_steps: numpy.ndarray
    reflection_failures: int = 0
    attempts: int = 0
    cells: list = field(default_factory=list)

    @classmethod
    def empty(cls, n_milestones, n_cells):
        return cls(numpy.zeros((n_milestones, n_milestones), dtype=numpy.int64),
                   numpy.zeros((n_cells, n_milestones), dtype=numpy.int64),
                   numpy.zeros(n_cells, dtype=numpy.int64))

    def merge(self, other):
        """
        Get the sum of two sets of counts.
        """
        return CrossingStats(self.crossings + other.crossings, self.label_steps + other.label_steps,
                             self.cell_steps + other.cell_steps, self.reflection_failures + other.reflection_failures,
                             self.attempts + other.attempts, sorted(set(self.cells) | set(other.cells)))

    def rows(self, milestones):
        """
        Get the counts entering each milestone matrix entry.

        :return: List of (i, j, N_ij, N_i_a, N_i_b, n_a, n_b), a being the cell
            shared by milestones i and j and b the other cell of i.
        """
        rows = []
        for i, j in zip(*numpy.nonzero(self.crossings)):
            a = milestones.shared_cell(i, j)
            if a is None:
                continue
            b = milestones.other_cell(i, a)
            rows.append((int(i), int(j), int(self.crossings[i, j]), int(self.label_steps[a, i]),
                         int(self.label_steps[b, i]), int(self.cell_steps[a]), int(self.cell_steps[b])))
        return rows


def cell_confined_run(dynamics, partition, milestones, cell, steps, rng, n_walkers=1, keep_trajectory=False):
    """
    Run walkers confined to one cell, starting from the Boltzmann distribution
    in the cell. A step leaving the cell is an attempted crossing of the
    milestone towards the destination. Grid walkers stay put; Brownian walkers
    are mirrored through the milestone plane, x - 2((x - p).n)n, and stay put
    if the mirror image is not in the cell. Walkers in a cell bordered by a
    single milestone carry its label from the start, as the cell can only be
    entered through it.

    :param dynamics: Dynamics.
    :param partition: CellPartition.
    :param milestones: MilestoneSet of the partition.
    :param cell: Cell index.
    :param steps: Steps per walker.
    :param rng: RngStream for this cell.
    :param n_walkers: Independent walkers run together.
    :param keep_trajectory: Also return the positions of the first walker.
    :return: Tuple of (trajectory or None, CrossingStats).
    """
    n_cells = partition.n_cells
    stats = CrossingStats.empty(milestones.size, n_cells)
    stats.cells = [int(cell)]
    if steps < 1:
        return None, stats
    x = dynamics.sample_in_cell(partition, cell, n_walkers, rng.derive('start'))
    own = milestones.milestones_of_cell(cell)
    labels = numpy.full(n_walkers, own[0] if len(own) == 1 else -1, dtype=numpy.int64)
    mirror = dynamics.kind == 'brownian'
    trajectory = [x[0]] if keep_trajectory else None
    stream = rng.derive('run')
    for _ in range(steps):
        proposed = dynamics.step(x, stream)
        destination = partition.assign(dynamics.coordinates(proposed))
        outside = numpy.flatnonzero(destination != cell)
        if outside.size:
            stats.attempts += outside.size
            crossed = numpy.array([milestones.exit_milestone(cell, d) for d in destination[outside]], dtype=numpy.int64)
            previous = labels[outside]
            counted = (previous >= 0) & (previous != crossed)
            numpy.add.at(stats.crossings, (previous[counted], crossed[counted]), 1)
            labels[outside] = crossed
            if mirror:
                for milestone in numpy.unique(crossed):
                    walkers = outside[crossed == milestone]
                    plane = milestones.plane(milestone)
                    if plane is None:
                        proposed[walkers] = x[walkers]
                        stats.reflection_failures += walkers.size
                        continue
                    reflected = plane.reflect_array(proposed[walkers])
                    inside = partition.assign(dynamics.coordinates(reflected)) == cell
                    proposed[walkers] = numpy.where(inside, reflected, x[walkers]) if reflected.ndim == 1 \
                        else numpy.where(inside[:, numpy.newaxis], reflected, x[walkers])
                    stats.reflection_failures += int(numpy.count_nonzero(~inside))
            else:
                proposed[outside] = x[outside]
        x = proposed
        labelled = labels >= 0
        if numpy.any(labelled):
            numpy.add.at(stats.label_steps[cell], labels[labelled], 1)
        stats.cell_steps[cell] += n_walkers
        if keep_trajectory:
            trajectory.append(x[0])
    if stats.reflection_failures:
        logger.warning('Cell %d: %d reflections fell outside the cell and were rejected', cell, stats.reflection_failures)
    return (numpy.array(trajectory) if keep_trajectory else None), stats


def _cell_task(task):
    dynamics, partition, milestones, cell, steps, seed, key, n_walkers = task
    return cell_confined_run(dynamics, partition, milestones, cell, steps, RngStream(seed, key), n_walkers)[1]


def run_milestoning(dynamics, partition, milestones, steps_per_cell, rng, n_walkers=1, workers=1, cells=None):
    """
    Run confined sampling in every cell with milestones, independently and
    possibly in parallel, and merge the counts in cell order.

    :param steps_per_cell: Steps per walker in each cell.
    :param rng: Master RngStream; cell c uses the stream keyed ('milestoning', c).
    :param cells: Optional subset of cells to sample.
    :return: CrossingStats.
    """
    cells = [c for c in range(partition.n_cells) if milestones.milestones_of_cell(c)] if cells is None else list(cells)
    tasks = [(dynamics, partition, milestones, cell, int(steps_per_cell), rng.seed, rng.key + ('milestoning', cell),
              int(n_walkers)) for cell in cells]
    stats = CrossingStats.empty(milestones.size, partition.n_cells)
    for contribution in map_tasks(_cell_task, tasks, workers):
        stats = stats.merge(contribution)
    logger.info('Sampled %d cells, %d attempted crossings', len(cells), stats.attempts)
    return stats


def milestone_matrix(stats, milestones, cell_weights):
    """
    Estimate the one step milestone transition matrix

        P_ij = (rho_a N_ij / n_a) / (rho_a N_i^a / n_a + rho_b N_i^b / n_b)

    with a the cell shared by milestones i and j, b the other cell of i, and
    P_ii = 1 - sum of P_ij over j != i. Milestones with no labelled steps are
    excluded: their rows are left absorbing and listed.

    :param stats: CrossingStats.
    :param milestones: MilestoneSet.
    :param cell_weights: Equilibrium weight rho of every cell.
    :return: Tuple of (TransitionMatrix over milestones, excluded milestone indices).
    """
    rho = numpy.asarray(cell_weights, dtype=float)
    steps = stats.cell_steps.astype(float)
    with numpy.errstate(divide='ignore', invalid='ignore'):
        per_step = numpy.where(steps > 0.0, rho / steps, 0.0)
    size = milestones.size
    entries = numpy.zeros((size, size))
    excluded = []
    for i in range(size):
        a, b = milestones.pair(i)
        denominator = per_step[a] * stats.label_steps[a, i] + per_step[b] * stats.label_steps[b, i]
        if not denominator > 0.0:
            excluded.append(i)
            continue
        for j in numpy.flatnonzero(stats.crossings[i]):
            if j == i:
                continue
            shared = milestones.shared_cell(i, j)
            if shared is None:
                continue
            entries[i, j] = per_step[shared] * stats.crossings[i, j] / denominator
    if excluded:
        logger.warning('Milestones %s were never visited and are excluded', [milestones.pair(i) for i in excluded])
    numpy.fill_diagonal(entries, 0.0)
    numpy.fill_diagonal(entries, 1.0 - entries.sum(axis=1))
    return TransitionMatrix(numpy.clip(entries, 0.0, 1.0), states=numpy.array(milestones.pairs)), excluded


def mean_passage_time(P, cemetery, dt):
    """
    Get the mean passage time from every milestone to the cemetery by solving
    (P - I)(T / dt) = -1 with the cemetery row and column removed.

    :param P: Milestone TransitionMatrix.
    :param cemetery: Index of the absorbing milestone.
    :param dt: Time per step.
    :return: Times, 0 at the cemetery.
    """
    return mean_first_passage_times(P, [int(cemetery)], dt)
