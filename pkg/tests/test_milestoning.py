import unittest

import numpy

from cmlibs.kinetics.dynamics.propagator import benchmark_dynamics
from cmlibs.kinetics.general import ConfigurationError, RngStream
from cmlibs.kinetics.markov.partition import partition_1d
from cmlibs.kinetics.markov.spectral import TransitionMatrix
from cmlibs.kinetics.sampling.milestoning import (
    CrossingStats, MilestoneSet, cell_confined_run, detect_crossings, mean_passage_time, milestone_matrix,
    milestones_from_partition, run_milestoning)

from utilities import birth_death_matrix, birth_death_passage_time


def _line_stats():
    """
    Counts on three cells with milestones (0, 1) and (1, 2).
    """
    stats = CrossingStats.empty(2, 3)
    stats.cell_steps[:] = [100, 200, 100]
    stats.label_steps[0, 0] = 60
    stats.label_steps[1, 0] = 80
    stats.label_steps[1, 1] = 100
    stats.label_steps[2, 1] = 40
    stats.crossings[0, 1] = 4
    stats.crossings[1, 0] = 5
    return stats


class MilestoneSetTestCase(unittest.TestCase):

    def test_pairs(self):
        """
        Test milestones are sorted cell pairs with the last as default cemetery.
        """
        milestones = MilestoneSet([(2, 1), (0, 1), (3, 2), (1, 2)])
        self.assertEqual([(0, 1), (1, 2), (2, 3)], milestones.pairs)
        self.assertEqual(3, milestones.size)
        self.assertEqual(2, milestones.cemetery)
        self.assertEqual(1, milestones.locate((2, 1)))
        self.assertEqual(0, milestones.locate(0))
        self.assertEqual([0, 1], milestones.milestones_of_cell(1))
        self.assertEqual(2, milestones.other_cell(1, 1))
        self.assertEqual(1, milestones.shared_cell(0, 1))
        self.assertIsNone(milestones.shared_cell(0, 2))

    def test_cemetery(self):
        """
        Test choosing the cemetery by index or pair.
        """
        milestones = MilestoneSet([(0, 1), (1, 2)], cemetery=(1, 0))
        self.assertEqual(0, milestones.cemetery)
        milestones.setCemetery(1)
        self.assertEqual(1, milestones.cemetery)
        with self.assertRaises(ConfigurationError):
            milestones.setCemetery(5)

    def test_not_adjacent(self):
        """
        Test cells with no shared boundary have no milestone.
        """
        milestones = MilestoneSet([(0, 1), (1, 2)])
        with self.assertRaises(ConfigurationError):
            milestones.locate((0, 2))
        with self.assertRaises(ConfigurationError):
            MilestoneSet([])
        with self.assertRaises(ValueError):
            MilestoneSet([(1, 1)])

    def test_exit_milestone(self):
        """
        Test a jump over several cells crosses the milestone towards the destination.
        """
        milestones = MilestoneSet([(0, 1), (1, 2), (2, 3)])
        self.assertEqual(1, milestones.exit_milestone(1, 2))
        self.assertEqual(1, milestones.exit_milestone(1, 3))
        self.assertEqual(0, milestones.exit_milestone(1, 0))
        self.assertEqual(1, milestones.exit_milestone(2, 0))

    def test_from_partition(self):
        """
        Test milestones of a 1D partition are its interior boundaries with planes.
        """
        dynamics = benchmark_dynamics('bench1d')
        partition = partition_1d(dynamics.params.domain, 4)
        milestones = milestones_from_partition(partition, dynamics)
        self.assertEqual([(0, 1), (1, 2), (2, 3)], milestones.pairs)
        plane = milestones.plane(1)
        self.assertIsNotNone(plane)
        lower, upper = partition.cell_bounds(1)
        self.assertAlmostEqual(upper, plane.getPoint()[0])


class CrossingTestCase(unittest.TestCase):

    def test_detect_crossings(self):
        """
        Test cell changes along a trajectory.
        """
        partition = partition_1d((0.0, 1.0), 2)
        events = detect_crossings(numpy.array([0.1, 0.2, 0.6, 0.4]), partition)
        self.assertEqual(2, len(events))
        self.assertEqual((2, 0, 1, 0), (events[0].step, events[0].source, events[0].destination, events[0].skipped))
        self.assertEqual((3, 1, 0), (events[1].step, events[1].source, events[1].destination))
        self.assertEqual((0, 1), events[1].milestone)

    def test_skipped_cells(self):
        """
        Test a jump over cells records the cells skipped.
        """
        partition = partition_1d((0.0, 1.0), 4)
        events = detect_crossings(numpy.array([0.1, 0.9]), partition)
        self.assertEqual(1, len(events))
        self.assertEqual(2, events[0].skipped)
        with self.assertRaises(ValueError):
            detect_crossings(numpy.array([0.1]), partition)


class MilestoneMatrixTestCase(unittest.TestCase):

    def test_estimate(self):
        """
        Test the milestone matrix against counts worked by hand.
        """
        milestones = MilestoneSet([(0, 1), (1, 2)])
        matrix, excluded = milestone_matrix(_line_stats(), milestones, [0.25, 0.5, 0.25])
        self.assertEqual([], excluded)
        entries = matrix.dense()
        self.assertAlmostEqual(0.01 / 0.35, entries[0, 1], delta=1.0e-12)
        self.assertAlmostEqual(0.0125 / 0.35, entries[1, 0], delta=1.0e-12)
        self.assertAlmostEqual(1.0 - 0.01 / 0.35, entries[0, 0], delta=1.0e-12)
        self.assertEqual([[0, 1], [1, 2]], matrix.states.tolist())

    def test_weights_scale(self):
        """
        Test cell weights enter per simulated step.
        """
        milestones = MilestoneSet([(0, 1), (1, 2)])
        matrix, _ = milestone_matrix(_line_stats(), milestones, [0.5, 0.25, 0.25])
        # per step weights 0.005, 0.00125, 0.0025
        self.assertAlmostEqual(0.00125 * 4 / (0.005 * 60 + 0.00125 * 80), matrix.dense()[0, 1], delta=1.0e-12)

    def test_excluded(self):
        """
        Test a milestone never labelled is left absorbing and listed.
        """
        stats = _line_stats()
        stats.label_steps[:, 1] = 0
        milestones = MilestoneSet([(0, 1), (1, 2)])
        matrix, excluded = milestone_matrix(stats, milestones, [0.25, 0.5, 0.25])
        self.assertEqual([1], excluded)
        self.assertEqual([0.0, 1.0], matrix.dense()[1].tolist())

    def test_passage_time(self):
        """
        Test the passage time of two milestones is dt over the hop probability.
        """
        milestones = MilestoneSet([(0, 1), (1, 2)])
        matrix, _ = milestone_matrix(_line_stats(), milestones, [0.25, 0.5, 0.25])
        times = mean_passage_time(matrix, milestones.cemetery, 0.5)
        self.assertAlmostEqual(0.5 * 0.35 / 0.01, times[0], delta=1.0e-9)
        self.assertEqual(0.0, times[1])

    def test_birth_death_passage_time(self):
        """
        Test passage times along a chain of milestones against the closed form.
        """
        rng = numpy.random.default_rng(3)
        up = rng.uniform(0.05, 0.45, 12)
        down = rng.uniform(0.05, 0.45, 12)
        P = TransitionMatrix(birth_death_matrix(up, down))
        times = mean_passage_time(P, 11, 2.0)
        self.assertAlmostEqual(1.0, times[0] / (2.0 * birth_death_passage_time(up, down)), delta=1.0e-9)


class ConfinedRunTestCase(unittest.TestCase):

    def test_brownian_stays_in_cell(self):
        """
        Test Brownian walkers mirrored at milestones never leave their cell.
        """
        dynamics = benchmark_dynamics('bench1d')
        partition = partition_1d(dynamics.params.domain, 8)
        milestones = milestones_from_partition(partition, dynamics)
        trajectory, stats = cell_confined_run(dynamics, partition, milestones, 3, 300, RngStream(1), keep_trajectory=True)
        self.assertEqual(301, len(trajectory))
        self.assertTrue(numpy.all(partition.assign(trajectory) == 3))
        self.assertEqual(300, stats.cell_steps[3])
        self.assertEqual(0, numpy.sum(stats.cell_steps) - 300)
        self.assertEqual([3], stats.cells)

    def test_grid_walkers(self):
        """
        Test grid walkers crossing milestones record labels and crossings.
        """
        dynamics = benchmark_dynamics('fig1d')
        partition = partition_1d(dynamics.params.domain, 4)
        milestones = milestones_from_partition(partition, dynamics)
        _, stats = cell_confined_run(dynamics, partition, milestones, 1, 2000, RngStream(2), n_walkers=4)
        self.assertEqual(8000, stats.cell_steps[1])
        self.assertGreater(stats.attempts, 0)
        self.assertEqual(0, stats.reflection_failures)
        # cell 1 borders milestones 0 and 1 only
        self.assertEqual(0, numpy.sum(stats.label_steps[1, 2:]))
        self.assertGreater(stats.crossings[0, 1] + stats.crossings[1, 0], 0)
        self.assertLessEqual(numpy.sum(stats.label_steps[1]), 8000)

    def test_single_milestone_cell(self):
        """
        Test steps in a cell with one milestone are labelled with it from the start.
        """
        dynamics = benchmark_dynamics('fig1d')
        partition = partition_1d(dynamics.params.domain, 4)
        milestones = milestones_from_partition(partition, dynamics)
        _, stats = cell_confined_run(dynamics, partition, milestones, 0, 500, RngStream(4), n_walkers=2)
        self.assertEqual(1000, stats.cell_steps[0])
        self.assertEqual(1000, stats.label_steps[0, 0])
        self.assertEqual(0, numpy.sum(stats.label_steps[0, 1:]))
        self.assertEqual(0, numpy.sum(stats.crossings))
        _, inner = cell_confined_run(dynamics, partition, milestones, 1, 1, RngStream(4))
        self.assertLessEqual(numpy.sum(inner.label_steps[1]), inner.attempts)

    def test_no_steps(self):
        """
        Test a run of no steps has empty counts.
        """
        dynamics = benchmark_dynamics('fig1d')
        partition = partition_1d(dynamics.params.domain, 4)
        milestones = milestones_from_partition(partition, dynamics)
        trajectory, stats = cell_confined_run(dynamics, partition, milestones, 0, 0, RngStream(2))
        self.assertIsNone(trajectory)
        self.assertEqual(0, numpy.sum(stats.cell_steps))

    def test_workers_reproducible(self):
        """
        Test counts do not depend on the number of worker processes.
        """
        dynamics = benchmark_dynamics('fig1d')
        partition = partition_1d(dynamics.params.domain, 4)
        milestones = milestones_from_partition(partition, dynamics)
        serial = run_milestoning(dynamics, partition, milestones, 500, RngStream(7), n_walkers=2, workers=1)
        parallel = run_milestoning(dynamics, partition, milestones, 500, RngStream(7), n_walkers=2, workers=2)
        numpy.testing.assert_array_equal(serial.crossings, parallel.crossings)
        numpy.testing.assert_array_equal(serial.label_steps, parallel.label_steps)
        self.assertEqual([0, 1, 2, 3], serial.cells)
        self.assertEqual(4000, numpy.sum(serial.cell_steps))

    def test_matrix_from_sampling(self):
        """
        Test the matrix estimated from sampling is stochastic and gives finite times.
        """
        dynamics = benchmark_dynamics('fig1d')
        partition = partition_1d(dynamics.params.domain, 4)
        milestones = milestones_from_partition(partition, dynamics)
        stats = run_milestoning(dynamics, partition, milestones, 4000, RngStream(11), n_walkers=4)
        matrix, excluded = milestone_matrix(stats, milestones, [0.25] * 4)
        self.assertEqual([], excluded)
        numpy.testing.assert_allclose(matrix.row_sums(), 1.0, atol=1.0e-12)
        times = mean_passage_time(matrix, milestones.cemetery, dynamics.dt)
        self.assertTrue(numpy.all(numpy.isfinite(times)))
        self.assertGreater(times[0], times[1])


if __name__ == "__main__":
    unittest.main()
