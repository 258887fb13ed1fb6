import math
import os
import tempfile
import unittest

import numpy
from hypothesis import given, settings, strategies as st

from cmlibs.kinetics.dynamics.potential import flat_potential
from cmlibs.kinetics.dynamics.propagator import GridWalkerParams, MetropolisDynamics, benchmark_dynamics
from cmlibs.kinetics.general import (
    ConfigurationError, DiagnosticError, InsufficientDataError, ResourceError, RngStream)
from cmlibs.kinetics.geometry.region import Interval, parse_region
from cmlibs.kinetics.markov.partition import partition_1d
from cmlibs.kinetics.markov.spectral import BasinSpec, build_fine_matrix, exact_rates
from cmlibs.kinetics.sampling.rts import (
    Ensemble, FluxRecord, Walker, _block_stderr, _resample_indices, free_energy, initialize_ensemble,
    load_checkpoint, mean_flux_matrix, multicolor_mfpt, rate_from_flux, rate_series, resample, resample_ensemble,
    reweight_ensemble, rts_step, run_rts, save_checkpoint, steady_state_weights)

from utilities import LONG_TESTS, assert_almost_equal_list

_weights = st.lists(st.floats(min_value=1.0e-6, max_value=1.0e3), min_size=1, max_size=50)


def _still_line():
    """
    Get a 5 state line on which walkers practically never move.
    """
    params = GridWalkerParams(beta=1.0, spacing=1.0, domain=(0.0, 4.0), move_prob=1.0e-15)
    return MetropolisDynamics(flat_potential(((0.0, 4.0),)), params)


def _records(count, transfers, colour_mass):
    return [FluxRecord(step, numpy.array(transfers), numpy.array(colour_mass)) for step in range(count)]


class ResampleTestCase(unittest.TestCase):

    @settings(max_examples=200, deadline=None)
    @given(_weights, st.integers(min_value=1, max_value=30), st.integers(min_value=0, max_value=2 ** 32 - 1))
    def test_conservation(self, weights, target, seed):
        """
        Test the resampler keeps the target count and total weight.
        """
        selected, tw, iterations = _resample_indices(weights, target, RngStream(seed))
        self.assertEqual(target, selected.size)
        self.assertTrue(numpy.all((selected >= 0) & (selected < len(weights))))
        self.assertAlmostEqual(1.0, tw * target / math.fsum(weights), delta=1.0e-12)
        self.assertLessEqual(iterations, len(weights) + target)

    def test_split(self):
        """
        Test a single walker is split into equal copies.
        """
        group = [Walker(-6.0, 0.9, 0)]
        walkers = resample(group, 3, RngStream(1))
        self.assertEqual(3, len(walkers))
        for walker in walkers:
            self.assertEqual(-6.0, walker.position)
            self.assertAlmostEqual(0.3, walker.weight, delta=1.0e-15)
            self.assertEqual(0, walker.colour)
        with self.assertRaises(ValueError):
            resample([], 2, RngStream(1))

    def test_equal_weights(self):
        """
        Test equal weight walkers at the target are kept as they are.
        """
        selected, tw, _ = _resample_indices([0.5, 0.5], 2, RngStream(3))
        self.assertEqual({0, 1}, set(selected.tolist()))
        self.assertEqual(0.5, tw)

    def test_merge_frequencies(self):
        """
        Test merged walkers survive in proportion to their weights.
        """
        rng = RngStream(12)
        trials = 10000
        counts = numpy.zeros(3)
        for _ in range(trials):
            selected, _, _ = _resample_indices([0.6, 0.3, 0.1], 1, rng)
            counts[selected[0]] += 1
        assert_almost_equal_list(self, counts / trials, [0.6, 0.3, 0.1], 0.02)

    def test_unbiased(self):
        """
        Test the weighted average of an observable is unbiased by resampling.
        """
        weights = numpy.array([0.5, 0.3, 0.15, 0.05])
        observable = numpy.array([1.0, 2.0, 3.0, 4.0])
        estimates = []
        for trial in range(4000):
            selected, tw, _ = _resample_indices(weights, 2, RngStream(5, trial))
            estimates.append(tw * numpy.sum(observable[selected]))
        self.assertAlmostEqual(float(numpy.dot(weights, observable)), float(numpy.mean(estimates)), delta=0.06)

    def test_weight_floor(self):
        """
        Test walkers below the weight floor are folded into the heaviest.
        """
        partition = partition_1d((0.0, 4.0), 2)
        ensemble = Ensemble(numpy.array([0, 1, 1]), [1.0e-305, 0.25, 0.5], [0, 0, 0], [0, 0, 0], partition, 2)
        resampled = resample_ensemble(ensemble, RngStream(4))
        self.assertEqual(2, resampled.size)
        self.assertAlmostEqual(0.75, resampled.total_mass(), delta=1.0e-15)
        self.assertTrue(numpy.all(resampled.positions == 1))


class EnsembleTestCase(unittest.TestCase):

    def test_groups(self):
        """
        Test walkers are grouped by cell and colour in order.
        """
        partition = partition_1d((0.0, 4.0), 2)
        ensemble = Ensemble(numpy.array([3, 0, 1, 4]), [0.1, 0.2, 0.3, 0.4], [0, 1, 1, 0], [1, 0, 0, 1], partition, 1)
        groups = ensemble.groups()
        self.assertEqual([(0, 1), (1, 0)], [key for key, _ in groups])
        self.assertEqual([1, 2], groups[0][1].tolist())
        assert_almost_equal_list(self, ensemble.colour_mass(), [0.5, 0.5], 1.0e-15)
        assert_almost_equal_list(self, ensemble.cell_mass(), [0.5, 0.5], 1.0e-15)
        self.assertEqual(4, len(ensemble.walkers()))

    def test_invalid(self):
        """
        Test inconsistent walker arrays are rejected.
        """
        partition = partition_1d((0.0, 4.0), 2)
        with self.assertRaises(ValueError):
            Ensemble(numpy.array([0, 1]), [0.5, 0.0], [0, 0], [0, 0], partition, 1)
        with self.assertRaises(ValueError):
            Ensemble(numpy.array([0, 1]), [0.5, 0.5], [0, 2], [0, 0], partition, 1)
        with self.assertRaises(ValueError):
            Ensemble(numpy.array([0]), [0.5, 0.5], [0, 0], [0, 0], partition, 1)
        with self.assertRaises(ValueError):
            Ensemble(numpy.array([0]), [0.5], [0], [0], partition, 0)
        with self.assertRaises(ValueError):
            Walker(0.0, -1.0, 0)


class StepTestCase(unittest.TestCase):

    def test_recolouring(self):
        """
        Test a walker inside another basin changes colour and its weight is recorded.
        """
        dynamics = _still_line()
        partition = partition_1d((0.0, 4.0), 2)
        regions = [Interval(-0.5, 0.5), Interval(3.5, 4.5)]
        ensemble = Ensemble(numpy.array([0, 4]), [0.3, 0.7], [0, 0], partition.assign([0.0, 4.0]), partition, 2)
        stepped, record = rts_step(ensemble, dynamics, regions, RngStream(1), 0)
        assert_almost_equal_list(self, record.transfers.ravel(), [0.0, 0.7, 0.0, 0.0], 1.0e-15)
        assert_almost_equal_list(self, record.colour_mass, [1.0, 0.0], 1.0e-15)
        assert_almost_equal_list(self, record.flux(2.0).ravel(), [0.0, 0.35, 0.0, 0.0], 1.0e-15)
        self.assertEqual(4, stepped.size)
        assert_almost_equal_list(self, stepped.colour_mass(), [0.3, 0.7], 1.0e-15)
        self.assertTrue(numpy.all(stepped.colours[stepped.positions == 4] == 1))
        with self.assertRaises(ConfigurationError):
            rts_step(ensemble, dynamics, regions[:1], RngStream(1), 0)

    def test_mass_conserved(self):
        """
        Test total weight is conserved over a run.
        """
        dynamics = benchmark_dynamics('bench1d')
        partition = partition_1d(((-10.0, 10.0),), 8)
        regions = [Interval(-7.0, -5.0), Interval(5.0, 7.0)]
        ensemble, records = run_rts(dynamics, partition, regions, 2, 30, RngStream(6, 'rts'))
        self.assertEqual(30, len(records))
        self.assertAlmostEqual(1.0, ensemble.total_mass(), delta=1.0e-12)
        for (cell, colour), indices in ensemble.groups():
            self.assertEqual(2, indices.size)
            self.assertTrue(numpy.all(ensemble.weights[indices] == ensemble.weights[indices[0]]))

    def test_group_cap(self):
        """
        Test a group above the cap raises a resource error.
        """
        dynamics = benchmark_dynamics('bench1d')
        partition = partition_1d(((-10.0, 10.0),), 8)
        regions = [Interval(-7.0, -5.0), Interval(5.0, 7.0)]
        with self.assertRaises(ResourceError):
            initialize_ensemble(dynamics, partition, regions, 2, RngStream(6), max_group_size=1)
        with self.assertRaises(ConfigurationError):
            initialize_ensemble(dynamics, partition, regions, 2, RngStream(6), colour_masses=[0.5, 0.6])

    def test_checkpoint_resume(self):
        """
        Test a run resumed from a checkpoint matches the uninterrupted run.
        """
        dynamics = benchmark_dynamics('bench1d')
        partition = partition_1d(((-10.0, 10.0),), 8)
        regions = [Interval(-7.0, -5.0), Interval(5.0, 7.0)]
        full, _ = run_rts(dynamics, partition, regions, 2, 20, RngStream(9, 'rts'))
        with tempfile.TemporaryDirectory() as directory:
            path = os.path.join(directory, 'checkpoint.txt')
            run_rts(dynamics, partition, regions, 2, 10, RngStream(9, 'rts'), checkpoint=path, checkpoint_every=5)
            ensemble, step, rng = load_checkpoint(path, dynamics, partition)
            self.assertEqual(10, step)
            self.assertEqual(('rts',), rng.key)
            resumed, _ = run_rts(dynamics, partition, regions, 2, 10, rng, ensemble=ensemble, start=step)
        self.assertTrue(numpy.array_equal(full.positions, resumed.positions))
        self.assertTrue(numpy.array_equal(full.weights, resumed.weights))
        self.assertTrue(numpy.array_equal(full.colours, resumed.colours))

    def test_checkpoint_grid(self):
        """
        Test grid walker checkpoints keep integer positions.
        """
        dynamics = _still_line()
        partition = partition_1d((0.0, 4.0), 2)
        ensemble = Ensemble(numpy.array([0, 4]), [0.3, 0.7], [0, 1], [0, 1], partition, 2)
        with tempfile.TemporaryDirectory() as directory:
            path = os.path.join(directory, 'checkpoint.txt')
            save_checkpoint(path, ensemble, 7, RngStream(3, ('rts', 2)))
            loaded, step, rng = load_checkpoint(path, dynamics, partition)
            with open(path, 'w') as f:
                f.write('not a checkpoint\n')
            with self.assertRaises(ConfigurationError):
                load_checkpoint(path, dynamics, partition)
        self.assertEqual(7, step)
        self.assertEqual(('rts', 2), rng.key)
        self.assertEqual([0, 4], loaded.positions.tolist())
        self.assertTrue(numpy.issubdtype(loaded.positions.dtype, numpy.integer))
        self.assertEqual([0.3, 0.7], loaded.weights.tolist())


class FluxTestCase(unittest.TestCase):

    def test_record(self):
        """
        Test transfers may not exceed the source colour weight.
        """
        with self.assertRaises(ValueError):
            FluxRecord(0, numpy.array([[0.0, 0.6], [0.0, 0.0]]), numpy.array([0.5, 0.5]))

    def test_rate_from_flux(self):
        """
        Test rates from constant fluxes.
        """
        records = _records(10, [[0.0, 0.01], [0.002, 0.0]], [0.5, 0.5])
        rates = rate_from_flux(records, 0, 1.0)
        self.assertAlmostEqual(0.02, rates.forward, delta=1.0e-15)
        self.assertAlmostEqual(0.004, rates.backward, delta=1.0e-15)
        self.assertEqual(0.0, rates.stderr_forward)
        assert_almost_equal_list(self, mean_flux_matrix(records, 5, 1.0).ravel(), [0.0, 0.02, 0.004, 0.0], 1.0e-15)
        with self.assertRaises(InsufficientDataError):
            rate_from_flux(records, 20, 1.0)

    def test_rate_series(self):
        """
        Test running rates at evenly spread steps.
        """
        records = _records(10, [[0.0, 0.01], [0.002, 0.0]], [0.5, 0.5])
        series = rate_series(records, 0, 1.0, points=5)
        self.assertEqual([0.0, 2.0, 4.0, 6.0, 9.0], series.index.tolist())
        self.assertEqual('step', series.index_name)
        assert_almost_equal_list(self, series.forward, [0.02] * 5, 1.0e-15)
        with self.assertRaises(InsufficientDataError):
            rate_series(records, 10, 1.0)

    def test_block_stderr(self):
        """
        Test block averaging on uncorrelated noise.
        """
        series = numpy.random.default_rng(0).standard_normal(4096)
        self.assertAlmostEqual(1.0, _block_stderr(series) * 64.0, delta=0.2)
        self.assertTrue(math.isnan(_block_stderr([1.0])))

    def test_steady_state_weights(self):
        """
        Test cell weights balancing the observed fluxes.
        """
        weights = steady_state_weights([[0.0, 2.0], [1.0, 0.0]], [1.0, 1.0])
        assert_almost_equal_list(self, weights, [1.0 / 3.0, 2.0 / 3.0], 1.0e-12)
        with self.assertRaises(DiagnosticError):
            steady_state_weights([[0.0, 1.0], [0.0, 0.0]], [1.0, 1.0])
        with self.assertRaises(ValueError):
            steady_state_weights([[0.0, 1.0], [1.0, 0.0]], [1.0])

    def test_multicolor_mfpt(self):
        """
        Test passage times between two coloured basins.
        """
        times = multicolor_mfpt([[0.0, 0.02], [0.04, 0.0]], 0.5, 1)
        assert_almost_equal_list(self, times, [0.5 / 0.01, 0.0], 1.0e-9)
        with self.assertRaises(ConfigurationError):
            multicolor_mfpt([[0.0, 3.0], [0.0, 0.0]], 1.0, 1)
        with self.assertRaises(ConfigurationError):
            multicolor_mfpt([[0.0, -0.1], [0.1, 0.0]], 1.0, 1)


class ReweightTestCase(unittest.TestCase):

    def test_reweight(self):
        """
        Test cell weights are applied within each colour.
        """
        partition = partition_1d((0.0, 4.0), 2)
        ensemble = Ensemble(numpy.array([0, 4, 1, 3]), [0.2, 0.2, 0.3, 0.3], [0, 0, 1, 1], [0, 1, 0, 1], partition, 1)
        reweighted = reweight_ensemble(ensemble, [0.25, 0.75])
        assert_almost_equal_list(self, reweighted.weights, [0.1, 0.3, 0.15, 0.45], 1.0e-15)
        assert_almost_equal_list(self, reweighted.colour_mass(), ensemble.colour_mass(), 1.0e-15)
        with self.assertRaises(DiagnosticError):
            reweight_ensemble(ensemble, [0.0, 1.0])

    def test_free_energy(self):
        """
        Test cell free energies relative to the most populated cell.
        """
        partition = partition_1d((0.0, 4.0), 3)
        ensemble = Ensemble(numpy.array([0, 2]), [0.25, 0.75], [0, 1], [0, 1], partition, 1)
        energy = free_energy(ensemble, 2.0)
        self.assertAlmostEqual(math.log(3.0) / 2.0, energy[0], delta=1.0e-12)
        self.assertEqual(0.0, energy[1])
        self.assertEqual(math.inf, energy[2])


class RateOracleTestCase(unittest.TestCase):

    def test_two_state(self):
        """
        Test the flux rate of a two state chain against -ln(1 - 2p) / (2 dt).
        """
        p = 0.002
        params = GridWalkerParams(beta=1.0, spacing=1.0, domain=(0.0, 1.0), move_prob=p)
        dynamics = MetropolisDynamics(flat_potential(((0.0, 1.0),)), params)
        partition = partition_1d((0.0, 1.0), 2)
        regions = [Interval(0.0, 0.4), Interval(0.6, 1.0)]
        ensemble, records = run_rts(dynamics, partition, regions, 10, 20000, RngStream(5, 'toy'))
        rates = rate_from_flux(records, 1000, dynamics.dt)
        expected = -math.log(1.0 - 2.0 * p) / (2.0 * dynamics.dt)
        self.assertLess(abs(rates.forward - expected), 2.0 * rates.stderr_forward)
        self.assertLess(abs(rates.backward - expected), 2.0 * rates.stderr_backward)
        self.assertAlmostEqual(1.0, ensemble.total_mass(), delta=1.0e-9)

    def test_fig1d_exact(self):
        """
        Test flux rates on the 1D lattice well agree with the spectral rates.
        """
        dynamics = benchmark_dynamics('fig1d')
        partition = partition_1d(dynamics.params.domain, 10)
        regions = [Interval(0.0, 0.3), Interval(0.7, 1.0)]
        fine = build_fine_matrix(dynamics)
        basins = BasinSpec.from_regions(fine.states, regions[0], regions[1], parse_region('halfspace 0.5 1'))
        exact = exact_rates(fine, basins, dynamics.dt)
        ensemble, records = run_rts(dynamics, partition, regions, 10, 20000, RngStream(3))
        rates = rate_from_flux(records, 2000, dynamics.dt)
        self.assertLess(abs(rates.forward - exact.forward), 2.0 * rates.stderr_forward)
        self.assertLess(abs(rates.backward - exact.backward), 2.0 * rates.stderr_backward)
        self.assertLess(rates.stderr_forward, 0.5 * exact.forward)
        self.assertAlmostEqual(1.0, ensemble.total_mass(), delta=1.0e-9)

    def test_observable_unbiased(self):
        """
        Test the weighted ensemble average of an observable after a few steps matches the propagated chain.
        """
        params = GridWalkerParams(beta=1.0, spacing=1.0, domain=(0.0, 4.0), move_prob=0.3)
        dynamics = MetropolisDynamics(flat_potential(((0.0, 4.0),)), params)
        partition = partition_1d((0.0, 4.0), 5)
        regions = [Interval(-0.5, 0.5), Interval(3.5, 4.5)]
        start = numpy.array([0.1, 0.3, 0.2, 0.25, 0.15])
        observable = numpy.array([1.0, 0.0, 2.0, 5.0, 3.0])
        steps = 4
        positions = numpy.arange(5)
        colours = numpy.array([0, 0, 0, 1, 1])
        exact = float(start @ numpy.linalg.matrix_power(build_fine_matrix(dynamics).dense(), steps) @ observable)
        runs = 10000 if LONG_TESTS else 1000
        estimates = numpy.empty(runs)
        for run in range(runs):
            cells = partition.assign(dynamics.coordinates(positions))
            ensemble = Ensemble(positions, start, colours, cells, partition, 1)
            rng = RngStream(21, run)
            for step in range(steps):
                ensemble, _ = rts_step(ensemble, dynamics, regions, rng, step)
            estimates[run] = numpy.dot(ensemble.weights, observable[ensemble.positions])
        error = numpy.std(estimates, ddof=1) / math.sqrt(runs)
        self.assertLess(abs(float(numpy.mean(estimates)) - exact), 3.0 * error)


if __name__ == "__main__":
    unittest.main()
