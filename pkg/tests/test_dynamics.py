import unittest

import numpy

from cmlibs.kinetics.dynamics.potential import Potential, benchmark_names, benchmark_potential, flat_potential
from cmlibs.kinetics.dynamics.propagator import (
    BrownianParams, GridWalkerParams, Lattice, MetropolisDynamics, benchmark_dynamics, brownian_step,
    metropolis_step, reflect_into_interval)
from cmlibs.kinetics.general import ConfigurationError, PropagationError, RngStream
from cmlibs.kinetics.geometry.region import Disk, Interval
from cmlibs.kinetics.markov.partition import partition_1d

from utilities import assert_almost_equal_list


def _nan_energy(x):
    return numpy.full(x.shape, numpy.nan)


def _nan_gradient(x):
    return numpy.full(x.shape, numpy.nan)


class PotentialTestCase(unittest.TestCase):

    def test_benchmark_values(self):
        """
        Test benchmark energies at known points.
        """
        self.assertEqual(['bench1d', 'bench2d', 'fig1d'], benchmark_names())
        self.assertAlmostEqual(3.625, float(benchmark_potential('bench1d').energy(0.0)))
        self.assertAlmostEqual(1.0, float(benchmark_potential('bench2d').energy([0.0, 0.0])))
        self.assertAlmostEqual(400.0 * (0.98 * 0.3 ** 4 + 0.3 ** 4), float(benchmark_potential('fig1d').energy(0.5)))
        self.assertEqual(((-1.0, 1.0), (-1.0, 1.0)), benchmark_potential('bench2d').getDomain())

    def test_gradients(self):
        """
        Test analytic gradients against central differences.
        """
        h = 1.0e-6
        for name, points in [('bench1d', numpy.linspace(-9.5, 9.5, 11)), ('fig1d', numpy.linspace(0.05, 0.95, 7))]:
            potential = benchmark_potential(name)
            difference = (potential.energy(points + h) - potential.energy(points - h)) / (2.0 * h)
            scale = max(1.0, float(numpy.max(numpy.abs(difference))))
            assert_almost_equal_list(self, potential.gradient(points), difference, 1.0e-6 * scale)
        potential = benchmark_potential('bench2d')
        points = numpy.array([[0.3, -0.2], [-0.7, 0.9], [0.0, 0.5]])
        gradient = potential.gradient(points)
        for axis in range(2):
            step = numpy.zeros(2)
            step[axis] = h
            difference = (potential.energy(points + step) - potential.energy(points - step)) / (2.0 * h)
            assert_almost_equal_list(self, gradient[:, axis], difference, 1.0e-6)

    def test_boltzmann_weight(self):
        """
        Test Boltzmann weights relative to a reference energy.
        """
        potential = benchmark_potential('bench2d')
        weight = potential.boltzmann_weight(numpy.array([[0.0, 0.0]]), 10.0, reference=1.0)
        self.assertAlmostEqual(1.0, float(weight[0]))

    def test_invalid(self):
        """
        Test unknown benchmarks and empty domains are rejected.
        """
        with self.assertRaises(ConfigurationError):
            benchmark_potential('bench3d')
        with self.assertRaises(ConfigurationError):
            flat_potential(((1.0, 1.0),))
        flat = flat_potential(((0.0, 1.0), (0.0, 2.0)))
        self.assertEqual(2, flat.getDimension())
        self.assertEqual((3,), flat.energy(numpy.zeros((3, 2))).shape)


class LatticeTestCase(unittest.TestCase):

    def test_shape(self):
        """
        Test lattice sizes including boundary nodes.
        """
        lattice = Lattice(((-1.0, 1.0), (-1.0, 1.0)), 0.01)
        self.assertEqual((201, 201), lattice.shape)
        self.assertEqual(201 * 201, lattice.size)
        self.assertEqual(26, Lattice((0.0, 1.0), 0.04).size)
        with self.assertRaises(ConfigurationError):
            Lattice((0.0, 1.0), 0.3)

    def test_neighbour_pairs(self):
        """
        Test a 3 x 3 lattice has 12 adjacent pairs.
        """
        lattice = Lattice(((0.0, 2.0), (0.0, 2.0)), 1.0)
        pairs = lattice.neighbour_pairs()
        self.assertEqual((12, 2), pairs.shape)
        self.assertTrue(numpy.all(pairs[:, 0] < pairs[:, 1]))
        self.assertEqual(20, Lattice((0.0, 1.0), 0.05).neighbour_pairs().shape[0])

    def test_coordinates(self):
        """
        Test flat indices map to coordinates and back.
        """
        lattice = Lattice(((-1.0, 1.0), (-1.0, 1.0)), 0.5)
        flat = numpy.arange(lattice.size)
        points = lattice.coordinates(flat)
        self.assertEqual((25, 2), points.shape)
        assert_almost_equal_list(self, points[7], [-0.5, 0.0], 1.0e-12)
        self.assertTrue(numpy.array_equal(flat, lattice.locate(points)))
        self.assertEqual(0, int(lattice.locate(numpy.array([[-3.0, -3.0]]))[0]))


class BrownianTestCase(unittest.TestCase):

    def test_reflect_into_interval(self):
        """
        Test positions are mirrored at the walls.
        """
        assert_almost_equal_list(self, reflect_into_interval([11.0, -10.5, 3.0, 29.0], -10.0, 10.0),
                                 [9.0, -9.5, 3.0, -9.0], 1.0e-12)

    def test_drift(self):
        """
        Test a noiseless step follows the force.
        """
        potential = benchmark_potential('bench1d')
        params = BrownianParams(beta=5.0, diffusion=0.06, dt=0.03, domain=(-10.0, 10.0))
        x = numpy.array([-6.0, 0.5, 4.0])
        expected = x - 5.0 * 0.06 * potential.gradient(x) * 0.03
        moved = brownian_step(x, potential, params, RngStream(0), noise=numpy.zeros(3))
        assert_almost_equal_list(self, moved, expected, 1.0e-14)
        self.assertAlmostEqual(numpy.sqrt(2.0 * 0.06 * 0.03), params.kernel_width)

    def test_noise_and_walls(self):
        """
        Test a flat potential step is pure noise, reflected at the walls.
        """
        params = BrownianParams(beta=1.0, diffusion=0.5, dt=1.0, domain=(0.0, 1.0))
        potential = flat_potential(((0.0, 1.0),))
        moved = brownian_step(numpy.array([0.5, 0.9]), potential, params, RngStream(0), noise=numpy.array([0.1, 0.3]))
        assert_almost_equal_list(self, moved, [0.6, 0.8], 1.0e-12)
        self.assertIsInstance(brownian_step(0.5, potential, params, RngStream(0), noise=0.0), float)
        x = RngStream(3).uniform(1000)
        for step in range(20):
            x = brownian_step(x, potential, params, RngStream(3, step))
        self.assertTrue(numpy.all((x >= 0.0) & (x <= 1.0)))

    def test_reproducible(self):
        """
        Test steps drawn from equal streams are equal.
        """
        dynamics = benchmark_dynamics('bench1d')
        x = numpy.linspace(-8.0, 8.0, 5)
        self.assertTrue(numpy.array_equal(dynamics.step(x, RngStream(11, 'a')), dynamics.step(x, RngStream(11, 'a'))))

    def test_non_finite_force(self):
        """
        Test a non-finite force raises a propagation error.
        """
        potential = Potential('nan', _nan_energy, _nan_gradient, ((0.0, 1.0),))
        params = BrownianParams(beta=1.0, diffusion=1.0, dt=0.1, domain=(0.0, 1.0))
        with self.assertRaises(PropagationError):
            brownian_step(numpy.array([0.5]), potential, params, RngStream(0))

    def test_invalid_params(self):
        """
        Test invalid integrator parameters.
        """
        for beta, diffusion, dt in [(0.0, 1.0, 1.0), (1.0, -1.0, 1.0), (1.0, 1.0, 0.0)]:
            with self.assertRaises(ConfigurationError):
                BrownianParams(beta=beta, diffusion=diffusion, dt=dt, domain=(0.0, 1.0))

    def test_sample_in_cell(self):
        """
        Test Boltzmann samples restricted to a cell stay in the cell.
        """
        dynamics = benchmark_dynamics('bench1d')
        partition = partition_1d(((-10.0, 10.0),), 32)
        samples = dynamics.sample_in_cell(partition, 8, 500, RngStream(5))
        self.assertEqual(500, samples.size)
        self.assertTrue(numpy.all(partition.assign(samples) == 8))

    def test_uniform_in_region(self):
        """
        Test uniform samples lie in the region.
        """
        dynamics = benchmark_dynamics('bench1d')
        samples = dynamics.uniform_in_region(Interval(-7.0, -5.0), 100, RngStream(2))
        self.assertEqual(100, samples.size)
        self.assertTrue(numpy.all((samples >= -7.0) & (samples <= -5.0)))


class MetropolisTestCase(unittest.TestCase):

    def test_move_frequencies(self):
        """
        Test proposal and rejection frequencies on a flat line.
        """
        params = GridWalkerParams(beta=1.0, spacing=1.0, domain=(0.0, 4.0), move_prob=0.25)
        potential = flat_potential(((0.0, 4.0),))
        count = 20000
        rng = RngStream(9)
        moved = metropolis_step(numpy.full(count, 2), potential, params, rng)
        self.assertEqual(2 * count, rng.draws)
        frequencies = numpy.bincount(moved, minlength=5) / count
        assert_almost_equal_list(self, frequencies, [0.0, 0.25, 0.5, 0.25, 0.0], 0.02)
        walls = metropolis_step(numpy.zeros(count, dtype=int), potential, params, RngStream(10))
        self.assertAlmostEqual(0.75, float(numpy.mean(walls == 0)), delta=0.02)
        self.assertEqual(0, int(numpy.min(walls)))

    def test_acceptance(self):
        """
        Test uphill moves are accepted with the Boltzmann factor.
        """
        dynamics = benchmark_dynamics('fig1d')
        energies = dynamics.energies
        state = 5
        count = 40000
        moved = dynamics.step(numpy.full(count, state), RngStream(4))
        for neighbour in (state - 1, state + 1):
            expected = 0.25 * min(1.0, numpy.exp(-(energies[neighbour] - energies[state])))
            self.assertAlmostEqual(expected, float(numpy.mean(moved == neighbour)), delta=0.01)

    def test_scalar(self):
        """
        Test a single walker index stays an int.
        """
        dynamics = benchmark_dynamics('fig1d')
        self.assertIsInstance(dynamics.step(10, RngStream(1)), int)

    def test_params(self):
        """
        Test move probability defaults and limits.
        """
        self.assertAlmostEqual(0.25, GridWalkerParams(beta=1.0, spacing=0.5, domain=((0.0, 1.0), (0.0, 1.0))).move_prob)
        self.assertAlmostEqual(0.5, GridWalkerParams(beta=1.0, spacing=0.5, domain=(0.0, 1.0)).move_prob)
        with self.assertRaises(ConfigurationError):
            GridWalkerParams(beta=1.0, spacing=0.5, domain=((0.0, 1.0), (0.0, 1.0)), move_prob=0.3)
        with self.assertRaises(ConfigurationError):
            GridWalkerParams(beta=1.0, spacing=0.0, domain=(0.0, 1.0))
        with self.assertRaises(ConfigurationError):
            MetropolisDynamics(benchmark_potential('bench1d'), GridWalkerParams(beta=1.0, spacing=0.5, domain=((0.0, 1.0), (0.0, 1.0))))

    def test_region_sampling(self):
        """
        Test uniform grid states in a disk and cell samples on the grid.
        """
        dynamics = benchmark_dynamics('bench2d', spacing=0.05)
        states = dynamics.uniform_in_region(Disk([-1.0, 0.0], 0.4), 50, RngStream(3))
        self.assertTrue(numpy.all(Disk([-1.0, 0.0], 0.4).contains(dynamics.coordinates(states))))


class BenchmarkDynamicsTestCase(unittest.TestCase):

    def test_fine_states(self):
        """
        Test the fine state counts of the benchmarks.
        """
        bench1d = benchmark_dynamics('bench1d')
        states = bench1d.fine_states()
        self.assertEqual(667, states.size)
        self.assertAlmostEqual(-10.0, states[0])
        self.assertAlmostEqual(9.98, states[-1])
        self.assertEqual(0.03, bench1d.dt)
        self.assertEqual(26, benchmark_dynamics('fig1d').fine_states().size)
        bench2d = benchmark_dynamics('bench2d')
        self.assertEqual((201, 201), bench2d.lattice.shape)
        self.assertEqual(1.0, bench2d.dt)
        self.assertAlmostEqual(4.0, benchmark_dynamics('bench2d', spacing=0.02).dt)

    def test_overrides(self):
        """
        Test parameter overrides and rejected names.
        """
        self.assertEqual(2.0, benchmark_dynamics('bench1d', beta=2.0).beta)
        self.assertEqual(5.0, benchmark_dynamics('bench1d', beta=None).beta)
        with self.assertRaises(ConfigurationError):
            benchmark_dynamics('bench1d', temperature=300.0)
        with self.assertRaises(ConfigurationError):
            benchmark_dynamics('bench4d')


if __name__ == "__main__":
    unittest.main()
