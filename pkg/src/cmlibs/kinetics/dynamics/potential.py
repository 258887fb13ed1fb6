"""
Potential energy surfaces, including the benchmark potentials.
"""
import numpy

from cmlibs.kinetics.general import ConfigurationError


class Potential(object):
    """
    A potential energy function on a box shaped domain.

    The energy and gradient callables accept arrays of positions: flat arrays
    in 1D, arrays with coordinate as last axis otherwise. They must be module
    level functions for the potential to be used by worker processes.
    """

    def __init__(self, name, energy, gradient, domain):
        """
        :param name: Identifier.
        :param energy: Callable returning U(x).
        :param gradient: Callable returning grad U(x), same shape as x.
        :param domain: Sequence of (lower, upper) per dimension.
        """
        self._name = name
        self._energy = energy
        self._gradient = gradient
        self._domain = tuple((float(lo), float(hi)) for lo, hi in domain)
        for lo, hi in self._domain:
            if not lo < hi:
                raise ConfigurationError(f'Potential {name} has an empty domain [{lo}, {hi}].')

    def getName(self):
        return self._name

    def getDomain(self):
        return self._domain

    def getDimension(self):
        return len(self._domain)

    def energy(self, x):
        """
        Evaluate the potential at positions x.
        """
        return self._energy(numpy.asarray(x, dtype=float))

    def gradient(self, x):
        """
        Evaluate the potential gradient at positions x.
        """
        return self._gradient(numpy.asarray(x, dtype=float))

    def boltzmann_weight(self, x, beta, reference=0.0):
        """
        Get exp(-beta (U(x) - reference)).
        """
        return numpy.exp(-beta * (self.energy(x) - reference))

    def __repr__(self):
        return f'Potential({self._name!r}, domain={self._domain})'


def _bench1d_energy(x):
    return (x + 5.0) ** 2 * (x - 5.0) ** 2 / 1000.0 + 3.0 * numpy.exp(-x ** 2 / 10.0) - x / 10.0


def _bench1d_gradient(x):
    return 4.0 * x * (x ** 2 - 25.0) / 1000.0 - 0.6 * x * numpy.exp(-x ** 2 / 10.0) - 0.1


def _bench2d_energy(x):
    return numpy.exp(-x[..., 0] ** 2) + x[..., 1] ** 2


def _bench2d_gradient(x):
    gradient = numpy.empty_like(x)
    gradient[..., 0] = -2.0 * x[..., 0] * numpy.exp(-x[..., 0] ** 2)
    gradient[..., 1] = 2.0 * x[..., 1]
    return gradient


def _fig1d_energy(x):
    return 400.0 * (0.98 * (x - 0.2) ** 4 + (x - 0.8) ** 4 - 1.5 * (x - 0.5) ** 2)


def _fig1d_gradient(x):
    return 400.0 * (3.92 * (x - 0.2) ** 3 + 4.0 * (x - 0.8) ** 3 - 3.0 * (x - 0.5))


def _flat_energy(x):
    return numpy.zeros(x.shape)


def _flat_energy_nd(x):
    return numpy.zeros(x.shape[:-1])


def _flat_gradient(x):
    return numpy.zeros_like(x)


_BENCHMARKS = {
    'bench1d': (_bench1d_energy, _bench1d_gradient, ((-10.0, 10.0),)),
    'bench2d': (_bench2d_energy, _bench2d_gradient, ((-1.0, 1.0), (-1.0, 1.0))),
    'fig1d': (_fig1d_energy, _fig1d_gradient, ((0.0, 1.0),)),
}


def benchmark_names():
    return sorted(_BENCHMARKS.keys())


def benchmark_potential(name):
    """
    Get one of the benchmark potentials.

    :param name: One of bench1d, bench2d, fig1d.
    :return: Potential.
    """
    try:
        energy, gradient, domain = _BENCHMARKS[name]
    except KeyError:
        raise ConfigurationError(f'Unknown benchmark potential "{name}", expected one of {", ".join(benchmark_names())}.')
    return Potential(name, energy, gradient, domain)


def flat_potential(domain):
    """
    Get a constant zero potential on the given domain.
    """
    energy = _flat_energy if len(domain) == 1 else _flat_energy_nd
    return Potential('flat', energy, _flat_gradient, domain)
