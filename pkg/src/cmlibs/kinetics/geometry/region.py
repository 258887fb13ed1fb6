"""
Regions of configuration space used to define basins.

Every region answers membership queries for arrays of positions. One
dimensional positions are flat arrays, higher dimensional positions have the
coordinate as last axis.
"""
import numpy

from cmlibs.maths.vectorops import magnitude, sub

from cmlibs.kinetics.general import ConfigurationError
from cmlibs.kinetics.geometry.plane import Plane


def _as_points(x, dimension):
    x = numpy.asarray(x, dtype=float)
    if dimension == 1:
        if x.ndim > 0 and x.shape[-1] == 1 and x.ndim > 1:
            x = x[..., 0]
        return x
    if x.shape[-1] != dimension:
        raise ValueError(f'Positions have dimension {x.shape[-1]}, region has dimension {dimension}.')
    return x


class Region(object):
    """
    Base class for regions.
    """

    dimension = 1

    def contains(self, x):
        """
        Get membership of positions.

        :param x: Position or array of positions.
        :return: Boolean array with one entry per position.
        """
        raise NotImplementedError()

    def contains_point(self, point):
        return bool(self.contains(numpy.asarray(point, dtype=float)))

    def bounds(self):
        """
        Get the axis aligned bounding box as (lower, upper) lists, or None if unbounded.
        """
        return None


class Interval(Region):
    """
    Closed interval [lower, upper] on the line.
    """

    def __init__(self, lower, upper):
        if not lower < upper:
            raise ValueError(f'Interval lower bound {lower} must be less than upper bound {upper}.')
        self._lower = float(lower)
        self._upper = float(upper)

    def getLower(self):
        return self._lower

    def getUpper(self):
        return self._upper

    def contains(self, x):
        x = _as_points(x, 1)
        return (x >= self._lower) & (x <= self._upper)

    def bounds(self):
        return [self._lower], [self._upper]

    def __repr__(self):
        return f'Interval({self._lower}, {self._upper})'


class Disk(Region):
    """
    Closed disk in the plane.
    """

    dimension = 2

    def __init__(self, centre, radius):
        if len(centre) != 2:
            raise ValueError('Disk centre must have 2 components.')
        if radius <= 0.0:
            raise ValueError(f'Disk radius must be positive, got {radius}.')
        self._centre = [float(v) for v in centre]
        self._radius = float(radius)

    def getCentre(self):
        return self._centre

    def getRadius(self):
        return self._radius

    def contains(self, x):
        x = _as_points(x, 2)
        offset = x - numpy.asarray(self._centre)
        return numpy.einsum('...i,...i->...', offset, offset) <= self._radius ** 2

    def contains_point(self, point):
        return magnitude(sub([float(v) for v in point], self._centre)) <= self._radius

    def bounds(self):
        return [c - self._radius for c in self._centre], [c + self._radius for c in self._centre]

    def __repr__(self):
        return f'Disk({self._centre}, {self._radius})'


class HalfSpace(Region):
    """
    Open half space on the negative side of a plane. Points on the plane are
    outside, so a half space and its complement split space with ties going to
    the complement.
    """

    def __init__(self, plane):
        self._plane = plane
        self.dimension = plane.getDimension()

    def getPlane(self):
        return self._plane

    def contains(self, x):
        x = _as_points(x, self.dimension)
        return numpy.asarray(self._plane.signed_distance(x)) < 0.0

    def __repr__(self):
        return f'HalfSpace({self._plane!r})'


def parse_region(text, line=None):
    """
    Parse a region from its configuration text.

    Recognised forms are ``interval LOWER UPPER``, ``disk X Y RADIUS`` and
    ``halfspace POINT... NORMAL...`` with as many point as normal components.

    :param text: Region description.
    :param line: Optional configuration line number for error messages.
    :return: Region.
    """
    parts = text.split()
    if not parts:
        raise ConfigurationError('Empty region description.', line=line)
    kind = parts[0].lower()
    try:
        values = [float(v) for v in parts[1:]]
    except ValueError:
        raise ConfigurationError(f'Region "{text}" has non-numeric parameters.', line=line)
    try:
        if kind == 'interval' and len(values) == 2:
            return Interval(*values)
        if kind == 'disk' and len(values) == 3:
            return Disk(values[:2], values[2])
        if kind == 'halfspace' and values and len(values) % 2 == 0:
            half = len(values) // 2
            return HalfSpace(Plane(values[:half], values[half:]))
    except ValueError as e:
        raise ConfigurationError(f'Invalid region "{text}": {e}', line=line)
    raise ConfigurationError(f'Cannot parse region "{text}".', line=line)
