"""
Planes used as cell boundaries and milestones.
"""
import json

import numpy

from cmlibs.maths.vectorops import add, dot, magnitude, mult, normalize, sub


class Plane(object):
    """
    A description of a plane (a point in 1D, a line in 2D).
    The plane is described by a point on it and a unit normal vector.
    The positive side of the plane is the side the normal points to.
    """

    precision = 12

    def __init__(self, point, normal):
        point = [float(v) for v in point]
        normal = [float(v) for v in normal]
        if len(point) != len(normal):
            raise ValueError(f'Plane point and normal have different dimensions: {len(point)} and {len(normal)}.')
        if magnitude(normal) == 0.0:
            raise ValueError('Plane normal must be non-zero.')
        self._point = point
        self._normal = normalize(normal)

    def getDimension(self):
        return len(self._point)

    def getNormal(self):
        return self._normal

    def getPoint(self):
        return self._point

    def setPoint(self, point):
        self._point = [float(v) for v in point]

    def setPlaneEquation(self, normal, point):
        self._normal = normalize([float(v) for v in normal])
        self._point = [float(v) for v in point]

    def getOffset(self):
        """
        Get d in the plane equation n.x = d.
        """
        return dot(self._normal, self._point)

    def signed_distance(self, x):
        """
        Get the signed distance of positions from the plane.

        :param x: A single position or an array of positions with the plane dimension as last axis.
        :return: Distance, positive on the normal side; float or array.
        """
        x = numpy.asarray(x, dtype=float)
        if x.ndim == 0 or x.shape[-1] != self.getDimension():
            if self.getDimension() != 1:
                raise ValueError(f'Position dimension does not match plane dimension {self.getDimension()}.')
            x = x[..., numpy.newaxis]
        distance = x @ numpy.asarray(self._normal) - self.getOffset()
        return float(distance) if distance.ndim == 0 else distance

    def reflect(self, x):
        """
        Mirror a position through the plane: x - 2((x - p).n)n.
        """
        if numpy.ndim(x) == 0:
            return float(self.reflect([x])[0])
        x = [float(v) for v in x]
        return sub(x, mult(self._normal, 2.0 * dot(sub(x, self._point), self._normal)))

    def reflect_array(self, x):
        """
        Mirror an array of positions through the plane. 1D planes accept a flat array.
        """
        x = numpy.asarray(x, dtype=float)
        distance = self.signed_distance(x)
        normal = numpy.asarray(self._normal)
        if self.getDimension() == 1 and (x.ndim == 0 or x.shape[-1] != 1):
            return x - 2.0 * distance * normal[0]
        return x - 2.0 * numpy.multiply.outer(distance, normal)

    def project(self, x):
        """
        Get the closest point on the plane to x.
        """
        x = [float(v) for v in x]
        return sub(x, mult(self._normal, dot(sub(x, self._point), self._normal)))

    def translated(self, distance):
        """
        Get a parallel plane moved *distance* along the normal.
        """
        return Plane(add(self._point, mult(self._normal, distance)), self._normal)

    def serialize(self):
        return json.dumps({'point': self._point, 'normal': self._normal})

    @classmethod
    def deserialize(cls, str_rep):
        values = json.loads(str_rep)
        return cls(values['point'], values['normal'])

    def __repr__(self):
        return f'Plane(point={self._point}, normal={self._normal})'

    def __hash__(self, *args, **kwargs):
        p = [str(int(round(v * (10 ** self.precision)))) for v in self._point]
        n = [str(int(round(v * (10 ** self.precision)))) for v in self._normal]
        str_repr = ','.join(p) + ';' + ','.join(n)
        return hash(str_repr)

    def __eq__(self, other):
        if not isinstance(other, Plane):
            return NotImplemented
        return hash(self) == hash(other)

    def __ne__(self, other):
        result = self.__eq__(other)
        return result if result is NotImplemented else not result
