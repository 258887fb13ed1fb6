"""
General utilities shared by every estimator: the error hierarchy and
reproducible random number streams.
"""
import concurrent.futures
import math
import zlib

import numpy

EXIT_SUCCESS = 0
EXIT_FAILURE = 1
EXIT_CONFIGURATION = 2
EXIT_NUMERICAL = 3
EXIT_INSUFFICIENT_DATA = 4


class KineticsError(Exception):
    """
    Base class for all errors raised by the rate estimators.
    """

    exit_code = EXIT_FAILURE
    kind = "error"

    def as_record(self):
        """
        Get a dict describing the error, suitable for writing as JSON.
        """
        return {"error": self.kind, "type": type(self).__name__, "message": str(self)}


class ConfigurationError(KineticsError, ValueError):
    """
    Raised for invalid parameters or configuration files.
    """

    exit_code = EXIT_CONFIGURATION
    kind = "configuration"

    def __init__(self, message, line=None, problems=None):
        """
        :param message: Description of the error.
        :param line: Optional line number in the configuration file.
        :param problems: Optional list of dicts with keys section, key, line
            and message, one per offending configuration entry.
        """
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
        self.problems = list(problems) if problems else []

    def as_record(self):
        record = super().as_record()
        if self.line is not None:
            record["line"] = self.line
        if self.problems:
            record["problems"] = self.problems
        return record


class NumericalError(KineticsError, ArithmeticError):
    """
    Raised when a numerical method fails or its result fails a residual check.
    """

    exit_code = EXIT_NUMERICAL
    kind = "numerical"

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual

    def as_record(self):
        record = super().as_record()
        if self.residual is not None:
            record["residual"] = float(self.residual)
        return record


class PropagationError(NumericalError):
    """
    Raised when the dynamics produce a non-finite position or force.
    """

    kind = "propagation"


class DiagnosticError(NumericalError):
    """
    Raised when the input to a solver is structurally unusable, for example a
    reducible chain or an unreachable target. *details* carries the offending
    components or states.
    """

    kind = "diagnostic"

    def __init__(self, message, details=None, residual=None):
        super().__init__(message, residual=residual)
        self.details = details

    def as_record(self):
        record = super().as_record()
        if self.details is not None:
            record["details"] = _jsonable(self.details)
        return record


class InsufficientDataError(KineticsError):
    """
    Raised when a run collects too little data to form an estimate.
    """

    exit_code = EXIT_INSUFFICIENT_DATA
    kind = "insufficient-data"


class ResourceError(KineticsError):
    """
    Raised when a configured resource limit is exceeded.
    """

    exit_code = EXIT_NUMERICAL
    kind = "resource"


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple, set)):
        return [_jsonable(v) for v in value]
    if isinstance(value, numpy.ndarray):
        return value.tolist()
    if isinstance(value, numpy.generic):
        return value.item()
    return value


def _key_component(component):
    if isinstance(component, (int, numpy.integer)):
        return int(component) & 0xFFFFFFFF
    return zlib.crc32(str(component).encode("utf-8"))


class RngStream:
    """
    A seedable stream of random numbers.

    Streams are identified by a master seed and a key, a tuple of ints or
    strings. Two streams created with the same seed and key produce the same
    numbers, independent of the order in which other streams were used, so
    parallel work units give identical results for any worker count.
    """

    def __init__(self, seed, key=()):
        if isinstance(key, (str, int)):
            key = (key,)
        self._seed = int(seed)
        if self._seed < 0:
            raise ConfigurationError(f"Random seed must be non-negative, got {seed}.")
        self._key = tuple(key)
        sequence = numpy.random.SeedSequence(entropy=self._seed, spawn_key=tuple(_key_component(k) for k in self._key))
        self._generator = numpy.random.Generator(numpy.random.PCG64(sequence))
        self._draws = 0

    @property
    def seed(self):
        return self._seed

    @property
    def key(self):
        return self._key

    @property
    def draws(self):
        """
        Number of variates drawn from this stream so far.
        """
        return self._draws

    def derive(self, *key):
        """
        Get the child stream identified by this stream's key extended with *key*.
        """
        return RngStream(self._seed, self._key + key)

    def _count(self, size):
        self._draws += 1 if size is None else int(numpy.prod(size))

    def normal(self, size=None):
        self._count(size)
        return self._generator.standard_normal(size)

    def uniform(self, size=None):
        self._count(size)
        return self._generator.random(size)

    def integers(self, low, high, size=None):
        self._count(size)
        return self._generator.integers(low, high, size=size)

    def choice(self, n, size=None, p=None):
        self._count(size)
        return self._generator.choice(n, size=size, p=p)

    def multinomial(self, n, pvals):
        self._count(len(pvals))
        return self._generator.multinomial(n, pvals)

    def __repr__(self):
        return f"RngStream(seed={self._seed}, key={self._key!r})"


def compensated_sum(values):
    """
    Sum floating point values without accumulating round-off.
    """
    return math.fsum(numpy.ravel(values).tolist())


def map_tasks(function, tasks, workers=1):
    """
    Apply a module level function to every task, in worker processes when
    workers > 1. Results are returned in task order.

    :param function: Picklable callable taking one task.
    :param tasks: Sequence of picklable tasks.
    :param workers: Number of worker processes.
    :return: List of results.
    """
    tasks = list(tasks)
    if workers is None or workers <= 1 or len(tasks) <= 1:
        return [function(task) for task in tasks]
    with concurrent.futures.ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as executor:
        return list(executor.map(function, tasks))
