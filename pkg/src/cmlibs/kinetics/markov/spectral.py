"""
Fine-state reference transition matrices and their spectral analysis: exact
rates, stationary distributions, committors and mean first passage times.
"""
import logging
from dataclasses import dataclass

import numpy
import scipy.linalg
import scipy.sparse
import scipy.sparse.csgraph
import scipy.sparse.linalg
from scipy.special import ndtr

from cmlibs.kinetics.general import ConfigurationError, DiagnosticError, NumericalError

logger = logging.getLogger(__name__)

# Matrices up to this dimension are handled with dense solvers.
DENSE_LIMIT = 2000

IMAGINARY_TOLERANCE = 1.0e-10
ROW_SUM_TOLERANCE = 1.0e-12
RESIDUAL_TOLERANCE = 1.0e-8


class TransitionMatrix(object):
    """
    A row-stochastic matrix with state labels and a lag time in steps.
    Entries are a dense numpy array or a scipy sparse matrix.
    """

    def __init__(self, entries, states=None, lag=1, validate=True):
        """
        :param entries: Square row-stochastic matrix.
        :param states: Optional state labels, one per row. Defaults to 0..n-1.
        :param lag: Lag time in steps.
        :param validate: Check the stochastic matrix invariants.
        """
        if scipy.sparse.issparse(entries):
            entries = scipy.sparse.csr_matrix(entries, dtype=float)
        else:
            entries = numpy.array(entries, dtype=float)
            if entries.ndim != 2:
                raise ValueError(f'Transition matrix must be 2 dimensional, got shape {entries.shape}.')
        if entries.shape[0] != entries.shape[1]:
            raise ValueError(f'Transition matrix must be square, got shape {entries.shape}.')
        if entries.shape[0] < 1:
            raise ValueError('Transition matrix is empty.')
        self._entries = entries
        self._states = numpy.arange(entries.shape[0]) if states is None else numpy.asarray(states)
        if len(self._states) != entries.shape[0]:
            raise ValueError(f'Got {len(self._states)} state labels for dimension {entries.shape[0]}.')
        self._lag = int(lag)
        if validate:
            self.validate()

    def validate(self):
        data = self._entries.data if self.is_sparse else self._entries
        if data.size and (numpy.min(data) < -ROW_SUM_TOLERANCE or numpy.max(data) > 1.0 + ROW_SUM_TOLERANCE):
            raise ValueError('Transition matrix entries must lie in [0, 1].')
        deviation = numpy.max(numpy.abs(self.row_sums() - 1.0))
        if deviation > ROW_SUM_TOLERANCE:
            raise ValueError(f'Transition matrix rows must sum to 1, deviation is {deviation:.3e}.')

    @property
    def entries(self):
        return self._entries

    @property
    def states(self):
        return self._states

    @property
    def lag(self):
        return self._lag

    @property
    def dimension(self):
        return self._entries.shape[0]

    @property
    def is_sparse(self):
        return scipy.sparse.issparse(self._entries)

    def dense(self):
        return self._entries.toarray() if self.is_sparse else self._entries

    def sparse(self):
        return self._entries if self.is_sparse else scipy.sparse.csr_matrix(self._entries)

    def row_sums(self):
        return numpy.asarray(self._entries.sum(axis=1)).ravel()

    def __repr__(self):
        kind = 'sparse' if self.is_sparse else 'dense'
        return f'TransitionMatrix({kind}, dimension={self.dimension}, lag={self._lag})'


@dataclass(frozen=True)
class BasinSpec:
    """
    Reactant and product cores A and B with the metastable split Abar, Bbar of
    all states, as boolean masks over the states of a transition matrix.
    """
    a: numpy.ndarray
    b: numpy.ndarray
    abar: numpy.ndarray
    bbar: numpy.ndarray = None

    def __post_init__(self):
        a = numpy.asarray(self.a, dtype=bool)
        b = numpy.asarray(self.b, dtype=bool)
        abar = numpy.asarray(self.abar, dtype=bool)
        bbar = ~abar if self.bbar is None else numpy.asarray(self.bbar, dtype=bool)
        if not (a.shape == b.shape == abar.shape == bbar.shape):
            raise ConfigurationError('Basin masks have different sizes.')
        if numpy.any(abar & bbar) or not numpy.all(abar | bbar):
            raise ConfigurationError('Abar and Bbar must partition the states.')
        if numpy.any(a & ~abar):
            raise ConfigurationError('Basin A must lie inside Abar.')
        if numpy.any(b & ~bbar):
            raise ConfigurationError('Basin B must lie inside Bbar.')
        for name, value in (('a', a), ('b', b), ('abar', abar), ('bbar', bbar)):
            object.__setattr__(self, name, value)

    @classmethod
    def from_regions(cls, coordinates, a, b, abar):
        """
        Build basin masks from regions evaluated at state coordinates.

        :param coordinates: State coordinates.
        :param a: Region of the reactant core.
        :param b: Region of the product core.
        :param abar: Region of the reactant metastable set; its complement is Bbar.
        """
        return cls(a.contains(coordinates), b.contains(coordinates), abar.contains(coordinates))

    @property
    def size(self):
        return self.a.size


@dataclass(frozen=True)
class RateEstimate:
    """
    Forward (A to B) and backward (B to A) rates in inverse time units.
    """
    forward: float
    backward: float
    stderr_forward: float = None
    stderr_backward: float = None

    def __post_init__(self):
        if self.forward < 0.0 or self.backward < 0.0:
            raise NumericalError(f'Negative rate estimate ({self.forward}, {self.backward}).')

    @property
    def mean_passage_time(self):
        """
        Mean time from A to B, 1/forward.
        """
        return numpy.inf if self.forward == 0.0 else 1.0 / self.forward


@dataclass(frozen=True)
class SpectralDecomposition:
    """
    Leading eigenvalues of a transition matrix in descending modulus with
    paired right (r_k) and left (s_k) eigenvectors as columns, normalised so
    s_k.r_k = 1 and s_1 sums to 1. Indices k are 1 based, k = 1 being the
    stationary pair.
    """
    eigenvalues: numpy.ndarray
    right_vectors: numpy.ndarray
    left_vectors: numpy.ndarray
    lag: int = 1

    @property
    def count(self):
        return len(self.eigenvalues)

    def eigenvalue(self, k):
        return self.eigenvalues[k - 1]

    def right(self, k):
        return self.right_vectors[:, k - 1]

    def left(self, k):
        return self.left_vectors[:, k - 1]

    @property
    def stationary(self):
        return numpy.real(self.left(1))

    def oriented(self, k, mask):
        """
        Get a copy with the sign of pair k chosen so r_k is positive on average over mask.
        """
        right = self.right_vectors.copy()
        left = self.left_vectors.copy()
        if numpy.real(numpy.sum(right[numpy.asarray(mask, dtype=bool), k - 1])) < 0.0:
            right[:, k - 1] *= -1.0
            left[:, k - 1] *= -1.0
        return SpectralDecomposition(self.eigenvalues, right, left, self.lag)

    def implied_timescales(self, dt=1.0):
        """
        Get t_k = -lag dt / ln|mu_k| for k = 2..count.
        """
        with numpy.errstate(divide='ignore'):
            return -self.lag * dt / numpy.log(numpy.abs(self.eigenvalues[1:]))


def _gaussian_bin_mass(lower, upper):
    # integrate the standard normal over [lower, upper] from the nearer tail
    return numpy.where(lower > 0.0, ndtr(-lower) - ndtr(-upper), ndtr(upper) - ndtr(lower))


def _brownian_fine_matrix(dynamics, grid):
    params = dynamics.params
    spacing = dynamics.spacing if grid is None else float(numpy.mean(numpy.diff(grid)))
    centres = dynamics.fine_states() if grid is None else numpy.asarray(grid, dtype=float)
    count = centres.size
    if count < 2:
        raise ConfigurationError('A fine grid needs at least 2 states.')
    if grid is not None and not numpy.allclose(numpy.diff(centres), spacing, rtol=1.0e-9, atol=0.0):
        raise ConfigurationError('Brownian fine grid must be uniformly spaced.')
    width = params.kernel_width
    if width < 0.5 * spacing:
        raise DiagnosticError(f'Grid spacing {spacing} is too coarse for the kernel width {width}.',
                              details={'spacing': spacing, 'kernel_width': width})
    mean = centres - params.beta * params.diffusion * dynamics.potential.gradient(centres) * params.dt
    if not numpy.all(numpy.isfinite(mean)):
        raise DiagnosticError('Non-finite drift on the fine grid.')
    reach = int(numpy.ceil((numpy.max(numpy.abs(mean - centres)) + 40.0 * width) / spacing)) + 1
    rows, columns, values = [], [], []
    source = numpy.arange(count)
    for offset in range(-reach, reach + 1):
        target = source + offset
        valid = (target >= 0) & (target < count)
        i, j = source[valid], target[valid]
        lower = (centres[j] - 0.5 * spacing - mean[i]) / width
        upper = (centres[j] + 0.5 * spacing - mean[i]) / width
        mass = _gaussian_bin_mass(lower, upper)
        keep = mass > 0.0
        rows.append(i[keep])
        columns.append(j[keep])
        values.append(mass[keep])
    entries = scipy.sparse.csr_matrix((numpy.concatenate(values), (numpy.concatenate(rows), numpy.concatenate(columns))),
                                      shape=(count, count))
    totals = numpy.asarray(entries.sum(axis=1)).ravel()
    entries = scipy.sparse.diags(1.0 / totals) @ entries
    return scipy.sparse.csr_matrix(entries), centres


def _metropolis_fine_matrix(dynamics):
    params = dynamics.params
    lattice = dynamics.lattice
    if lattice.size < 2:
        raise ConfigurationError('A fine grid needs at least 2 states.')
    energies = dynamics.energies
    flat = numpy.arange(lattice.size)
    index = lattice.unflatten(flat)
    rows, columns, values = [], [], []
    for axis in range(lattice.dimension):
        for direction in (-1, 1):
            trial = index.copy()
            trial[:, axis] += direction
            inside = lattice.inside(trial)
            source = flat[inside]
            target = lattice.flatten(trial[inside])
            rise = numpy.maximum(energies[target] - energies[source], 0.0)
            rows.append(source)
            columns.append(target)
            values.append(params.move_prob * numpy.exp(-params.beta * rise))
    rows = numpy.concatenate(rows)
    columns = numpy.concatenate(columns)
    values = numpy.concatenate(values)
    stay = 1.0 - numpy.bincount(rows, weights=values, minlength=lattice.size)
    entries = scipy.sparse.csr_matrix((numpy.concatenate([values, stay]), (numpy.concatenate([rows, flat]), numpy.concatenate([columns, flat]))),
                                      shape=(lattice.size, lattice.size))
    return entries, lattice.all_coordinates()


def build_fine_matrix(dynamics, grid=None):
    """
    Build the one step transition matrix of the dynamics over its fine states.

    For the grid walker the matrix is assembled from proposal and acceptance
    probabilities. For Brownian dynamics each row integrates the Gaussian one
    step kernel from the source bin centre over the destination bins, and is
    renormalised to absorb the mass falling outside the grid.

    :param dynamics: BrownianDynamics or MetropolisDynamics.
    :param grid: Optional Brownian bin centres; defaults to the dynamics fine grid.
    :return: TransitionMatrix labelled by fine state coordinates; dense up to DENSE_LIMIT states.
    """
    if dynamics.kind == 'brownian':
        entries, states = _brownian_fine_matrix(dynamics, grid)
    elif dynamics.kind == 'metropolis':
        entries, states = _metropolis_fine_matrix(dynamics)
    else:
        raise ConfigurationError(f'No fine matrix for dynamics of kind {dynamics.kind!r}.')
    if entries.shape[0] <= DENSE_LIMIT:
        entries = entries.toarray()
    logger.info('Built fine matrix with %d states for %r', entries.shape[0], dynamics)
    return TransitionMatrix(entries, states=states, lag=1)


def strongly_connected_components(P):
    """
    Get the strongly connected components of the transition graph, largest first.
    """
    matrix = P.sparse() if isinstance(P, TransitionMatrix) else scipy.sparse.csr_matrix(P)
    count, labels = scipy.sparse.csgraph.connected_components(matrix, directed=True, connection='strong')
    components = [numpy.flatnonzero(labels == c) for c in range(count)]
    return sorted(components, key=len, reverse=True)


def _gth(matrix):
    """
    Stationary distribution of a dense irreducible stochastic matrix by
    Grassmann-Taksar-Heyman elimination.
    """
    work = numpy.array(matrix, dtype=float)
    count = work.shape[0]
    for n in range(count - 1, 0, -1):
        outflow = numpy.sum(work[n, :n])
        if outflow <= 0.0:
            raise DiagnosticError(f'State {n} has no transitions to lower states during elimination.', details={'state': n})
        work[:n, n] /= outflow
        work[:n, :n] += numpy.outer(work[:n, n], work[n, :n])
    stationary = numpy.zeros(count)
    stationary[0] = 1.0
    for n in range(1, count):
        stationary[n] = numpy.dot(stationary[:n], work[:n, n])
    return stationary / numpy.sum(stationary)


def stationary_distribution(P):
    """
    Get the stationary distribution rho of an irreducible chain, rho P = rho.

    :param P: TransitionMatrix.
    :return: Probability vector.
    """
    components = strongly_connected_components(P)
    if len(components) > 1:
        raise DiagnosticError(f'Chain is reducible with {len(components)} strongly connected components.',
                              details={'components': [c.tolist() for c in components]})
    if P.dimension == 1:
        return numpy.ones(1)
    if P.is_sparse and P.dimension > DENSE_LIMIT:
        system = (scipy.sparse.identity(P.dimension, format='csr') - P.entries).T.tolil()
        system[-1, :] = 1.0
        rhs = numpy.zeros(P.dimension)
        rhs[-1] = 1.0
        rho = scipy.sparse.linalg.spsolve(system.tocsc(), rhs)
        rho = numpy.clip(rho, 0.0, None)
        rho /= numpy.sum(rho)
    else:
        rho = _gth(P.dense())
    residual = numpy.max(numpy.abs(P.entries.T @ rho - rho))
    if not residual <= 1.0e-10:
        raise NumericalError(f'Stationary distribution residual {residual:.3e} exceeds 1e-10.', residual=residual)
    return rho


def _is_reversible(P, rho):
    flux = P.entries.multiply(rho[:, numpy.newaxis]) if P.is_sparse else rho[:, numpy.newaxis] * P.entries
    asymmetry = abs(flux - flux.T).max()
    return asymmetry <= 1.0e-10 * abs(flux).max()


def _symmetric_pairs(P, rho, k):
    root = numpy.sqrt(rho)
    if P.is_sparse and P.dimension > DENSE_LIMIT and k < P.dimension - 1:
        scale = scipy.sparse.diags(root)
        inverse = scipy.sparse.diags(1.0 / root)
        symmetric = scale @ P.entries @ inverse
        symmetric = ((symmetric + symmetric.T) * 0.5).tocsc()
        try:
            values, vectors = scipy.sparse.linalg.eigsh(symmetric, k=k, sigma=1.0 + 1.0e-3, which='LM', tol=0.0)
        except scipy.sparse.linalg.ArpackNoConvergence as e:
            raise NumericalError(f'Eigensolver did not converge: {e}')
    else:
        symmetric = root[:, numpy.newaxis] * P.dense() / root[numpy.newaxis, :]
        values, vectors = scipy.linalg.eigh(0.5 * (symmetric + symmetric.T))
    return values, vectors / root[:, numpy.newaxis], vectors * root[:, numpy.newaxis]


def _general_pairs(P, k):
    if P.is_sparse and P.dimension > DENSE_LIMIT and k < P.dimension - 1:
        try:
            values, right = scipy.sparse.linalg.eigs(P.entries.tocsc(), k=k, sigma=1.0 + 1.0e-3, which='LM')
            left_values, left = scipy.sparse.linalg.eigs(P.entries.T.tocsc(), k=k, sigma=1.0 + 1.0e-3, which='LM')
        except scipy.sparse.linalg.ArpackNoConvergence as e:
            raise NumericalError(f'Eigensolver did not converge: {e}')
        match = [int(numpy.argmin(numpy.abs(left_values - v))) for v in values]
        left = left[:, match]
    else:
        try:
            values, left, right = scipy.linalg.eig(P.dense(), left=True, right=True)
        except scipy.linalg.LinAlgError as e:
            raise NumericalError(f'Eigensolver failed: {e}')
        left = numpy.conj(left)
    return values, right, left


def spectral_decompose(P, k, abar=None):
    """
    Get the k leading eigenpairs of a transition matrix by descending modulus.

    Reversible chains are symmetrised with their stationary distribution and
    solved with a symmetric solver, so s_k = rho r_k. Other chains use the
    general solver with left eigenvectors. Matrices above DENSE_LIMIT states
    use shift-invert Arnoldi/Lanczos iteration about 1, returning the k
    eigenvalues nearest 1. Ties in modulus are ordered by the row index of the
    largest right vector component. Each r_k has its first significant
    component positive, or with a basin mask Abar, r_k for k >= 2 is positive
    on average over Abar.

    :param P: TransitionMatrix.
    :param k: Number of eigenpairs.
    :param abar: Optional boolean mask of the states in Abar.
    :return: SpectralDecomposition.
    """
    if not 1 <= k <= P.dimension:
        raise ValueError(f'Cannot compute {k} eigenpairs of a {P.dimension} state matrix.')
    try:
        rho = stationary_distribution(P)
    except DiagnosticError:
        rho = None
    if rho is not None and numpy.all(rho > 0.0) and _is_reversible(P, rho):
        values, right, left = _symmetric_pairs(P, rho, k)
    else:
        values, right, left = _general_pairs(P, k)
    modulus = numpy.round(numpy.abs(values), 12)
    peak = numpy.argmax(numpy.abs(right), axis=0)
    order = numpy.lexsort((peak, -modulus))[:k]
    values, right, left = values[order], right[:, order], left[:, order]
    if numpy.iscomplexobj(values):
        if numpy.max(numpy.abs(values.imag)) > IMAGINARY_TOLERANCE:
            logger.warning('Transition matrix has complex eigenvalues, imaginary parts up to %.3e',
                           numpy.max(numpy.abs(values.imag)))
        else:
            values, right, left = values.real, right.real, left.real
    if abar is not None:
        mask = numpy.asarray(abar, dtype=bool)
        if mask.shape != (P.dimension,):
            raise ValueError(f'Abar mask has shape {mask.shape}, matrix has {P.dimension} states.')
    for j in range(k):
        significant = numpy.flatnonzero(numpy.abs(right[:, j]) > 1.0e-8 * numpy.max(numpy.abs(right[:, j])))
        if abar is not None and j > 0:
            flip = numpy.real(numpy.sum(right[mask, j])) < 0.0
        else:
            flip = numpy.real(right[significant[0], j]) < 0.0
        if flip:
            right[:, j] *= -1.0
            left[:, j] *= -1.0
        if j == 0:
            left[:, 0] /= numpy.sum(left[:, 0])
        overlap = numpy.dot(left[:, j], right[:, j])
        if overlap == 0.0:
            raise NumericalError(f'Eigenpair {j + 1} has orthogonal left and right vectors.')
        right[:, j] /= overlap
    _check_residuals(P, values, right, left)
    return SpectralDecomposition(values, right, left, P.lag)


def _check_residuals(P, values, right, left):
    entries = P.entries
    norm = numpy.max(numpy.abs(P.row_sums()))
    for j, value in enumerate(values):
        r, s = right[:, j], left[:, j]
        residual = max(numpy.max(numpy.abs(entries @ r - value * r)) / numpy.max(numpy.abs(r)),
                       numpy.max(numpy.abs(entries.T @ s - value * s)) / numpy.max(numpy.abs(s)))
        if logger.isEnabledFor(logging.DEBUG):
            logger.debug('Eigenpair %d: mu = %r, residual %.3e', j + 1, value, residual)
        if not residual <= RESIDUAL_TOLERANCE * norm:
            raise NumericalError(f'Eigenpair {j + 1} residual {residual:.3e} exceeds tolerance.', residual=residual)


def implied_timescales(P, k, dt=1.0):
    """
    Get the implied timescales t_j = -lag dt / ln mu_j for j = 2..k.
    """
    return spectral_decompose(P, k).implied_timescales(dt)


def second_eigenvalue(decomposition):
    """
    Get mu_2 after checking it is real and isolated from mu_3.
    """
    if decomposition.count < 2:
        raise NumericalError('A spectral gap needs at least 2 eigenvalues.')
    mu2 = decomposition.eigenvalue(2)
    if numpy.iscomplexobj(mu2) and abs(numpy.imag(mu2)) > IMAGINARY_TOLERANCE:
        raise NumericalError(f'Second eigenvalue {mu2} is complex.')
    mu2 = float(numpy.real(mu2))
    if decomposition.count > 2 and not mu2 > abs(decomposition.eigenvalue(3)):
        raise NumericalError(f'No spectral gap: mu_2 = {mu2}, |mu_3| = {abs(decomposition.eigenvalue(3))}.')
    if mu2 <= 0.0:
        raise NumericalError(f'Second eigenvalue {mu2} is not positive; the lag time is too long or the matrix is invalid.')
    if mu2 >= 1.0:
        raise NumericalError(f'Second eigenvalue {mu2} is not below 1; the chain has no spectral gap.')
    return mu2


def exact_rates(P, basins, dt):
    """
    Get the rates lambda_2 rho(Bbar) and lambda_2 rho(Abar) with
    lambda_2 = -ln(mu_2) / (lag dt).

    :param P: TransitionMatrix.
    :param basins: BasinSpec over the states of P.
    :param dt: Time per step.
    :return: RateEstimate.
    """
    if basins.size != P.dimension:
        raise ConfigurationError(f'Basins cover {basins.size} states, matrix has {P.dimension}.')
    decomposition = spectral_decompose(P, min(3, P.dimension), abar=basins.abar)
    mu2 = second_eigenvalue(decomposition)
    rate = -numpy.log(mu2) / (P.lag * dt)
    rho = numpy.clip(decomposition.stationary, 0.0, None)
    rho /= numpy.sum(rho)
    forward = rate * numpy.sum(rho[basins.bbar])
    backward = rate * numpy.sum(rho[basins.abar])
    logger.info('Exact rates: lambda_2 = %.6e, forward = %.6e, backward = %.6e', rate, forward, backward)
    return RateEstimate(float(forward), float(backward))


def _reaching(P, targets):
    """
    Get a mask of states from which some target state is reachable.
    """
    reverse = P.sparse().T.tocsr()
    reverse.eliminate_zeros()
    reached = numpy.zeros(P.dimension, dtype=bool)
    reached[targets] = True
    frontier = numpy.flatnonzero(reached)
    while frontier.size:
        neighbours = numpy.unique(reverse[frontier].indices)
        frontier = neighbours[~reached[neighbours]]
        reached[frontier] = True
    return reached


def _solve(system, rhs):
    if scipy.sparse.issparse(system):
        solution = scipy.sparse.linalg.spsolve(system.tocsc(), rhs)
    else:
        solution = scipy.linalg.solve(system, rhs)
    return numpy.atleast_1d(solution)


def committor(P, basins):
    """
    Get the forward committor: 0 on A, 1 on B and pi = P pi elsewhere.

    :param P: TransitionMatrix.
    :param basins: BasinSpec over the states of P.
    :return: Committor vector with values in [0, 1].
    """
    a, b = basins.a, basins.b
    if not numpy.any(a) or not numpy.any(b):
        raise ConfigurationError('Committor needs non-empty A and B.')
    if numpy.any(a & b):
        raise ConfigurationError('Committor needs disjoint A and B.')
    interior = ~(a | b)
    result = numpy.zeros(P.dimension)
    result[b] = 1.0
    if not numpy.any(interior):
        return result
    stuck = interior & ~_reaching(P, numpy.flatnonzero(a | b))
    if numpy.any(stuck):
        raise DiagnosticError('Some states cannot reach A or B; the committor system is singular.',
                              details={'states': numpy.flatnonzero(stuck)})
    entries = P.sparse() if P.is_sparse else P.dense()
    block = entries[interior][:, interior]
    rhs = numpy.asarray(entries[interior][:, b].sum(axis=1)).ravel()
    identity = scipy.sparse.identity(block.shape[0], format='csr') if P.is_sparse else numpy.identity(block.shape[0])
    system = identity - block
    try:
        solution = _solve(system, rhs)
    except (scipy.linalg.LinAlgError, RuntimeError) as e:
        raise DiagnosticError(f'Committor system is singular: {e}')
    residual = numpy.max(numpy.abs(system @ solution - rhs))
    if not residual <= 1.0e-10:
        raise DiagnosticError(f'Committor residual {residual:.3e} exceeds 1e-10.', residual=residual)
    excess = max(-numpy.min(solution), numpy.max(solution) - 1.0)
    if excess > 1.0e-10:
        logger.warning('Committor values clipped to [0, 1], largest excursion %.3e', excess)
    result[interior] = numpy.clip(solution, 0.0, 1.0)
    return result


def committor_from_eigenvector(decomposition, basins):
    """
    Approximate the committor by the affine map of r_2 sending its A average
    to 0 and its B average to 1, clipped to [0, 1].
    """
    rho = decomposition.stationary
    r2 = numpy.real(decomposition.right(2))
    a_value = numpy.sum(rho[basins.a] * r2[basins.a]) / numpy.sum(rho[basins.a])
    b_value = numpy.sum(rho[basins.b] * r2[basins.b]) / numpy.sum(rho[basins.b])
    if a_value == b_value:
        raise NumericalError('Second eigenvector does not separate A from B.')
    return numpy.clip((r2 - a_value) / (b_value - a_value), 0.0, 1.0)


def mean_first_passage_times(P, target, dt=1.0):
    """
    Get mean first passage times into a target set by solving
    (P - I) (T / dt) = -1 on the non-target states.

    :param P: TransitionMatrix.
    :param target: Index, index list or boolean mask of target states.
    :param dt: Time per step.
    :return: Times for every state, 0 on the targets.
    """
    mask = numpy.zeros(P.dimension, dtype=bool)
    mask[numpy.asarray(target)] = True
    if not numpy.any(mask):
        raise ConfigurationError('Mean first passage times need a target.')
    unreachable = ~_reaching(P, numpy.flatnonzero(mask))
    if numpy.any(unreachable):
        states = [P.states[i].tolist() if numpy.ndim(P.states[i]) else P.states[i].item() for i in numpy.flatnonzero(unreachable)]
        raise DiagnosticError(f'Target is unreachable from states {states}; there is no absorption.',
                              details={'unreachable': states})
    transient = ~mask
    times = numpy.zeros(P.dimension)
    if not numpy.any(transient):
        return times
    entries = P.sparse() if P.is_sparse else P.dense()
    block = entries[transient][:, transient]
    identity = scipy.sparse.identity(block.shape[0], format='csr') if P.is_sparse else numpy.identity(block.shape[0])
    try:
        steps = _solve(block - identity, -numpy.ones(block.shape[0]))
    except (scipy.linalg.LinAlgError, RuntimeError) as e:
        raise NumericalError(f'Mean passage time system is singular: {e}')
    if not numpy.all(numpy.isfinite(steps)) or numpy.any(steps < 0.0):
        raise NumericalError('Mean passage time solution is negative or not finite.')
    times[transient] = steps * dt
    return times
