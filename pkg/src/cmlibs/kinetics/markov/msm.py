"""
Markov state models over cell partitions: coarse transition matrices,
lifting, eigenvalue sensitivity, systematic and statistical error analysis,
rates against lag time and the non-Markovity measure.
"""
import logging
from dataclasses import dataclass

import numpy
import scipy.sparse

from cmlibs.kinetics.general import ConfigurationError, DiagnosticError, NumericalError, RngStream, map_tasks
from cmlibs.kinetics.markov.spectral import (
    DENSE_LIMIT, TransitionMatrix, exact_rates, second_eigenvalue, spectral_decompose, stationary_distribution)

logger = logging.getLogger(__name__)

DEFAULT_TAU_LIST = (1, 2, 5, 10, 20, 50, 100, 200, 500, 1000)


class CoarseMatrix(TransitionMatrix):
    """
    A transition matrix over cells at lag tau, estimated analytically or from
    samples. Empirical matrices keep their transition counts.
    """

    def __init__(self, entries, tau, source='analytic', counts=None, states=None):
        if source not in ('analytic', 'empirical'):
            raise ValueError(f'Unknown coarse matrix source {source!r}.')
        super().__init__(entries, states=states, lag=tau)
        self._source = source
        self._counts = None if counts is None else numpy.asarray(counts, dtype=numpy.int64)

    @classmethod
    def from_counts(cls, counts, tau, states=None):
        counts = numpy.asarray(counts, dtype=numpy.int64)
        totals = counts.sum(axis=1)
        if numpy.any(totals == 0):
            raise DiagnosticError('Coarse count matrix has empty rows.', details={'rows': numpy.flatnonzero(totals == 0)})
        return cls(counts / totals[:, numpy.newaxis], tau, source='empirical', counts=counts, states=states)

    @property
    def tau(self):
        return self.lag

    @property
    def source(self):
        return self._source

    @property
    def counts(self):
        return self._counts

    @property
    def samples(self):
        """
        Number of samples per row, or None for analytic matrices.
        """
        return None if self._counts is None else self._counts.sum(axis=1)


@dataclass(frozen=True)
class SensitivityMatrix:
    """
    Derivatives of mu_2 with respect to each entry of a transition matrix,
    the outer product of the second left and right eigenvectors.
    """
    entries: numpy.ndarray

    def max_minor(self):
        """
        Get the largest magnitude of the 2x2 minors, zero for a rank one matrix.
        """
        a = self.entries
        minors = numpy.einsum('ij,kl->ikjl', a, a) - numpy.einsum('il,kj->ikjl', a, a)
        return float(numpy.max(numpy.abs(minors)))

    def predicted_shift(self, perturbation):
        """
        Get the first order change of mu_2 under a perturbation of the matrix.
        """
        return float(numpy.sum(numpy.asarray(perturbation) * self.entries))


@dataclass(frozen=True)
class StatisticalError:
    """
    Statistical error of mu_2 and lambda_2 for a matrix estimated from n
    samples per row, with the factors of the cost-normalised form.
    """
    mu2: float
    sigma_mu: float
    relative_error: float
    samples: int
    tau: int
    cost_factor: float
    spread: float
    decay_factor: float
    rate: float = 0.0

    @property
    def decomposed(self):
        """
        Relative error rebuilt from the cost, spread and decay factors.
        """
        if self.decay_factor == 0.0:
            return 0.0 if self.spread == 0.0 else numpy.inf
        return self.cost_factor * self.spread / self.decay_factor


@dataclass(frozen=True)
class SystematicError:
    """
    Shift of mu_2 caused by coarse graining at lag tau: the first order
    prediction from the fine sensitivity and the exact value.
    """
    tau: int
    predicted: float
    exact: float


@dataclass(frozen=True)
class RateSeries:
    """
    Rate estimates indexed by lag time or step, with standard errors.
    """
    index: numpy.ndarray
    forward: numpy.ndarray
    backward: numpy.ndarray
    stderr_forward: numpy.ndarray
    stderr_backward: numpy.ndarray
    exact_forward: float = None
    exact_backward: float = None
    index_name: str = 'tau'

    def __post_init__(self):
        for name in ('index', 'forward', 'backward', 'stderr_forward', 'stderr_backward'):
            object.__setattr__(self, name, numpy.asarray(getattr(self, name), dtype=float))
        if numpy.any(numpy.diff(self.index) <= 0.0):
            raise ValueError('Rate series index must be increasing.')
        if numpy.any(self.stderr_forward < 0.0) or numpy.any(self.stderr_backward < 0.0):
            raise ValueError('Rate series error bars must be non-negative.')

    def __len__(self):
        return len(self.index)


def matrix_power(entries, tau):
    """
    Get a stochastic matrix to the power tau by repeated squaring, checking and
    restoring the row sums after every product.
    """
    if tau < 0:
        raise ValueError(f'Matrix power must be non-negative, got {tau}.')
    sparse = scipy.sparse.issparse(entries)
    size = entries.shape[0]
    result = scipy.sparse.identity(size, format='csr') if sparse else numpy.identity(size)
    base = entries
    remaining = int(tau)
    while remaining:
        if remaining & 1:
            result = _renormalised(result @ base)
        remaining >>= 1
        if remaining:
            base = _renormalised(base @ base)
    return result


def _renormalised(product):
    sums = numpy.asarray(product.sum(axis=1)).ravel()
    deviation = numpy.max(numpy.abs(sums - 1.0))
    if not deviation <= 1.0e-8:
        raise NumericalError(f'Row sums drifted by {deviation:.3e} in a matrix power.', residual=deviation)
    if scipy.sparse.issparse(product):
        return scipy.sparse.csr_matrix(scipy.sparse.diags(1.0 / sums) @ product)
    return product / sums[:, numpy.newaxis]


def _membership(labels, n_cells):
    return scipy.sparse.csr_matrix((numpy.ones(labels.size), (numpy.arange(labels.size), labels)),
                                   shape=(labels.size, n_cells))


def _lumped(propagated, labels, weights, n_cells, tau, states=None):
    """
    Average rows of a fine-to-cell matrix over each source cell with weights.
    """
    totals = numpy.bincount(labels, weights=weights, minlength=n_cells)
    if numpy.any(totals <= 0.0):
        raise DiagnosticError('Cells with no weight cannot be lumped.', details={'cells': numpy.flatnonzero(totals <= 0.0)})
    entries = numpy.asarray(_membership(labels, n_cells).T @ (weights[:, numpy.newaxis] * propagated)) / totals[:, numpy.newaxis]
    entries = numpy.clip(entries, 0.0, None)
    sums = entries.sum(axis=1)
    if numpy.max(numpy.abs(sums - 1.0)) > 1.0e-8:
        raise NumericalError(f'Lumped rows sum to {sums.min()}..{sums.max()}.')
    return CoarseMatrix(entries / sums[:, numpy.newaxis], tau, source='analytic', states=states)


def lump(P, partition, weights=None):
    """
    Project a fine transition matrix onto the cells of a partition:
    P_ij = sum over k in V_i, l in V_j of w_k / w(V_i) P_kl.

    :param P: Fine TransitionMatrix.
    :param partition: CellPartition covering the states of P.
    :param weights: Fine state weights; uniform within cells by default.
    :return: CoarseMatrix at the lag of P.
    """
    labels = partition.check_cover(P.states)
    weights = numpy.ones(P.dimension) if weights is None else numpy.asarray(weights, dtype=float)
    propagated = numpy.asarray((P.entries @ _membership(labels, partition.n_cells)).todense()) if P.is_sparse \
        else numpy.asarray(_membership(labels, partition.n_cells).T @ P.entries.T).T
    return _lumped(propagated, labels, weights, partition.n_cells, P.lag)


def coarse_from_fine(Q, partition, tau, rho=None):
    """
    Get the exact coarse matrix at lag tau: Q^tau lumped over the partition with
    the stationary weights within each source cell.

    :param Q: Fine one step TransitionMatrix.
    :param partition: CellPartition covering the fine states.
    :param tau: Lag in steps.
    :param rho: Optional precomputed stationary distribution of Q.
    :return: CoarseMatrix.
    """
    if tau < 0:
        raise ConfigurationError(f'Lag time must be non-negative, got {tau}.')
    labels = partition.check_cover(Q.states)
    rho = stationary_distribution(Q) if rho is None else rho
    membership = _membership(labels, partition.n_cells)
    if Q.is_sparse:
        propagated = numpy.asarray(membership.todense())
        for _ in range(int(tau)):
            propagated = Q.entries @ propagated
        propagated /= propagated.sum(axis=1)[:, numpy.newaxis]
    else:
        propagated = numpy.asarray(membership.T @ matrix_power(Q.entries, tau).T).T
    return _lumped(propagated, labels, rho, partition.n_cells, tau)


def _coarse_row(task):
    dynamics, partition, cell, tau, count, seed, key = task
    rng = RngStream(seed, key)
    x = dynamics.sample_in_cell(partition, cell, count, rng)
    for _ in range(int(tau)):
        x = dynamics.step(x, rng)
    end = partition.assign(dynamics.coordinates(x))
    return numpy.bincount(end, minlength=partition.n_cells)


def coarse_empirical(dynamics, partition, tau, n_samples_per_cell, rng, workers=1):
    """
    Estimate the coarse matrix at lag tau from n samples per cell drawn from the
    Boltzmann distribution restricted to the cell and propagated tau steps.
    Each row uses its own stream derived from rng, so results do not depend on
    the number of workers.

    :param dynamics: Dynamics to propagate.
    :param partition: CellPartition.
    :param tau: Lag in steps; 0 gives the identity.
    :param n_samples_per_cell: Samples per row.
    :param rng: Parent RngStream.
    :param workers: Worker processes.
    :return: CoarseMatrix with counts.
    """
    if n_samples_per_cell < 1:
        raise ConfigurationError(f'Need at least one sample per cell, got {n_samples_per_cell}.')
    tasks = [(dynamics, partition, cell, tau, int(n_samples_per_cell), rng.seed, rng.key + ('coarse', int(tau), cell))
             for cell in range(partition.n_cells)]
    counts = numpy.array(map_tasks(_coarse_row, tasks, workers))
    logger.info('Sampled coarse matrix at tau = %d with %d samples per cell', tau, n_samples_per_cell)
    return CoarseMatrix.from_counts(counts, tau)


def multinomial_resample(P, n, rng):
    """
    Draw an empirical matrix with n multinomial samples per row of P.
    """
    entries = P.dense()
    counts = numpy.array([rng.multinomial(int(n), row / numpy.sum(row)) for row in entries])
    return CoarseMatrix.from_counts(counts, P.lag, states=P.states)


def lift(P, partition, fine_states):
    """
    Expand a coarse matrix to a block constant fine matrix,
    P^c_kl = P_c(k)c(l) / |V_c(l)|.

    :param P: Coarse TransitionMatrix.
    :param partition: CellPartition covering the fine states.
    :param fine_states: Fine state coordinates.
    :return: Dense fine TransitionMatrix.
    """
    labels = partition.check_cover(fine_states)
    if partition.n_cells != P.dimension:
        raise ConfigurationError(f'Partition has {partition.n_cells} cells, matrix has {P.dimension} states.')
    sizes = numpy.bincount(labels, minlength=partition.n_cells)
    coarse = P.dense()
    entries = coarse[labels][:, labels] / sizes[labels][numpy.newaxis, :]
    return TransitionMatrix(entries, states=fine_states, lag=P.lag)


def cell_weights(rho, partition, fine_states):
    """
    Get the stationary weight of every cell.
    """
    labels = partition.check_cover(fine_states)
    return numpy.bincount(labels, weights=rho, minlength=partition.n_cells)


def eigen_sensitivity(P):
    """
    Get the derivatives of mu_2 with respect to the entries of P,
    d mu_2 / d P_ij = s_2,i r_2,j.

    :param P: TransitionMatrix.
    :return: SensitivityMatrix.
    """
    decomposition = spectral_decompose(P, min(3, P.dimension))
    if decomposition.count < 2:
        raise DiagnosticError('Sensitivity needs at least 2 states.')
    if decomposition.count > 2 and abs(decomposition.eigenvalue(2) - decomposition.eigenvalue(3)) <= 1.0e-10:
        raise DiagnosticError('Second eigenvalue is degenerate.',
                              details={'mu2': decomposition.eigenvalue(2), 'mu3': decomposition.eigenvalue(3)})
    entries = numpy.outer(numpy.real(decomposition.left(2)), numpy.real(decomposition.right(2)))
    if not numpy.all(numpy.isfinite(entries)):
        raise NumericalError("Sensitivity matrix is not finite.")
    return SensitivityMatrix(entries)


def msm_statistical_error(P, n, dt=1.0):
    """
    Get the statistical error of mu_2 and the relative error of lambda_2 for a
    matrix estimated from n samples per row:

        sigma^2(mu_2) = 1/(n + 1) sum_i s_2,i^2 sigma_i^2(r_2)

    where sigma_i(r_2) is the standard deviation of r_2 under row i of P, and
    sigma(lambda_2) / lambda_2 = sigma(mu_2) / (mu_2 tau lambda_2).

    :param P: TransitionMatrix at lag tau.
    :param n: Samples per row.
    :param dt: Time per step.
    :return: StatisticalError.
    """
    if n < 1:
        raise ConfigurationError(f'Samples per row must be at least 1, got {n}.')
    decomposition = spectral_decompose(P, min(3, P.dimension))
    if decomposition.count < 2:
        raise NumericalError('Statistical error needs at least 2 states.')
    mu2 = float(numpy.real(decomposition.eigenvalue(2)))
    if mu2 <= 0.0:
        raise NumericalError(f'Second eigenvalue {mu2} is not positive; the rate error is undefined.')
    s2 = numpy.real(decomposition.left(2))
    r2 = numpy.real(decomposition.right(2))
    entries = P.dense()
    mean = entries @ r2
    variance = numpy.clip(entries @ r2 ** 2 - mean ** 2, 0.0, None)
    spread = float(numpy.sqrt(numpy.sum(s2 ** 2 * variance)))
    sigma_mu = spread / numpy.sqrt(n + 1.0)
    exponent = -numpy.log(mu2)
    if sigma_mu == 0.0:
        relative = 0.0
    elif exponent <= 0.0:
        raise NumericalError(f'Second eigenvalue {mu2} is not below 1; the rate error is undefined.')
    else:
        relative = sigma_mu / (mu2 * exponent)
    cost_factor = 1.0 / numpy.sqrt(n * exponent) if exponent > 0.0 else 0.0
    decay_factor = mu2 * numpy.sqrt(exponent) if exponent > 0.0 else 0.0
    return StatisticalError(mu2, float(sigma_mu), float(relative), int(n), P.lag,
                            float(cost_factor), spread, float(decay_factor), float(exponent / (P.lag * dt)) if P.lag else 0.0)


def statistical_error_curve(Q, taus, budget=1.0e5, dt=1.0, partition=None):
    """
    Get the statistical error for each lag at a fixed cost of n tau = budget
    steps per row. Without a partition the matrices are Q^tau over the fine
    states, otherwise the exact coarse matrices.

    :return: List of StatisticalError, one per lag.
    """
    curve = []
    rho = None if partition is None else stationary_distribution(Q)
    for tau in taus:
        if partition is None:
            P = TransitionMatrix(matrix_power(Q.dense(), tau), states=Q.states, lag=tau)
        else:
            P = coarse_from_fine(Q, partition, tau, rho=rho)
        curve.append(msm_statistical_error(P, max(1, int(round(budget / tau))), dt))
    return curve


def systematic_error(Q, partition, tau):
    """
    Get the shift of mu_2 from coarse graining at lag tau, predicted to first
    order as sum_kl (P^c - Q^tau)_kl s_2,k r_2,l with the fine eigenvectors,
    alongside the exact shift mu_2(P) - mu_2(Q)^tau.
    """
    if Q.dimension > DENSE_LIMIT:
        raise ConfigurationError(f'Systematic error analysis is limited to {DENSE_LIMIT} fine states.')
    coarse = coarse_from_fine(Q, partition, tau)
    lifted = lift(coarse, partition, Q.states)
    propagated = TransitionMatrix(matrix_power(Q.dense(), tau), states=Q.states, lag=tau)
    sensitivity = eigen_sensitivity(propagated)
    predicted = sensitivity.predicted_shift(lifted.dense() - propagated.dense())
    fine_mu2 = float(numpy.real(spectral_decompose(Q, min(3, Q.dimension)).eigenvalue(2)))
    coarse_mu2 = float(numpy.real(spectral_decompose(coarse, min(3, coarse.dimension)).eigenvalue(2)))
    return SystematicError(int(tau), predicted, coarse_mu2 - fine_mu2 ** tau)


def rate_vs_lagtime(Q, partition, tau_list, dt, basins, dynamics=None, n_samples_per_cell=0, rng=None, workers=1):
    """
    Get MSM rate estimates lambda_2 rho(Bbar) and lambda_2 rho(Abar) for each
    lag. Coarse matrices are exact unless samples per cell are given, in which
    case they are sampled from the dynamics and carry error bars from the
    statistical error formula. The basin masses of a cell are taken from the
    fine stationary distribution within it.

    :param Q: Fine TransitionMatrix.
    :param partition: CellPartition.
    :param tau_list: Increasing lags in steps.
    :param dt: Time per step.
    :param basins: BasinSpec over the fine states.
    :param dynamics: Dynamics for sampled matrices.
    :param n_samples_per_cell: Samples per row, 0 for exact matrices.
    :param rng: RngStream for sampled matrices.
    :param workers: Worker processes.
    :return: RateSeries.
    """
    taus = [int(t) for t in tau_list]
    if not taus:
        raise ConfigurationError('Lag time list is empty.')
    if any(b <= a for a, b in zip(taus, taus[1:])) or taus[0] < 1:
        raise ConfigurationError(f'Lag times must be positive and increasing, got {taus}.')
    if n_samples_per_cell and (dynamics is None or rng is None):
        raise ConfigurationError('Sampled coarse matrices need dynamics and a random stream.')
    rho = stationary_distribution(Q)
    labels = partition.check_cover(Q.states)
    mass = numpy.bincount(labels, weights=rho, minlength=partition.n_cells)
    bbar_fraction = numpy.bincount(labels, weights=rho * basins.bbar, minlength=partition.n_cells) / mass
    abar_fraction = numpy.bincount(labels, weights=rho * basins.abar, minlength=partition.n_cells) / mass
    reference = exact_rates(Q, basins, dt)
    forward, backward, stderr_forward, stderr_backward = [], [], [], []
    for tau in taus:
        if n_samples_per_cell:
            P = coarse_empirical(dynamics, partition, tau, n_samples_per_cell, rng, workers=workers)
        else:
            P = coarse_from_fine(Q, partition, tau, rho=rho)
        decomposition = spectral_decompose(P, min(3, P.dimension))
        rate = -numpy.log(second_eigenvalue(decomposition)) / (tau * dt)
        coarse_rho = numpy.clip(decomposition.stationary, 0.0, None)
        coarse_rho /= numpy.sum(coarse_rho)
        forward.append(rate * numpy.dot(coarse_rho, bbar_fraction))
        backward.append(rate * numpy.dot(coarse_rho, abar_fraction))
        relative = msm_statistical_error(P, n_samples_per_cell, dt).relative_error if n_samples_per_cell else 0.0
        stderr_forward.append(relative * forward[-1])
        stderr_backward.append(relative * backward[-1])
        logger.info('tau = %d: forward %.6e, backward %.6e', tau, forward[-1], backward[-1])
    return RateSeries(taus, forward, backward, stderr_forward, stderr_backward,
                      exact_forward=reference.forward, exact_backward=reference.backward, index_name='tau')


def _conditional_entropy(joint):
    """
    Get H(last | rest) in nats from counts of (rest..., last) tuples.
    """
    counts = joint.reshape(-1, joint.shape[-1])
    totals = counts.sum(axis=1)
    used = counts > 0
    conditional = numpy.where(used, counts / numpy.maximum(totals, 1)[:, numpy.newaxis], 1.0)
    return float(-numpy.sum(counts[used] * numpy.log(conditional[used])) / counts.sum())


def non_markovity_R(state_sequence):
    """
    Get the relative drop in conditional entropy when conditioning on the last
    two states instead of the last one,
    R = (H(X_n | X_n-1) - H(X_n | X_n-1, X_n-2)) / H(X_n | X_n-1),
    from plug-in frequencies of the sequence, clamped to [0, 1].

    :param state_sequence: Sequence of hashable state labels.
    :return: R.
    """
    sequence = numpy.asarray(state_sequence)
    if sequence.ndim != 1 or sequence.size < 1000:
        raise ConfigurationError(f'Non-Markovity needs a sequence of at least 1000 states, got {sequence.size}.')
    labels, codes = numpy.unique(sequence, return_inverse=True)
    if labels.size < 2:
        raise ConfigurationError('Non-Markovity needs at least 2 distinct states.')
    k = labels.size
    first, second, third = codes[:-2], codes[1:-1], codes[2:]
    triples = numpy.bincount((first * k + second) * k + third, minlength=k ** 3).reshape(k, k, k)
    pairs = triples.sum(axis=0)
    one_step = _conditional_entropy(pairs)
    if one_step == 0.0:
        raise NumericalError('H(X_n | X_n-1) is zero; the non-Markovity ratio is undefined.')
    two_step = _conditional_entropy(triples)
    return float(min(1.0, max(0.0, (one_step - two_step) / one_step)))
