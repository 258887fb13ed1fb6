"""
Readers and writers for transition matrices, rate series, crossing counts,
flux logs and run manifests.
"""
import csv
import json
import logging

import numpy

from cmlibs.kinetics.general import ConfigurationError
from cmlibs.kinetics.markov.msm import CoarseMatrix, RateSeries
from cmlibs.kinetics.markov.spectral import TransitionMatrix

logger = logging.getLogger(__name__)

RATE_COLUMNS = ('rate_fwd', 'rate_bwd', 'stderr_fwd', 'stderr_bwd')


def _state_label(state):
    if numpy.ndim(state) == 0:
        return repr(state.item() if hasattr(state, 'item') else state)
    return ' '.join(repr(float(v)) for v in state)


def write_transition_matrix(path, P):
    """
    Write a transition matrix as CSV: a header row of state labels, then one
    row per state. Coarse matrices with counts get a second block of counts
    after a line holding "counts".
    """
    labels = [_state_label(s) for s in P.states]
    entries = P.dense()
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(['lag', P.lag] + ([P.source] if isinstance(P, CoarseMatrix) else []))
        writer.writerow(['state'] + labels)
        for label, row in zip(labels, entries):
            writer.writerow([label] + [repr(float(v)) for v in row])
        counts = getattr(P, 'counts', None)
        if counts is not None:
            writer.writerow(['counts'])
            for label, row in zip(labels, counts):
                writer.writerow([label] + [int(v) for v in row])
    logger.info('Wrote %r to %s', P, path)


def read_transition_matrix(path):
    """
    Read a matrix written by write_transition_matrix. Numeric state labels are
    converted to floats.

    :return: TransitionMatrix, or CoarseMatrix when a source is recorded.
    """
    with open(path, newline='') as f:
        rows = list(csv.reader(f))
    if len(rows) < 3 or rows[0][0] != 'lag' or rows[1][0] != 'state':
        raise ConfigurationError(f'{path} is not a transition matrix file.', line=1)
    lag = int(rows[0][1])
    source = rows[0][2] if len(rows[0]) > 2 else None
    labels = rows[1][1:]
    size = len(labels)
    try:
        entries = numpy.array([[float(v) for v in row[1:]] for row in rows[2:2 + size]])
        states = numpy.array([[float(v) for v in label.split()] for label in labels])
    except ValueError as e:
        raise ConfigurationError(f'{path} holds a non-numeric entry: {e}')
    if states.shape[1] == 1:
        states = states[:, 0]
    counts = None
    if len(rows) > 2 + size and rows[2 + size] and rows[2 + size][0] == 'counts':
        counts = numpy.array([[int(v) for v in row[1:]] for row in rows[3 + size:3 + 2 * size]])
    if source is not None:
        return CoarseMatrix(entries, lag, source=source, counts=counts, states=states)
    return TransitionMatrix(entries, states=states, lag=lag)


def write_rate_series(path, series, two_sigma=False):
    """
    Write a rate series as CSV with columns tau (or step), rate_fwd,
    rate_bwd, stderr_fwd, stderr_bwd, and the exact rates when known.

    :param two_sigma: Write error bars of two standard errors.
    """
    scale = 2.0 if two_sigma else 1.0
    with_exact = series.exact_forward is not None
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow([series.index_name, *RATE_COLUMNS] + (['exact_fwd', 'exact_bwd'] if with_exact else []))
        for k in range(len(series)):
            row = [_index_text(series.index[k]), repr(float(series.forward[k])), repr(float(series.backward[k])),
                   repr(scale * float(series.stderr_forward[k])), repr(scale * float(series.stderr_backward[k]))]
            if with_exact:
                row += [repr(float(series.exact_forward)), repr(float(series.exact_backward))]
            writer.writerow(row)
    logger.info('Wrote %d rates to %s', len(series), path)


def _index_text(value):
    return str(int(value)) if float(value).is_integer() else repr(float(value))


def read_rate_series(path):
    with open(path, newline='') as f:
        reader = csv.DictReader(f)
        rows = list(reader)
        index_name = reader.fieldnames[0] if reader.fieldnames else None
    if index_name not in ('tau', 'step') or not set(RATE_COLUMNS) <= set(reader.fieldnames):
        raise ConfigurationError(f'{path} is not a rate series file.', line=1)
    column = {name: [float(r[name]) for r in rows] for name in (index_name,) + RATE_COLUMNS}
    exact = rows and 'exact_fwd' in rows[0]
    return RateSeries(column[index_name], column['rate_fwd'], column['rate_bwd'], column['stderr_fwd'],
                      column['stderr_bwd'], exact_forward=float(rows[0]['exact_fwd']) if exact else None,
                      exact_backward=float(rows[0]['exact_bwd']) if exact else None, index_name=index_name)


def write_rate_dat(path, series):
    """
    Write a rate series as whitespace separated columns for gnuplot, error
    bars as two standard errors.
    """
    columns = [series.index, series.forward, 2.0 * series.stderr_forward, series.backward, 2.0 * series.stderr_backward]
    header = f'{series.index_name} rate_fwd err2_fwd rate_bwd err2_bwd'
    if series.exact_forward is not None:
        columns += [numpy.full(len(series), series.exact_forward), numpy.full(len(series), series.exact_backward)]
        header += ' exact_fwd exact_bwd'
    numpy.savetxt(path, numpy.column_stack(columns), fmt='%.10e', header=header)


def write_table(path, header, rows):
    """
    Write rows of values as CSV under a header.
    """
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, (float, numpy.floating)) else v for v in row])


def write_crossing_stats(path, stats, milestones):
    write_table(path, ('i', 'j', 'N_ij', 'N_i_a', 'N_i_b', 'n_a', 'n_b'), stats.rows(milestones))


def write_flux_log(path, records, colour_names=None):
    """
    Write the colour transfers of every step as CSV with columns step, pair,
    transferred_weight and color_mass (the weight of the source colour).
    """
    with open(path, 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(('step', 'pair', 'transferred_weight', 'color_mass'))
        for record in records:
            size = record.transfers.shape[0]
            names = colour_names or [str(c) for c in range(size)]
            for source in range(size):
                for destination in range(size):
                    if source != destination:
                        writer.writerow((record.step, f'{names[source]}->{names[destination]}',
                                         repr(float(record.transfers[source, destination])),
                                         repr(float(record.colour_mass[source]))))


def write_manifest(path, config, seed, version, outputs):
    """
    Write the resolved configuration, seed, code version and output file
    names as JSON.
    """
    manifest = {'config': config, 'seed': int(seed), 'version': version, 'outputs': sorted(outputs)}
    with open(path, 'w') as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def read_manifest(path):
    with open(path) as f:
        try:
            manifest = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f'{path} is not valid JSON: {e.msg}', line=e.lineno)
    if 'config' not in manifest or 'seed' not in manifest:
        raise ConfigurationError(f'{path} is not a run manifest.')
    return manifest
