"""Numpy implementations of the segment reduction kernels.

Pure-python fallback for the compiled module in ``_ckernels.pyx``; both
expose the same three functions with identical semantics (including
first-occurrence tie breaking in ``segment_max``).
"""

import numpy as np

NAME = "numpy"


def segment_sum(values, ids, num_segments):
    """Sum rows of ``values`` (E, d) into ``num_segments`` buckets."""
    out = np.zeros((num_segments, values.shape[1]), dtype=values.dtype)
    np.add.at(out, ids, values)
    return out


def segment_max(values, ids, num_segments):
    """Columnwise max per segment.

    Returns ``(out, arg)`` where ``arg[s, j]`` is the row index into
    ``values`` attaining the max (first occurrence on ties), or -1 for
    empty segments (whose max is reported as 0).
    """
    n_rows, n_cols = values.shape
    out = np.full((num_segments, n_cols), -np.inf, dtype=values.dtype)
    np.maximum.at(out, ids, values)
    # first row achieving the max: minimize row index over exact hits
    hit = values == out[ids]
    rows = np.broadcast_to(np.arange(n_rows)[:, None], values.shape)
    candidate = np.where(hit, rows, n_rows)
    arg = np.full((num_segments, n_cols), n_rows, dtype=np.int64)
    np.minimum.at(arg, ids, candidate)
    empty = arg == n_rows
    arg[empty] = -1
    out[empty] = 0.0
    return out, arg


def scatter_add(out, ids, values):
    """Accumulate rows of ``values`` (E, d) into ``out`` (n, d) in place."""
    np.add.at(out, ids, values)
    return out
