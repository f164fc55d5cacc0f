"""Segment reduction kernels with a compiled fast path.

The compiled extension (built from ``_ckernels.pyx``) is used when
available; otherwise the numpy implementation in ``_pykernels`` takes over.
Set ``EMNN_PURE_PYTHON=1`` to force the numpy path regardless (the kernel
benchmark uses this to compare both backends in one process).

All entry points accept values of any trailing shape; reductions run over
axis 0 grouped by ``ids``.
"""

import contextlib
import os

import numpy as np

from . import _pykernels

try:
    from . import _ckernels
except ImportError:
    _ckernels = None

if os.environ.get("EMNN_PURE_PYTHON") or _ckernels is None:
    _impl = _pykernels
else:
    _impl = _ckernels

BACKEND = _impl.NAME

_REAL_DTYPES = (np.float32, np.float64)


def backend_module(name):
    """Return a kernel backend by name ("native" or "numpy")."""
    if name == "numpy":
        return _pykernels
    if name == "native":
        if _ckernels is None:
            raise RuntimeError("compiled kernels are not available")
        return _ckernels
    raise ValueError(f"unknown kernel backend: {name!r}")


@contextlib.contextmanager
def use_backend(name):
    """Temporarily route all kernel calls through the named backend."""
    global _impl
    previous = _impl
    _impl = backend_module(name)
    try:
        yield
    finally:
        _impl = previous


def _prep(values, ids):
    values = np.ascontiguousarray(values)
    if values.dtype not in _REAL_DTYPES:
        values = values.astype(np.float64)
    flat = values.reshape(values.shape[0], -1)
    ids = np.ascontiguousarray(ids, dtype=np.int64)
    return values, flat, ids


def segment_sum(values, ids, num_segments):
    """out[s] = sum of values[i] over i with ids[i] == s."""
    values, flat, ids = _prep(values, ids)
    out = _impl.segment_sum(flat, ids, num_segments)
    return out.reshape((num_segments,) + values.shape[1:])


def segment_max(values, ids, num_segments):
    """Elementwise max per segment (empty segments yield 0).

    Returns ``(out, arg)``; ``arg`` holds the row index into ``values``
    attaining each max (-1 for empty segments), with the first occurrence
    winning ties.
    """
    values, flat, ids = _prep(values, ids)
    out, arg = _impl.segment_max(flat, ids, num_segments)
    tail = values.shape[1:]
    return out.reshape((num_segments,) + tail), arg.reshape((num_segments,) + tail)


def scatter_add(out, ids, values):
    """out[ids[i]] += values[i], accumulating duplicate ids. In place."""
    values, flat, ids = _prep(values, ids)
    if out.dtype != values.dtype or not out.flags.c_contiguous:
        raise ValueError("scatter_add: out must be C-contiguous with matching dtype")
    _impl.scatter_add(out.reshape(out.shape[0], -1), ids, flat)
    return out
