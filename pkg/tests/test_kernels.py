"""Segment kernel semantics, and native/numpy backend agreement."""

import numpy as np
import pytest

from emnn import kernels
from emnn.kernels import _pykernels


def test_segment_sum_basic():
    out = kernels.segment_sum(np.array([[1.0], [2.0], [3.0]]),
                              np.array([0, 0, 1]), 2)
    np.testing.assert_array_equal(out, [[3.0], [3.0]])


def test_segment_sum_empty_segment_is_zero():
    out = kernels.segment_sum(np.ones((2, 3)), np.array([2, 2]), 4)
    np.testing.assert_array_equal(out[[0, 1, 3]], 0.0)
    np.testing.assert_array_equal(out[2], 2.0)


def test_segment_sum_trailing_shape():
    values = np.arange(24.0).reshape(4, 3, 2)
    out = kernels.segment_sum(values, np.array([1, 1, 0, 0]), 2)
    assert out.shape == (2, 3, 2)
    np.testing.assert_array_equal(out[1], values[0] + values[1])


def test_segment_max_values_and_argmax():
    values = np.array([[1.0, 5.0], [4.0, 2.0], [0.0, 7.0]])
    out, arg = kernels.segment_max(values, np.array([0, 0, 1]), 3)
    np.testing.assert_array_equal(out, [[4.0, 5.0], [0.0, 7.0], [0.0, 0.0]])
    np.testing.assert_array_equal(arg, [[1, 0], [2, 2], [-1, -1]])


def test_segment_max_tie_takes_first_occurrence():
    values = np.array([[2.0], [2.0], [1.0]])
    _, arg = kernels.segment_max(values, np.array([0, 0, 0]), 1)
    assert arg[0, 0] == 0


def test_scatter_add_accumulates_duplicates():
    out = np.zeros((3, 2))
    kernels.scatter_add(out, np.array([1, 1, 0]), np.ones((3, 2)))
    np.testing.assert_array_equal(out, [[1.0, 1.0], [2.0, 2.0], [0.0, 0.0]])


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_backends_agree(seed, dtype):
    if kernels.BACKEND != "native":
        pytest.skip("compiled kernels not built")
    native = kernels.backend_module("native")
    rng = np.random.default_rng(seed)
    values = np.ascontiguousarray(rng.normal(size=(50, 7)).astype(dtype))
    ids = np.sort(rng.integers(0, 12, size=50)).astype(np.int64)

    np.testing.assert_array_equal(native.segment_sum(values, ids, 12),
                                  _pykernels.segment_sum(values, ids, 12))
    out_n, arg_n = native.segment_max(values, ids, 12)
    out_p, arg_p = _pykernels.segment_max(values, ids, 12)
    np.testing.assert_array_equal(out_n, out_p)
    np.testing.assert_array_equal(arg_n, arg_p)

    acc_n = np.zeros((12, 7), dtype=dtype)
    acc_p = np.zeros((12, 7), dtype=dtype)
    native.scatter_add(acc_n, ids, values)
    _pykernels.scatter_add(acc_p, ids, values)
    np.testing.assert_array_equal(acc_n, acc_p)


def test_backends_agree_on_exact_ties():
    if kernels.BACKEND != "native":
        pytest.skip("compiled kernels not built")
    native = kernels.backend_module("native")
    values = np.array([[3.0], [3.0], [3.0], [1.0]])
    ids = np.array([0, 0, 1, 1], dtype=np.int64)
    out_n, arg_n = native.segment_max(values, ids, 2)
    out_p, arg_p = _pykernels.segment_max(values, ids, 2)
    np.testing.assert_array_equal(out_n, out_p)
    np.testing.assert_array_equal(arg_n, arg_p)
