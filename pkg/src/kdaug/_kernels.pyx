# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops for batch augmentation and calibration binning.

Semantics are identical to :mod:`kdaug._kernels_py`; the test suite checks
both backends against each other.
"""
import numpy as np

cimport cython
from cython cimport floating
from libc.stdint cimport int64_t


def removal_fill(floating[:, :, ::1] x, const int64_t[::1] starts,
                 const int64_t[::1] lengths):
    """Flatten ``x[b, :, s:s+n]`` to ``x[b, :, s]`` in place for every row b."""
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], T = x.shape[2]
    cdef Py_ssize_t b, c, i, s, n, stop
    cdef floating head
    if starts.shape[0] != B or lengths.shape[0] != B:
        raise ValueError("starts/lengths must have one entry per row")
    with nogil:
        for b in range(B):
            n = lengths[b]
            if n <= 1:
                continue
            s = starts[b]
            stop = s + n
            if s < 0 or stop > T:
                with gil:
                    raise ValueError(f"segment [{s}, {stop}) outside window of length {T}")
            for c in range(C):
                head = x[b, c, s]
                for i in range(s + 1, stop):
                    x[b, c, i] = head
    return np.asarray(x)


def roll_time(floating[:, :, ::1] x, const int64_t[::1] shifts):
    """Circular right-roll along time: ``out[b, :, i] = x[b, :, (i - k_b) mod T]``."""
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1], T = x.shape[2]
    cdef Py_ssize_t b, c, i, k
    if shifts.shape[0] != B:
        raise ValueError("shifts must have one entry per row")
    out = np.empty_like(np.asarray(x))
    cdef floating[:, :, ::1] o = out
    with nogil:
        for b in range(B):
            k = shifts[b] % T
            if k < 0:
                k = k + T
            for c in range(C):
                for i in range(k):
                    o[b, c, i] = x[b, c, T - k + i]
                for i in range(k, T):
                    o[b, c, i] = x[b, c, i - k]
    return out


def calibration_bins(const double[::1] confidence, const unsigned char[::1] correct,
                     const double[::1] edges):
    """Accumulate per-bin (count, confidence sum, correct count).

    Bin m covers ``(edges[m], edges[m+1]]``; values at or below ``edges[0]``
    fall into bin 0.
    """
    cdef Py_ssize_t n = confidence.shape[0], n_bins = edges.shape[0] - 1
    cdef Py_ssize_t j, lo, hi, mid
    cdef double v
    if correct.shape[0] != n:
        raise ValueError("confidence and correct must have equal length")
    counts = np.zeros(n_bins, dtype=np.int64)
    conf_sum = np.zeros(n_bins, dtype=np.float64)
    hits = np.zeros(n_bins, dtype=np.int64)
    cdef int64_t[::1] cnt = counts
    cdef double[::1] cs = conf_sum
    cdef int64_t[::1] hs = hits
    with nogil:
        for j in range(n):
            v = confidence[j]
            # first edge >= v, minus one
            lo = 0
            hi = n_bins + 1
            while lo < hi:
                mid = (lo + hi) // 2
                if edges[mid] < v:
                    lo = mid + 1
                else:
                    hi = mid
            lo = lo - 1
            if lo < 0:
                lo = 0
            elif lo >= n_bins:
                lo = n_bins - 1
            cnt[lo] += 1
            cs[lo] += v
            hs[lo] += correct[j]
    return counts, conf_sum, hits
