# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops: cascaded biquad filtering and signed-rank counting."""
import numpy as np

cimport numpy as cnp

cnp.import_array()


def sosfilt(double[:, ::1] sos, double[:, ::1] x, double[:, :, ::1] zi):
    """Filter each row of ``x`` through the second-order sections in ``sos``.

    Direct form II transposed. ``zi`` has shape (rows, sections, 2) and is
    updated in place to the final state. Returns the filtered array.
    """
    cdef Py_ssize_t n_rows = x.shape[0]
    cdef Py_ssize_t n_samples = x.shape[1]
    cdef Py_ssize_t n_sec = sos.shape[0]
    cdef Py_ssize_t r, t, s
    cdef double xn, yn, b0, b1, b2, a1, a2, z1, z2
    out = np.empty((n_rows, n_samples), dtype=np.float64)
    cdef double[:, ::1] y = out
    for r in range(n_rows):
        for t in range(n_samples):
            xn = x[r, t]
            for s in range(n_sec):
                b0 = sos[s, 0]
                b1 = sos[s, 1]
                b2 = sos[s, 2]
                a1 = sos[s, 4]
                a2 = sos[s, 5]
                z1 = zi[r, s, 0]
                z2 = zi[r, s, 1]
                yn = b0 * xn + z1
                zi[r, s, 0] = b1 * xn - a1 * yn + z2
                zi[r, s, 1] = b2 * xn - a2 * yn
                xn = yn
            y[r, t] = xn
    return out


def signed_rank_counts(cnp.int64_t[::1] ranks):
    """Number of sign assignments reaching each positive-rank sum.

    ``ranks`` are non-negative integers (doubled ranks when ties produce
    half-integers). Entry ``k`` of the result counts the subsets of ranks
    summing to ``k``.
    """
    cdef Py_ssize_t n = ranks.shape[0]
    cdef Py_ssize_t total = 0
    cdef Py_ssize_t i, k, r
    for i in range(n):
        total += ranks[i]
    out = np.zeros(total + 1, dtype=np.int64)
    cdef cnp.int64_t[::1] counts = out
    counts[0] = 1
    cdef Py_ssize_t reach = 0
    for i in range(n):
        r = ranks[i]
        reach += r
        for k in range(reach, r - 1, -1):
            counts[k] += counts[k - r]
    return out
