# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the hot kernels in ``_kernels_py``.

Rows are independent, so every kernel parallelizes over rows with OpenMP when
the extension was built with it.
"""
import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange
from libc.math cimport exp

cnp.import_array()


cdef void _topk_row(const double[:, ::1] s, Py_ssize_t i, Py_ssize_t k,
                    cnp.int64_t[:, ::1] out) noexcept nogil:
    cdef Py_ssize_t ncol = s.shape[1]
    cdef Py_ssize_t j, p, q, filled = 0
    cdef double v
    for j in range(ncol):
        v = s[i, j]
        if filled == k and not (v > s[i, out[i, k - 1]]):
            continue
        # first slot holding a strictly smaller value; equal values keep index order
        p = filled if filled < k else k - 1
        while p > 0 and s[i, out[i, p - 1]] < v:
            p -= 1
        q = filled if filled < k else k - 1
        while q > p:
            out[i, q] = out[i, q - 1]
            q -= 1
        out[i, p] = j
        if filled < k:
            filled += 1


def topk_rows(scores, Py_ssize_t k, int num_threads=1):
    cdef const double[:, ::1] s = np.ascontiguousarray(scores, dtype=np.float64)
    cdef Py_ssize_t n = s.shape[0], i
    if k > s.shape[1]:
        k = s.shape[1]
    out_arr = np.zeros((n, k), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] out = out_arr
    if k == 0:
        return out_arr
    for i in prange(n, nogil=True, num_threads=num_threads, schedule="static"):
        _topk_row(s, i, k, out)
    return out_arr


def reciprocal_mask(affinity, Py_ssize_t k, int num_threads=1):
    a = np.ascontiguousarray(affinity, dtype=np.float64)
    cdef Py_ssize_t n = a.shape[0], i, j, p
    if k > n:
        k = n
    cdef cnp.int64_t[:, ::1] rtop = topk_rows(a, k, num_threads)
    cdef cnp.int64_t[:, ::1] ctop = topk_rows(np.ascontiguousarray(a.T), k, num_threads)
    col_arr = np.zeros((n, n), dtype=np.uint8)
    mask_arr = np.zeros((n, n), dtype=np.uint8)
    cdef cnp.uint8_t[:, ::1] incol = col_arr
    cdef cnp.uint8_t[:, ::1] mask = mask_arr
    for j in range(n):
        for p in range(k):
            incol[ctop[j, p], j] = 1
    for i in prange(n, nogil=True, num_threads=num_threads, schedule="static"):
        for p in range(k):
            j = rtop[i, p]
            if incol[i, j]:
                mask[i, j] = 1
        mask[i, i] = 1
    return mask_arr.view(bool)


def masked_softmax(scores, mask, double sign=1.0, int num_threads=1):
    cdef const double[:, ::1] s = np.ascontiguousarray(scores, dtype=np.float64)
    m_arr = np.ascontiguousarray(mask, dtype=bool).view(np.uint8)
    cdef const cnp.uint8_t[:, ::1] m = m_arr
    cdef Py_ssize_t n = s.shape[0], c = s.shape[1], i, j
    out_arr = np.zeros((n, c), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    bad_arr = np.zeros(n, dtype=np.uint8)
    cdef cnp.uint8_t[::1] bad = bad_arr
    cdef double top, total, z
    cdef int seen
    for i in prange(n, nogil=True, num_threads=num_threads, schedule="static"):
        seen = 0
        top = 0.0
        for j in range(c):
            if m[i, j]:
                z = sign * s[i, j]
                if seen == 0 or z > top:
                    top = z
                seen = 1
        if seen == 0:
            bad[i] = 1
            continue
        total = 0.0
        for j in range(c):
            if m[i, j]:
                z = exp(sign * s[i, j] - top)
                out[i, j] = z
                total = total + z
        for j in range(c):
            out[i, j] = out[i, j] / total
    bad_rows = np.flatnonzero(bad_arr)
    if bad_rows.size:
        return np.zeros((n, c), dtype=np.float64), int(bad_rows[0])
    return out_arr, -1


def ranked_matches_stats(matches, int num_threads=1):
    m_arr = np.ascontiguousarray(matches).astype(np.uint8)
    cdef const cnp.uint8_t[:, ::1] m = m_arr
    cdef Py_ssize_t nq = m.shape[0], ng = m.shape[1], q, r
    ap_arr = np.zeros(nq, dtype=np.float64)
    first_arr = np.full(nq, -1, dtype=np.int64)
    rel_arr = np.zeros(nq, dtype=np.int64)
    cdef double[::1] ap = ap_arr
    cdef cnp.int64_t[::1] first = first_arr
    cdef cnp.int64_t[::1] rel = rel_arr
    cdef cnp.int64_t hits
    cdef double acc
    for q in prange(nq, nogil=True, num_threads=num_threads, schedule="static"):
        hits = 0
        acc = 0.0
        for r in range(ng):
            if m[q, r]:
                if hits == 0:
                    first[q] = r
                hits = hits + 1
                acc = acc + <double>hits / <double>(r + 1)
        rel[q] = hits
        if hits > 0:
            ap[q] = acc / <double>hits
    return ap_arr, first_arr, rel_arr
