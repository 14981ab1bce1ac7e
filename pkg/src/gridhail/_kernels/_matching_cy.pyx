# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled maximum-weight bipartite assignment kernel.

Same shortest-augmenting-path algorithm as matching_py, with tight C loops.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

DEF BIG = 1e30


def max_weight_assign(weights):
    """weights: (R, C) float64. Returns row_match (R,) int64: the column
    assigned to each row, -1 for unmatched. Maximizes total weight; entries
    <= 0 never match; ties resolve to the lowest column index."""
    w = np.ascontiguousarray(weights, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError("weights must be a 2-D matrix")
    cdef Py_ssize_t n_rows = w.shape[0]
    cdef Py_ssize_t n_cols = w.shape[1]
    row_match = np.full(n_rows, -1, dtype=np.int64)
    if n_rows == 0 or n_cols == 0 or not np.any(w > 0):
        return row_match

    cdef Py_ssize_t m = n_cols + n_rows
    cost_arr = np.full((n_rows, m), BIG)
    pos = w > 0
    cost_arr[:, :n_cols][pos] = -w[pos]
    cost_arr[np.arange(n_rows), n_cols + np.arange(n_rows)] = 0.0

    cdef double[:, ::1] cost = cost_arr
    u_arr = np.zeros(n_rows)
    v_arr = np.zeros(m + 1)
    col_row_arr = np.full(m + 1, -1, dtype=np.int64)
    way_arr = np.zeros(m + 1, dtype=np.int64)
    minv_arr = np.empty(m)
    used_arr = np.zeros(m + 1, dtype=np.uint8)

    cdef double[::1] u = u_arr
    cdef double[::1] v = v_arr
    cdef cnp.int64_t[::1] col_row = col_row_arr
    cdef cnp.int64_t[::1] way = way_arr
    cdef double[::1] minv = minv_arr
    cdef unsigned char[::1] used = used_arr
    cdef cnp.int64_t[::1] match_out = row_match

    cdef Py_ssize_t r, j, j0, j1, i0
    cdef double cur, delta

    for r in range(n_rows):
        col_row[m] = r
        j0 = m
        for j in range(m):
            minv[j] = BIG
        for j in range(m + 1):
            used[j] = 0
        while True:
            used[j0] = 1
            i0 = col_row[j0]
            delta = BIG
            j1 = -1
            for j in range(m):
                if not used[j]:
                    cur = cost[i0, j] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m):
                if used[j]:
                    u[col_row[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            u[col_row[m]] += delta
            v[m] -= delta
            j0 = j1
            if col_row[j0] == -1:
                break
        while j0 != m:
            j1 = way[j0]
            col_row[j0] = col_row[j1]
            j0 = j1

    for j in range(n_cols):
        if col_row[j] >= 0:
            match_out[col_row[j]] = j
    return row_match
