"""Pure-Python maximum-weight bipartite assignment (fallback kernel).

Shortest-augmenting-path method with dual potentials on the dense cost
matrix, one dummy column per row so rows may stay unmatched. Entries <= 0
never match. Mirrors the compiled kernel step for step so both backends
return identical assignments.
"""

import numpy as np

BIG = 1e30


def max_weight_assign(weights) -> np.ndarray:
    """weights: (R, C) float64. Returns row_match (R,) int64: the column
    assigned to each row, -1 for unmatched. Maximizes the total weight over
    all matchings; ties resolve to the lowest column index scanned first."""
    w = np.ascontiguousarray(weights, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError("weights must be a 2-D matrix")
    n_rows, n_cols = w.shape
    row_match = np.full(n_rows, -1, dtype=np.int64)
    if n_rows == 0 or n_cols == 0 or not np.any(w > 0):
        return row_match

    m = n_cols + n_rows  # real columns then one dummy per row
    cost = np.full((n_rows, m), BIG)
    pos = w > 0
    cost[:, :n_cols][pos] = -w[pos]
    cost[np.arange(n_rows), n_cols + np.arange(n_rows)] = 0.0

    u = np.zeros(n_rows)
    v = np.zeros(m + 1)  # index m is the virtual root column
    col_row = np.full(m + 1, -1, dtype=np.int64)
    way = np.zeros(m + 1, dtype=np.int64)

    for r in range(n_rows):
        col_row[m] = r
        j0 = m
        minv = np.full(m, BIG)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = col_row[j0]
            free = ~used[:m]
            idx = np.nonzero(free)[0]
            cur = cost[i0, idx] - u[i0] - v[idx]
            better = cur < minv[idx]
            upd = idx[better]
            minv[upd] = cur[better]
            way[upd] = j0
            k = int(np.argmin(minv[idx]))
            j1 = int(idx[k])
            delta = minv[j1]
            used_cols = np.nonzero(used[:m])[0]
            u[col_row[used_cols]] += delta
            u[col_row[m]] += delta if used[m] else 0.0
            v[used_cols] -= delta
            v[m] -= delta
            minv[idx] -= delta
            j0 = j1
            if col_row[j0] == -1:
                break
        while j0 != m:
            j1 = way[j0]
            col_row[j0] = col_row[j1]
            j0 = j1

    for j in range(n_cols):
        if col_row[j] >= 0:
            row_match[col_row[j]] = j
    return row_match
