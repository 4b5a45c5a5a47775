"""Minimum-cost bipartite assignment with a deterministic tie-break.

Solver is the shortest-augmenting-path (Jonker-Volgenant style) algorithm over
the smaller matrix dimension, which also yields optimal dual potentials. When
the optimum is not unique, the returned assignment is canonicalized to the
lexicographically smallest sequence of (row, col) pairs among all optimal
assignments, using the zero-reduced-cost graph implied by the duals:
every optimal assignment lies on edges with zero reduced cost, and a node on
the larger side may stay unmatched only if its potential is zero.
"""

import numpy as np

__all__ = ["hungarian_match"]


def _solve(cost: np.ndarray):
    """Shortest augmenting path LSA for cost with n_rows <= n_cols.

    Returns (row_to_col, u, v): row_to_col[i] is the matched column of row i,
    u/v are dual potentials with cost[i, j] - u[i] - v[j] >= 0 and equality on
    matched edges; v <= 0.
    """
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)  # p[j] = row matched to col j, 1-based; 0 = free
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = np.nonzero(~used[1:])[0] + 1
            cur = cost[i0 - 1, free - 1] - u[i0] - v[free]
            better = cur < minv[free]
            minv[free] = np.where(better, cur, minv[free])
            way[free[better]] = j0
            k = int(np.argmin(minv[free]))
            delta = minv[free][k]
            j1 = int(free[k])
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    row_to_col = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j] != 0:
            row_to_col[p[j] - 1] = j - 1
    return row_to_col, u[1:], v[1:]


def _kuhn_saturates(adj, n_right, targets):
    """True iff some matching saturates every left node in `targets`.

    adj: list of sorted column lists per left node.
    """
    match_right = np.full(n_right, -1, dtype=np.int64)
    match_left = {}

    def try_augment(i, seen):
        for j in adj[i]:
            if seen[j]:
                continue
            seen[j] = True
            if match_right[j] == -1 or try_augment(match_right[j], seen):
                match_right[j] = i
                match_left[i] = j
                return True
        return False

    for i in targets:
        if i in match_left:
            continue
        if not try_augment(i, np.zeros(n_right, dtype=bool)):
            return False
    return True


def _lex_canonicalize(cost, admissible, must_rows, must_cols, k):
    """Lexicographically smallest (row, col) pair list among optimal assignments.

    admissible: boolean matrix of edges usable by any optimal assignment.
    must_rows / must_cols: nodes that every optimal assignment matches.
    A candidate partial choice is kept iff the remainder still admits a
    matching of size k saturating all remaining forced nodes; saturating each
    side separately is sufficient (a bipartite matching saturating A on the
    left and one saturating B on the right imply one saturating both).
    """
    m, n = cost.shape
    used_cols = np.zeros(n, dtype=bool)
    decided_off = np.zeros(m, dtype=bool)
    pairs = []

    def feasible(extra_row=None, extra_col=None):
        rows_left = [
            i for i in range(m)
            if not decided_off[i] and i != extra_row and all(i != r for r, _ in pairs)
        ]
        cols_left = [j for j in range(n) if not used_cols[j] and j != extra_col]
        col_pos = {j: jj for jj, j in enumerate(cols_left)}
        adj = [[col_pos[j] for j in np.nonzero(admissible[i])[0] if j in col_pos] for i in rows_left]
        row_pos = {i: ii for ii, i in enumerate(rows_left)}
        # forced nodes on each side
        if m <= n:
            forced_left = list(range(len(rows_left)))
        else:
            forced_left = [row_pos[i] for i in rows_left if must_rows[i]]
        if m >= n:
            forced_right = list(range(len(cols_left)))
        else:
            forced_right = [col_pos[j] for j in cols_left if must_cols[j]]
        if len(forced_left) > min(len(rows_left), len(cols_left)):
            return False
        if not _kuhn_saturates(adj, len(cols_left), forced_left):
            return False
        if forced_right:
            radj = [[] for _ in cols_left]
            for ii, cols in enumerate(adj):
                for jj in cols:
                    radj[jj].append(ii)
            if not _kuhn_saturates(radj, len(rows_left), forced_right):
                return False
        return True

    for i in range(m):
        if len(pairs) == k:
            break
        placed = False
        for j in np.nonzero(admissible[i])[0]:
            if used_cols[j]:
                continue
            if feasible(extra_row=i, extra_col=int(j)):
                pairs.append((i, int(j)))
                used_cols[j] = True
                placed = True
                break
        if not placed:
            decided_off[i] = True
    return pairs


def hungarian_match(cost):
    """Optimal assignment for an m x n cost matrix.

    Returns (rows, cols): int64 arrays of length min(m, n), sorted by row,
    minimizing the total assigned cost. Among cost-optimal assignments the
    lexicographically smallest (row, col) sequence is returned.

    Raises ValueError on non-finite entries.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be 2-D, got shape {cost.shape}")
    m, n = cost.shape
    if m == 0 or n == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix contains non-finite entries")

    transposed = m > n
    work = cost.T if transposed else cost
    row_to_col, u, v = _solve(work)
    if transposed:
        col_duals, row_duals = u, v
        pairs = [(int(c), int(r)) for r, c in enumerate(row_to_col)]
    else:
        row_duals, col_duals = u, v
        pairs = [(int(r), int(c)) for r, c in enumerate(row_to_col)]
    pairs.sort()

    k = min(m, n)
    tol = 1e-9 * max(1.0, float(np.abs(cost).max()))
    reduced = cost - row_duals[:, None] - col_duals[None, :]
    admissible = reduced <= tol
    if int(admissible.sum()) > k:
        # optimum may be non-unique: pick the lexicographically smallest one
        must_rows = row_duals < -tol  # only meaningful when rows are the larger side
        must_cols = col_duals < -tol
        pairs = _lex_canonicalize(cost, admissible, must_rows, must_cols, k)

    rows = np.array([p[0] for p in pairs], dtype=np.int64)
    cols = np.array([p[1] for p in pairs], dtype=np.int64)
    return rows, cols
