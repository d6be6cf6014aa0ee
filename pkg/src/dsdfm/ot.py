"""Exact minibatch optimal transport with uniform weights.

The dual is solved over a single potential ``f`` with ``g`` recovered by the
c-transform ``g_j = min_k (C_kj - f_k)``. A soft-min relaxation of that
concave objective is maximised with L-BFGS at a decreasing temperature; the
resulting matching is then made exactly optimal by negative-cycle
cancelling, and ``f`` is projected onto the feasible polyhedron of that
matching so the dual value meets the primal cost. Plans are read off the
slacks ``s_ij = C_ij - f_i - g_j``; if the slacks do not single out a
permutation the exact Hungarian solver takes over and the plan is flagged.
"""
import json
import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

log = logging.getLogger(__name__)


@dataclass
class DualPotentials:
    f: np.ndarray
    g: np.ndarray
    value: float
    converged: bool = True
    iterations: int = 0
    matching: np.ndarray = None  # row -> column, from the dual refinement


@dataclass
class TransportPlan:
    rows: np.ndarray      # rows[j] = source index matched to target j
    cols: np.ndarray      # cols[i] = target index matched to source i
    cost: float           # sum_ij pi_ij C_ij with pi_ij = 1/N on matched pairs
    slack: np.ndarray = None
    fallback: bool = False

    @property
    def n(self):
        return self.cols.shape[0]

    @property
    def pairs(self):
        return list(zip(range(self.n), self.cols.tolist()))

    def matrix(self):
        pi = np.zeros((self.n, self.n))
        pi[np.arange(self.n), self.cols] = 1.0 / self.n
        return pi


def build_cost_matrix(z0, z1):
    """Squared Euclidean cost ``C_ij = ||z0_i - z1_j||^2``."""
    z0 = np.atleast_2d(np.asarray(z0, dtype=np.float64))
    z1 = np.atleast_2d(np.asarray(z1, dtype=np.float64))
    if z0.shape[0] == 0 or z1.shape[0] == 0:
        raise ValueError("empty batch")
    if z0.shape[1] != z1.shape[1]:
        raise ValueError(f"dimension mismatch: {z0.shape[1]} vs {z1.shape[1]}")
    if z0.shape[0] != z1.shape[0]:
        raise ValueError("batches must have equal size")
    diff = z0[:, None, :] - z1[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def c_transform(C, f):
    return (C - f[:, None]).min(axis=0)


def dual_objective(C, f):
    """Uniform-weight dual ``mean(f) + mean(c_transform(f))``."""
    return float(f.mean() + c_transform(C, f).mean())


def _smooth_dual(f, C, tau):
    # negated soft-min dual and its gradient
    n = C.shape[0]
    x = (f[:, None] - C) / tau
    xmax = x.max(axis=0)
    p = np.exp(x - xmax[None, :])
    tot = p.sum(axis=0)
    p /= tot[None, :]
    lse = xmax + np.log(tot)
    val = f.mean() - tau * lse.mean()
    grad = (1.0 - p.sum(axis=1)) / n
    return -val, -grad


def _greedy_matching(S):
    # rows in order of their smallest slack, each takes its cheapest free column
    n = S.shape[0]
    cols = np.empty(n, dtype=np.int64)
    masked = np.array(S, dtype=np.float64)
    for i in np.argsort(S.min(axis=1), kind="stable"):
        j = int(np.argmin(masked[i]))
        cols[i] = j
        masked[:, j] = np.inf
    return cols


def _edge_weights(C, cols):
    # W[k, i] = C[i, cols[k]] - C[k, cols[k]]: cost change when i takes k's column
    own = C[np.arange(C.shape[0]), cols]
    return C[:, cols].T - own[:, None]


def _pred_cycle(pred):
    """Return one cycle of the predecessor graph, or None."""
    n = pred.shape[0]
    state = np.zeros(n, dtype=np.int8)   # 0 unseen, 1 on current walk, 2 done
    for s in range(n):
        if state[s]:
            continue
        walk, v = [], s
        while v >= 0 and state[v] == 0:
            state[v] = 1
            walk.append(v)
            v = pred[v]
        if v >= 0 and state[v] == 1:
            return walk[walk.index(v):]
        for w in walk:
            state[w] = 2
    return None


def _relax_down(d, W, tol, max_iter, check_every=4):
    """Bellman-Ford from initial bounds ``d``.

    Returns ``(d, cycle)``; ``cycle`` is a negative cycle of the predecessor
    graph (list of nodes) or None when the relaxation settled.
    """
    n = d.shape[0]
    pred = -np.ones(n, dtype=np.int64)
    cols = np.arange(n)
    for it in range(max_iter):
        cand = d[:, None] + W
        k = cand.argmin(axis=0)
        best = cand[k, cols]
        upd = best < d - tol
        if not upd.any():
            return d, None
        d = np.where(upd, best, d)
        pred = np.where(upd, k, pred)
        if it % check_every == check_every - 1:
            cycle = _pred_cycle(pred)
            if cycle is not None:
                return d, cycle
    return d, _pred_cycle(pred) or []


def _cancel_negative_cycles(C, cols, f0, tol, max_rounds):
    n = C.shape[0]
    for rounds in range(max_rounds):
        W = _edge_weights(C, cols)
        d, cycle = _relax_down(f0.copy(), W, tol, n + 1)
        if cycle is None:
            return cols, d, W, rounds, True
        if not cycle:
            return cols, d, W, rounds, False
        # pred[i] = k along the cycle: i takes k's column
        new_cols = cols.copy()
        for a, b in zip(cycle, cycle[1:] + cycle[:1]):
            # walk order follows pred, so b = pred[a]
            new_cols[a] = cols[b]
        cols = new_cols
    return cols, f0, _edge_weights(C, cols), max_rounds, False


def solve_dual(C, iterations=30, tolerance=1e-12, temperatures=(3e-3,), max_rounds=None,
               margins=(1e-4, 1e-6, 1e-8)):
    """Maximise the c-transformed dual of the uniform-weight OT problem.

    Parameters
    ----------
    C : ndarray, shape (N, N)
        Cost matrix.
    iterations : int
        L-BFGS iteration cap per temperature.
    tolerance : float
        Relative tolerance of the exact refinement (scaled by ``max(C)``).
    temperatures : sequence of float
        Soft-min temperatures (relative to ``max(C)``) for the warm start.
    max_rounds : int, optional
        Cap on negative-cycle cancellations; defaults to ``N * N``.
    margins : sequence of float
        Candidate slack margins (relative to ``max(C)``) for unmatched pairs;
        the first feasible one is used. With a unique optimal matching this
        leaves exactly one zero-slack row per column.

    Returns
    -------
    DualPotentials
        ``converged`` is False when the refinement hit its cap; the
        potentials are then the best found so far.
    """
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] != C.shape[1] or C.shape[0] == 0:
        raise ValueError("C must be a non-empty square matrix")
    if not np.all(np.isfinite(C)):
        raise ValueError("C must be finite")
    n = C.shape[0]
    if n == 1:
        return DualPotentials(np.zeros(1), C[0].copy(), float(C[0, 0]), True, 0, np.zeros(1, np.int64))
    scale = float(np.abs(C).max()) or 1.0
    Cs = C / scale
    f = np.zeros(n)
    total_iter = 0
    for tau in temperatures:
        res = minimize(_smooth_dual, f, args=(Cs, tau), jac=True, method="L-BFGS-B",
                       options={"maxiter": iterations, "gtol": 1e-10, "ftol": 1e-14})
        f = res.x - res.x.mean()
        total_iter += res.nit
    slack = Cs - f[:, None] - c_transform(Cs, f)[None, :]
    cols = _greedy_matching(slack)
    cols, f_feas, W, rounds, ok = _cancel_negative_cycles(
        Cs, cols, f, tolerance, max_rounds if max_rounds is not None else n * n)
    if ok:
        # push f inside the feasible set so unmatched slacks stay >= margin
        off = ~np.eye(n, dtype=bool)
        for margin in margins:
            d, cycle = _relax_down(f_feas.copy(), W - margin * off, tolerance, n + 1)
            if cycle is None:
                f_feas = d
                break
    f = f_feas * scale
    g = c_transform(C, f)
    value = float(f.mean() + g.mean())
    return DualPotentials(f, g, value, ok, total_iter + rounds, cols)


def hungarian(C):
    """Exact linear assignment by shortest augmenting paths, O(N^3).

    Returns ``cols`` with ``cols[i]`` the column assigned to row ``i``.
    """
    C = np.asarray(C, dtype=np.float64)
    n = C.shape[0]
    INF = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)     # p[j]: row matched to column j (1-based)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, INF)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = C[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], INF)
            j1 = int(masked.argmin()) + 1
            delta = masked[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    cols = np.empty(n, dtype=np.int64)
    cols[p[1:] - 1] = np.arange(n)
    return cols


def _plan_from_cols(C, cols, slack=None, fallback=False):
    n = C.shape[0]
    rows = np.empty(n, dtype=np.int64)
    rows[cols] = np.arange(n)
    cost = float(C[np.arange(n), cols].sum() / n)
    return TransportPlan(rows, cols, cost, slack, fallback)


def _tight_matching(tied, first):
    """Perfect matching of columns to rows on the ``tied`` edges, or None.

    Starts from the lowest-index choice ``first`` and repairs conflicts with
    augmenting paths (Kuhn's algorithm), so unconflicted columns keep their
    lowest tied row.
    """
    n = tied.shape[0]
    adj = [np.flatnonzero(tied[:, j]) for j in range(n)]
    row_of = -np.ones(n, dtype=np.int64)     # column -> row
    col_of = -np.ones(n, dtype=np.int64)     # row -> column
    for j in range(n):
        if col_of[first[j]] < 0:
            row_of[j], col_of[first[j]] = first[j], j
    for j in np.flatnonzero(row_of < 0):
        # iterative DFS over alternating paths starting at free column j
        seen = np.zeros(n, dtype=bool)
        stack = [(j, iter(adj[j]))]
        parent = {}
        found = -1
        while stack and found < 0:
            col, it = stack[-1]
            for i in it:
                if seen[i]:
                    continue
                seen[i] = True
                parent[i] = col
                if col_of[i] < 0:
                    found = i
                else:
                    stack.append((col_of[i], iter(adj[col_of[i]])))
                break
            else:
                stack.pop()
        if found < 0:
            return None
        i = found
        while True:
            col = parent[i]
            prev = row_of[col]
            row_of[col], col_of[i] = i, col
            if col == j:
                break
            i = prev
    return row_of


def extract_plan(C, potentials, slack_tol=None, tie_tol=1e-12):
    """Read the permutation plan off the slacks of optimal potentials.

    Column ``j`` is matched to the row of smallest slack (lowest index among
    ties). If two columns claim the same row, the conflict is resolved by a
    perfect matching on the tied edges. When a column's smallest slack
    exceeds ``slack_tol`` (default ``1e-6 * max(C)``) or the tied edges admit
    no perfect matching, the exact Hungarian solver is used instead and
    ``plan.fallback`` is set.
    """
    C = np.asarray(C, dtype=np.float64)
    n = C.shape[0]
    scale = float(np.abs(C).max()) or 1.0
    if slack_tol is None:
        slack_tol = 1e-6 * scale
    f, g = potentials.f, potentials.g
    s = C - f[:, None] - g[None, :]
    smin = s.min(axis=0)
    tied = s <= smin[None, :] + tie_tol * scale
    rows = tied.argmax(axis=0)   # first (lowest) tied row per column
    if bool(np.all(smin <= slack_tol)):
        if np.unique(rows).size != n:
            # several columns share their lowest tied row: any perfect matching
            # on the tight edges is optimal by complementary slackness
            rows = _tight_matching(tied, rows)
        if rows is not None:
            cols = np.empty(n, dtype=np.int64)
            cols[rows] = np.arange(n)
            return _plan_from_cols(C, cols, s, False)
    log.debug("slack extraction failed (max min-slack %.3g); using exact assignment", smin.max())
    return _plan_from_cols(C, hungarian(C), s, True)


def optimal_plan(C, **kwargs):
    """Solve the dual and extract the plan: ``(plan, potentials)``."""
    pot = solve_dual(C, **kwargs)
    return extract_plan(C, pot), pot


def match_pairs(plan, z0, z1):
    """Couples ``(z0_i, z1_cols[i])`` in source order."""
    z0 = np.asarray(z0)
    z1 = np.asarray(z1)
    if z0.shape[0] != plan.n or z1.shape[0] != plan.n:
        raise ValueError("batch sizes do not match the plan")
    return z0, z1[plan.cols]


def ot_couple(z0, z1):
    """Convenience: reorder ``z1`` so that ``(z0[i], z1_out[i])`` follows the OT plan."""
    C = build_cost_matrix(z0, z1)
    plan, _ = optimal_plan(C)
    return match_pairs(plan, z0, z1)[1], plan


def diagnostic_dump(path, C, potentials, plan):
    """JSON dump of an instance (used for fallback cases)."""
    s = C - potentials.f[:, None] - potentials.g[None, :]
    payload = {"C": C.tolist(), "f": potentials.f.tolist(), "g": potentials.g.tolist(),
               "slack": s.tolist(), "cols": plan.cols.tolist(), "fallback": plan.fallback,
               "cost": plan.cost, "dual_value": potentials.value}
    with open(path, "w") as fh:
        json.dump(payload, fh)
