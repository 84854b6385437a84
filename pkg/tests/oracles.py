"""Independent references for checking the solvers.

The QP oracles here enumerate active sets outright: candidate equality systems
are solved directly and screened for primal/dual feasibility, and the best
feasible candidate wins. Exponential cost, desk-scale sizes only — deliberately
so, since they share no code with the iterative kernel they check.
"""

from __future__ import annotations

import itertools

import numpy as np


def qp_value(P, q, x) -> float:
    return float(0.5 * x @ P @ x + q @ x)


def enumerate_box_qp(P, q, lo, hi, tol=1e-9):
    """Global minimum of 1/2 x'Px + q'x over lo <= x <= hi by enumerating, for
    every variable, whether it sits at its lower bound, its upper bound, or is
    free. Returns (x, value) or None when no candidate passes (numerically
    degenerate input)."""
    P = np.asarray(P, float)
    q = np.asarray(q, float).ravel()
    lo = np.asarray(lo, float).ravel()
    hi = np.asarray(hi, float).ravel()
    n = q.size
    best_x, best_val = None, np.inf
    idx = np.arange(n)
    for free_mask in itertools.product((False, True), repeat=n):
        free = idx[np.array(free_mask, dtype=bool)]
        bound = idx[~np.array(free_mask, dtype=bool)]
        nb = bound.size
        # All lower/upper assignments for the bound variables, batched as RHS columns.
        assignments = np.array(list(itertools.product((0, 1), repeat=nb))) if nb else np.zeros((1, 0), dtype=int)
        xb = np.where(assignments == 0, lo[bound], hi[bound])  # (n_assign, nb)
        if free.size:
            pff = P[np.ix_(free, free)]
            rhs = -(q[free][None, :] + xb @ P[np.ix_(bound, free)])  # (n_assign, nf)
            try:
                xf = np.linalg.solve(pff, rhs.T).T
            except np.linalg.LinAlgError:
                xf, *_ = np.linalg.lstsq(pff, rhs.T, rcond=None)
                xf = xf.T
        else:
            xf = np.zeros((xb.shape[0], 0))
        for row in range(xb.shape[0]):
            x = np.empty(n)
            x[bound] = xb[row]
            x[free] = xf[row]
            if not np.all(np.isfinite(x)):
                continue
            if np.any(x < lo - tol) or np.any(x > hi + tol):
                continue
            g = P @ x + q
            ok = True
            for j in range(nb):
                i = bound[j]
                if assignments[row, j] == 0 and g[i] < -tol:  # at lower: gradient must push up
                    ok = False
                    break
                if assignments[row, j] == 1 and g[i] > tol:  # at upper: gradient must push down
                    ok = False
                    break
            if free.size and np.max(np.abs(g[free])) > max(tol, 1e-8):
                ok = False
            if not ok:
                continue
            val = qp_value(P, q, x)
            if val < best_val - 1e-14:
                best_val, best_x = val, x.copy()
    if best_x is None:
        return None
    return best_x, best_val


def enumerate_qp(P, q, E=None, h=None, G=None, u=None, tol=1e-8):
    """Global minimum over {Ex = h, Gx <= u} by enumerating subsets of tight
    inequality rows. Returns (x, lam, alpha, value) or None if no subset yields
    a KKT-consistent point (infeasible or too degenerate)."""
    P = np.asarray(P, float)
    q = np.asarray(q, float).ravel()
    n = q.size
    E = np.zeros((0, n)) if E is None else np.atleast_2d(np.asarray(E, float))
    h = np.zeros(0) if h is None else np.asarray(h, float).ravel()
    G = np.zeros((0, n)) if G is None else np.atleast_2d(np.asarray(G, float))
    u = np.zeros(0) if u is None else np.asarray(u, float).ravel()
    me, mi = E.shape[0], G.shape[0]
    best = None
    best_val = np.inf
    for r in range(mi + 1):
        for subset in itertools.combinations(range(mi), r):
            act = list(subset)
            rows = np.vstack([E, G[act]]) if (me + len(act)) else np.zeros((0, n))
            rhs_c = np.concatenate([h, u[act]])
            m = rows.shape[0]
            kkt = np.zeros((n + m, n + m))
            kkt[:n, :n] = P
            if m:
                kkt[:n, n:] = rows.T
                kkt[n:, :n] = rows
            rhs = np.concatenate([-q, rhs_c])
            sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
            if not np.all(np.isfinite(sol)):
                continue
            x = sol[:n]
            lam = sol[n : n + me]
            alpha_act = sol[n + me :]
            stat = P @ x + q + rows.T @ sol[n:] if m else P @ x + q
            if np.max(np.abs(stat)) > max(tol, 1e-7):
                continue
            if me and np.max(np.abs(E @ x - h)) > tol:
                continue
            if mi and np.max(G @ x - u) > tol:
                continue
            if alpha_act.size and alpha_act.min() < -max(tol, 1e-7):
                continue
            val = qp_value(P, q, x)
            if val < best_val - 1e-12:
                alpha = np.zeros(mi)
                alpha[act] = np.maximum(alpha_act, 0.0)
                best_val = val
                best = (x.copy(), lam.copy(), alpha, val)
    return best
