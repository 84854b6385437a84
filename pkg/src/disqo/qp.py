"""Convex quadratic programming over polyhedra, with exact duals.

    minimize   1/2 x'Px + q'x
    subject to Ex = h,  Gx <= u

The solver runs an operator-splitting (ADMM) iteration and, at regular
intervals, "polishes" the current active-set guess by solving the reduced KKT
equality system directly. A polished point is accepted only when every KKT
residual (stationarity, primal feasibility, dual nonnegativity, complementary
slackness) passes the requested tolerance, which is what makes the returned
duals reliable enough to price with.

Dual convention: a solution satisfies ``Px + q + E'lam + G'alpha = 0`` with
``alpha >= 0``. Callers that need the opposite sign on the equality dual flip
it themselves (see ``problem.centralized_solve``).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import DimensionMismatch, Infeasible, NonPsdHessian

__all__ = ["QpSpec", "QpSolution", "solve_qp", "RepeatedQp"]

_CHECK_EVERY = 25
_RELAX = 1.6
_SIGMA_REG = 1e-6
_RHO_INEQ = 1.0
_RHO_EQ_FACTOR = 1e3
_CERT_TOL = 1e-9


@dataclass(frozen=True)
class QpSpec:
    """Problem data. ``E``/``h`` and ``G``/``u`` may be ``None`` (empty)."""

    P: np.ndarray
    q: np.ndarray
    E: np.ndarray | None = None
    h: np.ndarray | None = None
    G: np.ndarray | None = None
    u: np.ndarray | None = None

    def dims(self) -> tuple[int, int, int]:
        n = self.q.shape[0]
        me = 0 if self.E is None else self.E.shape[0]
        mi = 0 if self.G is None else self.G.shape[0]
        return n, me, mi


@dataclass
class QpSolution:
    """Primal/dual result of a QP solve.

    ``lam`` are the equality duals and ``alpha >= 0`` the inequality duals in
    the ``Px + q + E'lam + G'alpha = 0`` convention. ``active`` lists the
    inequality rows treated as tight at the solution.
    """

    x: np.ndarray
    lam: np.ndarray
    alpha: np.ndarray
    status: str  # "optimal" | "max_iter"
    iterations: int
    active: tuple[int, ...]
    residuals: dict[str, float] = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


def _empty(n: int) -> np.ndarray:
    return np.zeros((0, n))


def _normalize(spec: QpSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    P = np.asarray(spec.P, dtype=float)
    q = np.asarray(spec.q, dtype=float).ravel()
    n = q.shape[0]
    if P.shape != (n, n):
        raise DimensionMismatch(f"P shape {P.shape} vs q length {n}")
    E = _empty(n) if spec.E is None else np.atleast_2d(np.asarray(spec.E, dtype=float))
    h = np.zeros(0) if spec.h is None else np.asarray(spec.h, dtype=float).ravel()
    G = _empty(n) if spec.G is None else np.atleast_2d(np.asarray(spec.G, dtype=float))
    u = np.zeros(0) if spec.u is None else np.asarray(spec.u, dtype=float).ravel()
    if E.shape != (h.shape[0], n):
        raise DimensionMismatch(f"E shape {E.shape} vs h length {h.shape[0]}, n={n}")
    if G.shape != (u.shape[0], n):
        raise DimensionMismatch(f"G shape {G.shape} vs u length {u.shape[0]}, n={n}")
    asym = float(np.max(np.abs(P - P.T))) if n else 0.0
    if asym > 1e-10 * max(1.0, float(np.max(np.abs(P))) if n else 1.0):
        raise DimensionMismatch(f"P is not symmetric (asymmetry {asym:.3e})")
    return (P + P.T) / 2.0, q, E, h, G, u


def _check_psd(P: np.ndarray) -> None:
    if P.shape[0] == 0:
        return
    eigmin = float(np.linalg.eigvalsh(P).min())
    scale = max(1.0, float(np.max(np.abs(P))))
    if eigmin < -1e-8 * scale:
        raise NonPsdHessian(f"Hessian has eigenvalue {eigmin:.3e}")


def _kkt_residuals(P, q, E, h, G, u, x, lam, alpha) -> dict[str, float]:
    stat = P @ x + q
    if E.shape[0]:
        stat = stat + E.T @ lam
    if G.shape[0]:
        stat = stat + G.T @ alpha
    res = {
        "stationarity": float(np.max(np.abs(stat))) if stat.size else 0.0,
        "eq_feasibility": float(np.max(np.abs(E @ x - h))) if E.shape[0] else 0.0,
        "ineq_feasibility": float(np.max(G @ x - u)) if G.shape[0] else 0.0,
        "dual_nonneg": float(max(0.0, -alpha.min())) if alpha.size else 0.0,
        "comp_slack": float(np.max(np.abs(alpha * (G @ x - u)))) if G.shape[0] else 0.0,
    }
    return res


def _residuals_pass(res: dict[str, float], tol: float) -> bool:
    return (
        res["stationarity"] <= tol
        and res["eq_feasibility"] <= tol
        and res["ineq_feasibility"] <= tol
        and res["dual_nonneg"] <= tol
        and res["comp_slack"] <= tol
    )


def _polish(P, q, E, h, G, u, active: frozenset[int], tol: float) -> QpSolution | None:
    """Solve the KKT equality system for a candidate active set, then repair it.

    Violated inactive rows are added and negative-multiplier rows dropped until
    the candidate is KKT-consistent or the attempt cycles/fails.
    """
    n = q.shape[0]
    me = E.shape[0]
    mi = G.shape[0]
    seen: set[frozenset[int]] = set()
    for _ in range(2 * mi + 8):
        if active in seen:
            return None
        seen.add(active)
        act = sorted(active)
        Ga = G[act] if act else _empty(n)
        m_all = me + len(act)
        kkt = np.zeros((n + m_all, n + m_all))
        kkt[:n, :n] = P
        if me:
            kkt[:n, n : n + me] = E.T
            kkt[n : n + me, :n] = E
        if act:
            kkt[:n, n + me :] = Ga.T
            kkt[n + me :, :n] = Ga
        rhs = np.concatenate([-q, h, u[act]])
        try:
            with warnings.catch_warnings():
                # A contradictory active-set guess gives a singular system; the
                # residual verification below rejects it, so the warning is noise.
                warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
                sol = scipy.linalg.solve(kkt, rhs)
            if not np.all(np.isfinite(sol)):
                raise np.linalg.LinAlgError
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError, ValueError):
            sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
            if not np.all(np.isfinite(sol)):
                return None
        x = sol[:n]
        lam = sol[n : n + me]
        alpha_act = sol[n + me :]

        drop_tol = max(tol, 1e-11)
        if alpha_act.size and alpha_act.min() < -drop_tol:
            worst = act[int(np.argmin(alpha_act))]
            active = active - {worst}
            continue
        slack = u - G @ x if mi else np.zeros(0)
        inactive = np.array([i for i in range(mi) if i not in active], dtype=int)
        if inactive.size and slack[inactive].min() < -drop_tol:
            worst = inactive[int(np.argmin(slack[inactive]))]
            active = active | {int(worst)}
            continue

        alpha = np.zeros(mi)
        if act:
            alpha[act] = np.maximum(alpha_act, 0.0)
        res = _kkt_residuals(P, q, E, h, G, u, x, lam, alpha)
        if _residuals_pass(res, tol):
            tight = tuple(i for i in act if alpha[i] > 0 or u[i] - G[i] @ x <= tol)
            return QpSolution(x=x, lam=lam, alpha=alpha, status="optimal", iterations=0, active=tight, residuals=res)
        return None
    return None


class RepeatedQp:
    """A QP family sharing (P, E, G, u) with a varying linear term.

    Factors the splitting system once; subsequent solves warm-start from the
    previous solution and try its active set first, which usually reduces a
    solve to one small KKT factorization.
    """

    def __init__(
        self,
        P: np.ndarray,
        E: np.ndarray | None = None,
        h_template: np.ndarray | None = None,
        G: np.ndarray | None = None,
        u: np.ndarray | None = None,
        tol: float = 1e-9,
        max_iter: int = 200000,
        check_psd: bool = True,
    ):
        spec = QpSpec(P=P, q=np.zeros(P.shape[0]), E=E, h=h_template, G=G, u=u)
        self.P, _, self.E, self.h, self.G, self.u = _normalize(spec)
        if check_psd:
            _check_psd(self.P)
        self.tol = tol
        self.max_iter = max_iter
        n = self.P.shape[0]
        self.n = n
        me, mi = self.E.shape[0], self.G.shape[0]
        self.me, self.mi = me, mi
        m = me + mi
        self.C = np.vstack([self.E, self.G]) if m else _empty(n)
        self.rho = np.concatenate([np.full(me, _RHO_EQ_FACTOR * _RHO_INEQ), np.full(mi, _RHO_INEQ)])
        if m:
            kkt = np.zeros((n + m, n + m))
            kkt[:n, :n] = self.P + _SIGMA_REG * np.eye(n)
            kkt[:n, n:] = self.C.T
            kkt[n:, :n] = self.C
            kkt[n:, n:] = -np.diag(1.0 / self.rho)
            self._lu = scipy.linalg.lu_factor(kkt)
        else:
            self._lu = None
        self._last_x: np.ndarray | None = None
        self._last_active: frozenset[int] | None = None

    def solve(
        self,
        q: np.ndarray,
        h: np.ndarray | None = None,
        x0: np.ndarray | None = None,
        active0=None,
    ) -> QpSolution:
        q = np.asarray(q, dtype=float).ravel()
        h = self.h if h is None else np.asarray(h, dtype=float).ravel()
        if q.shape[0] != self.n or h.shape[0] != self.me:
            raise DimensionMismatch("linear term / equality rhs size mismatch")

        # Unconstrained: direct solve.
        if self.me + self.mi == 0:
            return self._solve_unconstrained(q)

        # Warm active-set guesses: caller's, then the previous solve's.
        guesses = []
        if active0 is not None:
            guesses.append(frozenset(int(i) for i in active0))
        if self._last_active is not None and self._last_active not in guesses:
            guesses.append(self._last_active)
        if self.mi == 0 and not guesses:
            guesses.append(frozenset())
        for guess in guesses:
            polished = _polish(self.P, q, self.E, h, self.G, self.u, guess, self.tol)
            if polished is not None:
                self._remember(polished)
                return polished

        sol = self._admm(q, h, x0 if x0 is not None else self._last_x)
        if sol.optimal:
            self._remember(sol)
        return sol

    def _remember(self, sol: QpSolution) -> None:
        self._last_x = sol.x.copy()
        self._last_active = frozenset(sol.active)

    def _solve_unconstrained(self, q: np.ndarray) -> QpSolution:
        try:
            x = scipy.linalg.solve(self.P, -q, assume_a="sym")
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError, ValueError):
            x, *_ = np.linalg.lstsq(self.P, -q, rcond=None)
        res = _kkt_residuals(self.P, q, self.E, np.zeros(0), self.G, self.u, x, np.zeros(0), np.zeros(0))
        if not _residuals_pass(res, max(self.tol, 1e-9 * max(1.0, float(np.max(np.abs(q)) if q.size else 0.0)))):
            raise Infeasible("objective is unbounded below (no constraints, gradient not in range of P)")
        return QpSolution(x=x, lam=np.zeros(0), alpha=np.zeros(0), status="optimal", iterations=0, active=(), residuals=res)

    def _admm(self, q: np.ndarray, h: np.ndarray, x0: np.ndarray | None) -> QpSolution:
        n, me, mi = self.n, self.me, self.mi
        m = me + mi
        C, rho = self.C, self.rho
        lower = np.concatenate([h, np.full(mi, -np.inf)])
        upper = np.concatenate([h, self.u])

        x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
        z = np.clip(C @ x, lower, upper)
        y = np.zeros(m)
        y_mark = y.copy()
        best: QpSolution | None = None
        best_res = np.inf

        for k in range(1, self.max_iter + 1):
            rhs = np.concatenate([_SIGMA_REG * x - q, z - y / rho])
            sol = scipy.linalg.lu_solve(self._lu, rhs)
            x_t = sol[:n]
            nu = sol[n:]
            z_t = z + (nu - y) / rho
            x = _RELAX * x_t + (1.0 - _RELAX) * x
            z_pre = _RELAX * z_t + (1.0 - _RELAX) * z
            z = np.clip(z_pre + y / rho, lower, upper)
            y = y + rho * (z_pre - z)

            if k % _CHECK_EVERY == 0 or k == 8:
                cx = C @ x
                r_prim = float(np.max(np.abs(cx - z))) if m else 0.0
                grad = self.P @ x + q + C.T @ y
                r_dual = float(np.max(np.abs(grad)))

                act_tol = max(10.0 * r_prim, 1e-8)
                active = frozenset(
                    i
                    for i in range(mi)
                    if (self.u[i] - cx[me + i] <= act_tol) or y[me + i] > act_tol
                )
                polished = _polish(self.P, q, self.E, h, self.G, self.u, active, self.tol)
                if polished is not None:
                    polished.iterations = k
                    return polished

                if r_prim <= self.tol and r_dual <= self.tol:
                    lam = y[:me]
                    alpha = np.maximum(y[me:], 0.0)
                    res = _kkt_residuals(self.P, q, self.E, h, self.G, self.u, x, lam, alpha)
                    cand = QpSolution(
                        x=x.copy(), lam=lam.copy(), alpha=alpha, status="optimal", iterations=k,
                        active=tuple(i for i in range(mi) if alpha[i] > self.tol), residuals=res,
                    )
                    if _residuals_pass(res, 10.0 * self.tol):
                        return cand
                score = r_prim + r_dual
                if score < best_res:
                    best_res = score
                    lam = y[:me]
                    alpha = np.maximum(y[me:], 0.0)
                    best = QpSolution(
                        x=x.copy(), lam=lam.copy(), alpha=alpha, status="max_iter", iterations=k,
                        active=tuple(i for i in range(mi) if alpha[i] > act_tol),
                        residuals=_kkt_residuals(self.P, q, self.E, h, self.G, self.u, x, lam, alpha),
                    )

                if k >= 200:
                    self._certify_infeasible(y - y_mark, h)
                y_mark = y.copy()

        assert best is not None
        return best

    def _certify_infeasible(self, dy: np.ndarray, h: np.ndarray) -> None:
        """Raise ``Infeasible`` when the dual drift is a primal-infeasibility certificate."""
        vn = float(np.max(np.abs(dy))) if dy.size else 0.0
        if vn <= 1e-13:
            return
        v = dy / vn
        me = self.me
        if self.mi and float(v[me:].min()) < -_CERT_TOL:
            return  # rows without lower bounds need nonnegative certificate entries
        if float(np.max(np.abs(self.C.T @ v))) > _CERT_TOL * max(1.0, float(np.max(np.abs(self.C)))):
            return
        scale = max(1.0, float(np.max(np.abs(h))) if h.size else 1.0, float(np.max(np.abs(self.u))) if self.u.size else 1.0)
        support = float(h @ v[:me]) if me else 0.0
        if self.mi:
            support += float(self.u @ np.maximum(v[me:], 0.0))
        if support < -1e-7 * scale:
            raise Infeasible("constraints admit no common point (certificate found)")


def solve_qp(spec: QpSpec, tol: float = 1e-9, max_iter: int = 200000, x0: np.ndarray | None = None, active0=None, check_psd: bool = True) -> QpSolution:
    """Solve one QP. See module docstring for the dual convention.

    Raises ``NonPsdHessian`` for an indefinite Hessian and ``Infeasible`` when a
    primal-infeasibility certificate is found; returns ``status="max_iter"``
    (with the best iterate and its residuals) when the budget runs out.
    """
    P, q, E, h, G, u = _normalize(spec)
    if check_psd:
        _check_psd(P)
    kernel = RepeatedQp(P, E, h, G, u, tol=tol, max_iter=max_iter, check_psd=False)
    return kernel.solve(q, h=h, x0=x0, active0=active0)
