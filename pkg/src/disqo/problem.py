"""Constraint-coupled quadratic problems.

N agents each own a block x_i of the stacked decision vector x. They share one
linear coupling constraint  sum_i A_i x_i = d  and keep private polyhedral sets
B_i x_i <= m_i. Every agent carries a quadratic objective over the *full*
vector, stored twice:

* ``algorithmic`` — a per-agent convex decomposition of the total cost, the one
  the distributed solver optimizes;
* ``actual`` — the cost the agent genuinely pays, the one mechanisms price and
  evaluate utilities with.

Both decompositions sum to the same total objective; they differ only in how
cross-terms are attributed to agents.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.optimize

from .errors import (
    ConventionMismatch,
    DimensionMismatch,
    EmptyLocalSet,
    Infeasible,
    MaxIterReached,
    NonConvexObjective,
    UnknownAgent,
)
from .qp import QpSpec, solve_qp

__all__ = [
    "QuadObjective",
    "LocalPolyhedron",
    "CoupledProblem",
    "ReportedProblem",
    "AgentView",
    "CentralSolution",
    "assemble_problem",
    "convert_inequality_coupling",
    "SlackMap",
    "eval_cost",
    "residuals",
    "centralized_solve",
    "exclude_agent",
    "reconcile_dual",
    "stationarity_residual",
    "feasible_point",
]


@dataclass(frozen=True)
class QuadObjective:
    """f(x) = 1/2 x' sigma x + psi' x over the full stacked vector."""

    sigma: np.ndarray
    psi: np.ndarray

    def value(self, x: np.ndarray) -> float:
        return float(0.5 * x @ self.sigma @ x + self.psi @ x)

    def grad(self, x: np.ndarray) -> np.ndarray:
        return self.sigma @ x + self.psi


@dataclass(frozen=True)
class LocalPolyhedron:
    """Private feasible set {x_i : B x_i <= m}."""

    B: np.ndarray
    m: np.ndarray

    @property
    def n_rows(self) -> int:
        return self.B.shape[0]

    def contains(self, x_i: np.ndarray, tol: float = 1e-9) -> bool:
        if self.n_rows == 0:
            return True
        return bool(np.max(self.B @ x_i - self.m) <= tol)


@dataclass(frozen=True)
class CoupledProblem:
    dims: tuple[int, ...]
    A: tuple[np.ndarray, ...]
    d: np.ndarray
    local: tuple[LocalPolyhedron, ...]
    algorithmic: tuple[QuadObjective, ...]
    actual: tuple[QuadObjective, ...]

    @property
    def n_agents(self) -> int:
        return len(self.dims)

    @property
    def n_total(self) -> int:
        return int(sum(self.dims))

    @property
    def n_coupling(self) -> int:
        return int(self.d.shape[0])

    def block(self, i: int) -> slice:
        if not 0 <= i < self.n_agents:
            raise UnknownAgent(f"agent {i} of {self.n_agents}")
        off = int(np.sum(self.dims[:i]))
        return slice(off, off + self.dims[i])

    def stacked_A(self) -> np.ndarray:
        return np.hstack(self.A)

    def coupling_map(self, i: int) -> np.ndarray:
        """A_i zero-padded to the full vector (the tilde-A operator of agent i)."""
        out = np.zeros((self.n_coupling, self.n_total))
        out[:, self.block(i)] = self.A[i]
        return out

    def total_quadratic(self, which: str = "actual") -> tuple[np.ndarray, np.ndarray]:
        objs = self.actual if which == "actual" else self.algorithmic
        sigma = sum(o.sigma for o in objs)
        psi = sum(o.psi for o in objs)
        return np.asarray(sigma, float), np.asarray(psi, float)

    def total_value(self, x: np.ndarray, which: str = "actual") -> float:
        sigma, psi = self.total_quadratic(which)
        return float(0.5 * x @ sigma @ x + psi @ x)

    def local_stacked(self) -> tuple[np.ndarray, np.ndarray]:
        """Block-diagonal stack of all local inequality rows over the full vector."""
        rows = sum(p.n_rows for p in self.local)
        G = np.zeros((rows, self.n_total))
        u = np.zeros(rows)
        r = 0
        for i, poly in enumerate(self.local):
            k = poly.n_rows
            if k:
                G[r : r + k, self.block(i)] = poly.B
                u[r : r + k] = poly.m
            r += k
        return G, u


@dataclass(frozen=True)
class ReportedProblem:
    """A problem together with the version the agents reported.

    ``true`` and ``reported`` share dimensions, coupling, and local sets; they
    may differ in the objective coefficients.
    """

    true: CoupledProblem
    reported: CoupledProblem

    @classmethod
    def truthful(cls, problem: CoupledProblem) -> "ReportedProblem":
        return cls(true=problem, reported=problem)

    def pick(self, which: str) -> CoupledProblem:
        if which == "true":
            return self.true
        if which == "reported":
            return self.reported
        raise ValueError(f"which must be 'true' or 'reported', got {which!r}")


@dataclass(frozen=True)
class AgentView:
    """What agent i itself knows: its own objective, coupling block, and set."""

    index: int
    dim: int
    block: slice
    sigma: np.ndarray
    psi: np.ndarray
    A: np.ndarray
    local: LocalPolyhedron


def agent_view(problem: CoupledProblem, i: int) -> AgentView:
    blk = problem.block(i)
    obj = problem.algorithmic[i]
    return AgentView(index=i, dim=problem.dims[i], block=blk, sigma=obj.sigma, psi=obj.psi, A=problem.A[i], local=problem.local[i])


def _check_symmetric(sigma: np.ndarray, label: str) -> np.ndarray:
    sigma = np.asarray(sigma, float)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise DimensionMismatch(f"{label} is not square: {sigma.shape}")
    asym = float(np.max(np.abs(sigma - sigma.T))) if sigma.size else 0.0
    if asym > 1e-9 * max(1.0, float(np.max(np.abs(sigma))) if sigma.size else 1.0):
        raise DimensionMismatch(f"{label} is not symmetric (asymmetry {asym:.2e})")
    return (sigma + sigma.T) / 2.0


def assemble_problem(agents, A, d, actual=None, validate: str = "basic") -> CoupledProblem:
    """Build and validate a coupled problem.

    ``agents`` is a list of (sigma_i, psi_i, B_i, m_i) with the quadratics over
    the full stacked vector; ``A`` the list of coupling blocks, ``d`` the
    target. ``actual``, when given, is a list of (sigma_i, psi_i) used for the
    mechanism-facing cost decomposition (defaults to the same objectives).
    ``validate="full"`` additionally proves each local set nonempty.
    """
    d = np.asarray(d, float).ravel()
    n0 = d.shape[0]
    A_list = [np.atleast_2d(np.asarray(a, float)) for a in A]
    if len(A_list) != len(agents):
        raise DimensionMismatch(f"{len(agents)} agents but {len(A_list)} coupling blocks")
    dims = tuple(a.shape[1] for a in A_list)
    n = sum(dims)

    algorithmic = []
    local = []
    for i, (sigma, psi, B, m) in enumerate(agents):
        sigma = _check_symmetric(sigma, f"sigma[{i}]")
        psi = np.asarray(psi, float).ravel()
        if sigma.shape != (n, n) or psi.shape != (n,):
            raise DimensionMismatch(f"objective of agent {i} has shape {sigma.shape}/{psi.shape}, expected n={n}")
        if A_list[i].shape != (n0, dims[i]):
            raise DimensionMismatch(f"A[{i}] shape {A_list[i].shape}, expected ({n0},{dims[i]})")
        B = np.zeros((0, dims[i])) if B is None else np.atleast_2d(np.asarray(B, float))
        m = np.zeros(0) if m is None else np.asarray(m, float).ravel()
        if B.shape != (m.shape[0], dims[i]):
            raise DimensionMismatch(f"local rows of agent {i}: B {B.shape} vs m {m.shape}")
        algorithmic.append(QuadObjective(sigma=sigma, psi=psi))
        local.append(LocalPolyhedron(B=B, m=m))

    if actual is None:
        actual_objs = tuple(algorithmic)
    else:
        actual_objs = tuple(QuadObjective(sigma=_check_symmetric(s, "actual sigma"), psi=np.asarray(p, float).ravel()) for s, p in actual)
        for o in actual_objs:
            if o.sigma.shape != (n, n) or o.psi.shape != (n,):
                raise DimensionMismatch("actual objective dimension mismatch")

    problem = CoupledProblem(
        dims=dims,
        A=tuple(A_list),
        d=d,
        local=tuple(local),
        algorithmic=tuple(algorithmic),
        actual=actual_objs,
    )

    sigma_total, _ = problem.total_quadratic("algorithmic")
    if n:
        eigmin = float(np.linalg.eigvalsh(sigma_total).min())
        if eigmin < -1e-8 * max(1.0, float(np.max(np.abs(sigma_total)))):
            raise NonConvexObjective(f"summed Hessian has eigenvalue {eigmin:.3e}")

    if validate == "full":
        for i, poly in enumerate(problem.local):
            try:
                feasible_point(poly)
            except Infeasible as exc:
                raise EmptyLocalSet(f"agent {i} local set is empty") from exc
    return problem


def feasible_point(poly: LocalPolyhedron) -> np.ndarray:
    """Minimum-norm point of {x : Bx <= m}; raises ``Infeasible`` if empty."""
    n = poly.B.shape[1]
    if poly.n_rows == 0:
        return np.zeros(n)
    x0 = np.zeros(n)
    if poly.contains(x0):
        return x0
    sol = solve_qp(QpSpec(P=np.eye(n), q=np.zeros(n), G=poly.B, u=poly.m), tol=1e-9)
    if not sol.optimal:
        raise Infeasible("could not certify local set nonempty")
    return sol.x


@dataclass(frozen=True)
class SlackMap:
    """Coordinate bookkeeping for the inequality-to-equality conversion."""

    original_dims: tuple[int, ...]
    new_dims: tuple[int, ...]

    def strip(self, x: np.ndarray) -> np.ndarray:
        """Drop the slack coordinates from a stacked solution of the converted problem."""
        parts = []
        off = 0
        for orig, new in zip(self.original_dims, self.new_dims):
            parts.append(x[off : off + orig])
            off += new
        return np.concatenate(parts)


def convert_inequality_coupling(problem: CoupledProblem) -> tuple[CoupledProblem, SlackMap]:
    """Reinterpret the coupling of ``problem`` as sum_i A_i x_i <= d and return
    the equivalent equality-coupled problem.

    Each agent's block is extended with a nonnegative slack vector s_i (one per
    coupling row) so that sum_i (A_i x_i + s_i) = d. Objectives are zero on the
    slacks, so optimal x parts coincide with the inequality problem's optimum;
    the split of total slack across agents is not unique and carries no cost.
    """
    n0 = problem.n_coupling
    new_dims = tuple(ni + n0 for ni in problem.dims)
    n_new = sum(new_dims)

    def lift_index(i: int) -> tuple[slice, slice]:
        off = int(np.sum(new_dims[:i]))
        return slice(off, off + problem.dims[i]), slice(off + problem.dims[i], off + new_dims[i])

    def lift_quad(obj: QuadObjective) -> QuadObjective:
        sigma = np.zeros((n_new, n_new))
        psi = np.zeros(n_new)
        for i in range(problem.n_agents):
            xi, _ = lift_index(i)
            bi = problem.block(i)
            psi[xi] = obj.psi[bi]
            for j in range(problem.n_agents):
                xj, _ = lift_index(j)
                bj = problem.block(j)
                sigma[xi, xj] = obj.sigma[bi, bj]
        return QuadObjective(sigma=sigma, psi=psi)

    agents = []
    A_new = []
    for i in range(problem.n_agents):
        ni = problem.dims[i]
        poly = problem.local[i]
        B = np.zeros((poly.n_rows + n0, ni + n0))
        m = np.zeros(poly.n_rows + n0)
        if poly.n_rows:
            B[: poly.n_rows, :ni] = poly.B
            m[: poly.n_rows] = poly.m
        B[poly.n_rows :, ni:] = -np.eye(n0)  # s_i >= 0
        agents.append((B, m))
        A_new.append(np.hstack([problem.A[i], np.eye(n0)]))

    lifted_alg = tuple(lift_quad(o) for o in problem.algorithmic)
    lifted_act = tuple(lift_quad(o) for o in problem.actual)
    converted = assemble_problem(
        agents=[(lifted_alg[i].sigma, lifted_alg[i].psi, agents[i][0], agents[i][1]) for i in range(problem.n_agents)],
        A=A_new,
        d=problem.d,
        actual=[(o.sigma, o.psi) for o in lifted_act],
    )
    return converted, SlackMap(original_dims=problem.dims, new_dims=new_dims)


def _resolve(problem, which: str) -> CoupledProblem:
    if isinstance(problem, ReportedProblem):
        return problem.pick(which)
    return problem


def eval_cost(problem, i: int, x: np.ndarray, which: str = "true") -> float:
    """Agent i's own (``actual`` decomposition) cost at the stacked point x."""
    p = _resolve(problem, which)
    if not 0 <= i < p.n_agents:
        raise UnknownAgent(f"agent {i} of {p.n_agents}")
    x = np.asarray(x, float).ravel()
    if x.shape[0] != p.n_total:
        raise DimensionMismatch(f"x has length {x.shape[0]}, expected {p.n_total}")
    return p.actual[i].value(x)


def residuals(problem, x: np.ndarray, which: str = "true") -> tuple[float, float]:
    """(coupling residual ||sum A_i x_i - d||, worst local-constraint violation)."""
    p = _resolve(problem, which)
    x = np.asarray(x, float).ravel()
    coupled = float(np.linalg.norm(p.stacked_A() @ x - p.d))
    worst = 0.0
    for i, poly in enumerate(p.local):
        if poly.n_rows:
            worst = max(worst, float(np.max(np.maximum(poly.B @ x[p.block(i)] - poly.m, 0.0))))
    return coupled, worst


@dataclass(frozen=True)
class CentralSolution:
    """Primal/dual optimum of the coupled problem.

    ``lam`` follows the convention  grad f(x*) = A' lam - B_active' alpha,
    i.e. the gradient of the total cost equals A' lam minus the active local
    rows weighted by alpha >= 0.
    """

    x: np.ndarray
    lam: np.ndarray
    alpha: np.ndarray
    value: float


def centralized_solve(problem, which: str = "true", tol: float = 1e-9, max_iter: int = 200000) -> CentralSolution:
    p = _resolve(problem, which)
    sigma, psi = p.total_quadratic("actual")
    G, u = p.local_stacked()
    spec = QpSpec(P=sigma, q=psi, E=p.stacked_A(), h=p.d, G=G if G.shape[0] else None, u=u if u.shape[0] else None)
    sol = solve_qp(spec, tol=tol, max_iter=max_iter)
    if sol.status == "max_iter":
        raise MaxIterReached(f"centralized solve stopped at residuals {sol.residuals}")
    lam = -sol.lam  # flip from the Px+q+E'lam+G'alpha=0 convention
    return CentralSolution(x=sol.x, lam=lam, alpha=sol.alpha, value=p.total_value(sol.x, "actual"))


def exclude_agent(problem, i: int):
    """The same market without agent i: its block is removed (fixed at zero).

    Works on ``CoupledProblem`` and ``ReportedProblem`` alike.
    """
    if isinstance(problem, ReportedProblem):
        return ReportedProblem(true=exclude_agent(problem.true, i), reported=exclude_agent(problem.reported, i))
    p: CoupledProblem = problem
    if not 0 <= i < p.n_agents:
        raise UnknownAgent(f"agent {i} of {p.n_agents}")
    keep = [j for j in range(p.n_agents) if j != i]
    keep_idx = np.concatenate([np.arange(p.block(j).start, p.block(j).stop) for j in keep]) if keep else np.zeros(0, dtype=int)

    def restrict(obj: QuadObjective) -> QuadObjective:
        return QuadObjective(sigma=obj.sigma[np.ix_(keep_idx, keep_idx)], psi=obj.psi[keep_idx])

    return CoupledProblem(
        dims=tuple(p.dims[j] for j in keep),
        A=tuple(p.A[j] for j in keep),
        d=p.d,
        local=tuple(p.local[j] for j in keep),
        algorithmic=tuple(restrict(p.algorithmic[j]) for j in keep),
        actual=tuple(restrict(p.actual[j]) for j in keep),
    )


def stationarity_residual(grad: np.ndarray, free_cols: np.ndarray | None, nonneg_cols: np.ndarray | None) -> float:
    """min over (mu free, alpha >= 0) of || grad + free_cols @ mu + nonneg_cols @ alpha ||_2.

    Used to test whether a gradient is a conic combination of constraint
    normals — the certificate behind both dual-sign reconciliation and
    best-response optimality checks.
    """
    g = np.asarray(grad, float).ravel()
    F = None if free_cols is None or free_cols.size == 0 else np.atleast_2d(np.asarray(free_cols, float))
    C = None if nonneg_cols is None or nonneg_cols.size == 0 else np.atleast_2d(np.asarray(nonneg_cols, float))
    if F is not None:
        # Project out the span of the free columns.
        Q, _ = np.linalg.qr(F)
        proj = lambda v: v - Q @ (Q.T @ v)
        g = proj(g)
        C = None if C is None else np.column_stack([proj(c) for c in C.T])
    if C is None or C.size == 0:
        return float(np.linalg.norm(g))
    _, resid = scipy.optimize.nnls(C, -g)
    return float(resid)


def reconcile_dual(problem, x: np.ndarray, lam: np.ndarray, which: str = "reported", tol: float = 1e-5) -> np.ndarray:
    """Map a coupling dual of unknown sign convention onto the convention of
    ``centralized_solve`` (grad f = A' lam - B_active' alpha, alpha >= 0).

    Tries both signs and keeps the one whose stationarity residual at x passes;
    raises ``ConventionMismatch`` when neither does.
    """
    p = _resolve(problem, which)
    x = np.asarray(x, float).ravel()
    lam = np.asarray(lam, float).ravel()
    sigma, psi = p.total_quadratic("actual")
    grad = sigma @ x + psi
    At = p.stacked_A().T

    act_cols = []
    for i, poly in enumerate(p.local):
        if poly.n_rows == 0:
            continue
        s = poly.m - poly.B @ x[p.block(i)]
        for r in np.flatnonzero(s <= 1e-6 * max(1.0, float(np.max(np.abs(poly.m))) if poly.m.size else 1.0)):
            col = np.zeros(p.n_total)
            col[p.block(i)] = poly.B[r]
            act_cols.append(col)
    act = np.column_stack(act_cols) if act_cols else None

    scores = {}
    for s in (1.0, -1.0):
        # grad - A'(s lam) must be -B_act' alpha with alpha >= 0.
        scores[s] = stationarity_residual(grad - At @ (s * lam), None, act)
    scale = max(1.0, float(np.max(np.abs(grad))))
    best = min(scores, key=scores.get)
    if scores[best] > tol * scale:
        raise ConventionMismatch(f"stationarity residuals {scores} exceed tolerance {tol * scale:.2e}")
    return best * lam
