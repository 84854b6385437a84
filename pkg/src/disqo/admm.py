"""Distributed consensus–tracking ADMM for coupled quadratic problems.

Each agent keeps a full-dimension copy ``y_i`` of the decision vector, a dual
estimate ``lam_i`` and a tracking estimate ``eta_i`` for the coupling rows,
and a consensus anchor ``v_i``. One iteration is bulk-synchronous:

1. exchange round — every agent mixes its neighbors' (eta, lam) through the
   symmetric doubly stochastic weight matrix: gamma_i = sum_s w_is eta_s,
   l_i = sum_s w_is lam_s (self weight included);
2. local subproblem — agent i minimizes, over its own constraint set,
   f_i(y) + (rho/2) deg_i ||y - v_i||^2 + l_i' A~_i y
   + (sigma/2) ||A~_i y - A~_i y_i + gamma_i||^2,
   where A~_i is its coupling block zero-padded to the full vector;
3. recursion updates — eta_i += own coupling move, lam_i = l_i + sigma*eta_i,
   delta_i = y_i(new) - y_i(old)/2;
4. second exchange — v_i += mean of neighbors' delta minus y_i(old)/2.

Two exact identities hold at every iteration and are enforced at 1e-10:
the tracking identity N*mean(eta) = sum_i A~_i y_i - d, and the mean-dual
recursion mean(lam)(k+1) = mean(lam)(k) + sigma*mean(eta)(k+1).

The accelerated mode solves each subproblem in the agent's own block only:
the rest of the copy is unconstrained, so it is eliminated by partial
minimization (a Schur complement), which shrinks the per-iteration QP from
the full dimension to the block dimension while producing the same iterates.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import DimensionMismatch, InfeasibleInitialPoint
from .graphs import CommGraph, metropolis_weights
from .problem import CoupledProblem, feasible_point
from .qp import RepeatedQp

__all__ = [
    "SolverParams",
    "AgentState",
    "IterTrace",
    "SolverState",
    "SolveResult",
    "init_state",
    "communication_round_tracking",
    "subproblem",
    "accelerated_subproblem",
    "iterate",
    "metrics",
    "solve",
]

_IDENTITY_TOL = 1e-10


@dataclass(frozen=True)
class SolverParams:
    sigma: float = 1.0
    rho: float = 1.0
    max_iter: int = 2000
    violation_tol: float = 1e-6
    step_tol: float = 1e-6
    rel_error_tol: float | None = None
    mode: str = "plain"
    subproblem_tol: float = 1e-10

    def __post_init__(self):
        if self.sigma <= 0 or self.rho <= 0:
            raise DimensionMismatch("sigma and rho must be strictly positive")
        if self.max_iter < 1:
            raise DimensionMismatch("max_iter must be at least 1")
        if self.violation_tol < 0 or self.step_tol < 0:
            raise DimensionMismatch("tolerances must be nonnegative")
        if self.mode not in ("plain", "accelerated"):
            raise DimensionMismatch(f"mode must be 'plain' or 'accelerated', got {self.mode!r}")


@dataclass(frozen=True)
class AgentState:
    """Snapshot of one agent's variables (copies, safe to mutate)."""

    index: int
    y: np.ndarray
    lam: np.ndarray
    eta: np.ndarray
    v: np.ndarray
    gamma: np.ndarray | None
    l: np.ndarray | None
    delta: np.ndarray | None


@dataclass
class IterTrace:
    """Per-iteration convergence record with a stable CSV layout."""

    n_coupling: int
    iters: list[int] = field(default_factory=list)
    rel_error: list[float] = field(default_factory=list)
    violation: list[float] = field(default_factory=list)
    eps1_norm: list[float] = field(default_factory=list)
    eps2_norm: list[float] = field(default_factory=list)
    lambda_bar: list[np.ndarray] = field(default_factory=list)
    wall_ms: list[float] = field(default_factory=list)

    def append(self, it, rel, viol, e1, e2, lbar, wall):
        self.iters.append(int(it))
        self.rel_error.append(float(rel))
        self.violation.append(float(viol))
        self.eps1_norm.append(float(e1))
        self.eps2_norm.append(float(e2))
        self.lambda_bar.append(np.array(lbar, float))
        self.wall_ms.append(float(wall))

    def __len__(self) -> int:
        return len(self.iters)

    def header(self) -> list[str]:
        lam_cols = [f"lambda_bar_{j}" for j in range(self.n_coupling)]
        return ["iter", "rel_error", "violation", "eps1_norm", "eps2_norm", *lam_cols, "wall_ms"]

    def rows(self):
        for idx in range(len(self.iters)):
            yield [
                self.iters[idx],
                self.rel_error[idx],
                self.violation[idx],
                self.eps1_norm[idx],
                self.eps2_norm[idx],
                *self.lambda_bar[idx].tolist(),
                self.wall_ms[idx],
            ]

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(",".join(self.header()) + "\n")
            for row in self.rows():
                fh.write(",".join(_fmt(v) for v in row) + "\n")


def _fmt(v) -> str:
    if isinstance(v, int):
        return str(v)
    return format(float(v), ".17g")


class _AcceleratedCache:
    """Per-agent reduction of the subproblem to the agent's own block.

    The subproblem Hessian P never changes, so its partition into the own
    block (w) and the rest (z) is factored once: with S = P,
    reduced Hessian  Phi = S_ww - S_wz S_zz^-1 S_zw  and, per iteration,
    reduced linear   Psi = q_w - S_wz S_zz^-1 q_z,
    then z = -S_zz^-1 (S_zw w + q_z).
    """

    def __init__(self, P: np.ndarray, blk: slice, B, m, tol: float):
        n = P.shape[0]
        self.blk = blk
        self.rest = np.array([j for j in range(n) if not (blk.start <= j < blk.stop)], dtype=int)
        own = np.arange(blk.start, blk.stop)
        S_ww = P[np.ix_(own, own)]
        if self.rest.size:
            self.S_wz = P[np.ix_(own, self.rest)]
            S_zz = P[np.ix_(self.rest, self.rest)]
            self.cho = scipy.linalg.cho_factor(S_zz)
            phi = S_ww - self.S_wz @ scipy.linalg.cho_solve(self.cho, self.S_wz.T)
        else:
            self.S_wz = np.zeros((own.size, 0))
            self.cho = None
            phi = S_ww
        phi = (phi + phi.T) / 2.0
        self.qp = RepeatedQp(phi, G=B, u=m, tol=tol)

    def solve(self, q_w: np.ndarray, q_z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self.cho is not None:
            psi = q_w - self.S_wz @ scipy.linalg.cho_solve(self.cho, q_z)
        else:
            psi = q_w
        w = self.qp.solve(psi).x
        if self.cho is not None:
            z = -scipy.linalg.cho_solve(self.cho, self.S_wz.T @ w + q_z)
        else:
            z = np.zeros(0)
        return w, z


@dataclass
class SolverState:
    problem: CoupledProblem
    graph: CommGraph
    params: SolverParams
    W: np.ndarray
    degrees: np.ndarray
    Y: np.ndarray  # (N, n) full copies
    Y_prev: np.ndarray
    H: np.ndarray  # (N, n0) tracking estimates
    Lam: np.ndarray  # (N, n0) dual estimates
    V: np.ndarray  # (N, n) consensus anchors
    k: int = 0
    Gamma: np.ndarray | None = None
    Lmix: np.ndarray | None = None
    Delta: np.ndarray | None = None
    _plain: list = field(default_factory=list, repr=False)
    _accel: list = field(default_factory=list, repr=False)

    @property
    def n_agents(self) -> int:
        return self.problem.n_agents

    def agent(self, i: int) -> AgentState:
        return AgentState(
            index=i,
            y=np.array(self.Y[i]),
            lam=np.array(self.Lam[i]),
            eta=np.array(self.H[i]),
            v=np.array(self.V[i]),
            gamma=None if self.Gamma is None else np.array(self.Gamma[i]),
            l=None if self.Lmix is None else np.array(self.Lmix[i]),
            delta=None if self.Delta is None else np.array(self.Delta[i]),
        )

    def coupling_values(self) -> np.ndarray:
        """sum_i A~_i y_i over the agents' own copies."""
        total = np.zeros(self.problem.n_coupling)
        for i in range(self.n_agents):
            blk = self.problem.block(i)
            total += self.problem.A[i] @ self.Y[i, blk]
        return total

    def own_block_x(self) -> np.ndarray:
        x = np.empty(self.problem.n_total)
        for i in range(self.n_agents):
            blk = self.problem.block(i)
            x[blk] = self.Y[i, blk]
        return x

    def average_x(self) -> np.ndarray:
        return self.Y.mean(axis=0)


def init_state(problem: CoupledProblem, graph: CommGraph, params: SolverParams, y0=None) -> SolverState:
    """Initial state: lam = 0, eta_i = A~_i y_i - d/N, v_i the average of the
    edge midpoints at agent i. Default start is y_i = 0 when feasible for the
    agent's own set, else a minimum-norm feasible point on the own block."""
    if graph.n_agents != problem.n_agents:
        raise DimensionMismatch(f"graph has {graph.n_agents} agents, problem has {problem.n_agents}")
    N, n = problem.n_agents, problem.n_total
    Y = np.zeros((N, n))
    for i in range(N):
        poly = problem.local[i]
        blk = problem.block(i)
        if y0 is not None:
            yi = np.asarray(y0[i], float).ravel()
            if yi.shape != (n,):
                raise DimensionMismatch(f"y0[{i}] has shape {yi.shape}, expected ({n},)")
            gap = poly.B @ yi[blk] - poly.m if poly.n_rows else np.zeros(0)
            if gap.size and float(gap.max()) > 1e-9 * max(1.0, float(np.abs(poly.m).max())):
                raise InfeasibleInitialPoint(f"y0[{i}] violates the local rows by {float(gap.max()):.2e}")
            Y[i] = yi
        else:
            if poly.n_rows == 0 or float(np.max(-poly.m)) <= 0.0:
                pass  # origin feasible
            else:
                Y[i, blk] = feasible_point(poly)

    H = np.empty((N, problem.n_coupling))
    for i in range(N):
        blk = problem.block(i)
        H[i] = problem.A[i] @ Y[i, blk] - problem.d / N

    V = np.zeros((N, n))
    deg = graph.degrees.astype(float)
    for i, j in sorted(graph.edges):
        mid = 0.5 * (Y[i] + Y[j])
        V[i] += mid
        V[j] += mid
    for i in range(N):
        if deg[i] > 0:
            V[i] /= deg[i]
        else:
            V[i] = Y[i]

    state = SolverState(
        problem=problem,
        graph=graph,
        params=params,
        W=metropolis_weights(graph),
        degrees=deg,
        Y=Y,
        Y_prev=np.array(Y),
        H=H,
        Lam=np.zeros((N, problem.n_coupling)),
        V=V,
    )
    _build_subproblem_caches(state)
    _check_tracking_identity(state)
    return state


def _build_subproblem_caches(state: SolverState) -> None:
    p, params = state.problem, state.params
    for i in range(p.n_agents):
        blk = p.block(i)
        P = np.array(p.algorithmic[i].sigma)
        P[np.diag_indices_from(P)] += params.rho * state.degrees[i]
        P[blk, blk] += params.sigma * (p.A[i].T @ p.A[i])
        P = (P + P.T) / 2.0
        poly = p.local[i]
        B = poly.B if poly.n_rows else None
        m = poly.m if poly.n_rows else None
        if params.mode == "accelerated":
            state._accel.append(_AcceleratedCache(P, blk, B, m, params.subproblem_tol))
            state._plain.append(None)
        else:
            G = None
            if poly.n_rows:
                G = np.zeros((poly.n_rows, p.n_total))
                G[:, blk] = poly.B
            state._plain.append(RepeatedQp(P, G=G, u=m, tol=params.subproblem_tol))
            state._accel.append(None)


def communication_round_tracking(eta: np.ndarray, lam: np.ndarray, W: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mix tracking and dual estimates through the weight matrix: row i of the
    results is agent i's aggregate including its self weight."""
    return W @ eta, W @ lam


def _linear_term(state: SolverState, i: int, gamma_i: np.ndarray, l_i: np.ndarray) -> np.ndarray:
    p, params = state.problem, state.params
    blk = p.block(i)
    q = np.array(p.algorithmic[i].psi)
    q -= params.rho * state.degrees[i] * state.V[i]
    own_coupling = p.A[i] @ state.Y[i, blk]
    q[blk] += p.A[i].T @ (l_i + params.sigma * (gamma_i - own_coupling))
    return q


def subproblem(state: SolverState, i: int, gamma_i: np.ndarray, l_i: np.ndarray) -> np.ndarray:
    """Plain full-dimension subproblem solve for agent i."""
    if state._plain[i] is None:
        w, z, y = accelerated_subproblem(state, i, gamma_i, l_i)
        return y
    q = _linear_term(state, i, gamma_i, l_i)
    return state._plain[i].solve(q).x


def accelerated_subproblem(state: SolverState, i: int, gamma_i: np.ndarray, l_i: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Block-reduced subproblem: returns (own block w, eliminated rest z,
    reassembled full copy y)."""
    cache = state._accel[i]
    if cache is None:
        p, params = state.problem, state.params
        blk = p.block(i)
        poly = p.local[i]
        cache = _AcceleratedCache(
            _plain_hessian(state, i), blk, poly.B if poly.n_rows else None, poly.m if poly.n_rows else None, params.subproblem_tol
        )
        state._accel[i] = cache
    q = _linear_term(state, i, gamma_i, l_i)
    blk = state.problem.block(i)
    w, z = cache.solve(q[blk], q[cache.rest])
    y = np.empty(state.problem.n_total)
    y[blk] = w
    y[cache.rest] = z
    return w, z, y


def _plain_hessian(state: SolverState, i: int) -> np.ndarray:
    p, params = state.problem, state.params
    blk = p.block(i)
    P = np.array(p.algorithmic[i].sigma)
    P[np.diag_indices_from(P)] += params.rho * state.degrees[i]
    P[blk, blk] += params.sigma * (p.A[i].T @ p.A[i])
    return (P + P.T) / 2.0


def _check_tracking_identity(state: SolverState) -> None:
    lhs = state.n_agents * state.H.mean(axis=0)
    rhs = state.coupling_values() - state.problem.d
    res = float(np.max(np.abs(lhs - rhs))) if lhs.size else 0.0
    if res > _IDENTITY_TOL:
        raise AssertionError(f"tracking identity violated by {res:.3e} at iteration {state.k}")


def iterate(state: SolverState) -> None:
    """Advance the state by one synchronous round (two exchanges), enforcing
    the tracking identity and the mean-dual recursion at 1e-10."""
    p, params = state.problem, state.params
    N = state.n_agents

    gamma_all, l_all = communication_round_tracking(state.H, state.Lam, state.W)
    state.Gamma, state.Lmix = gamma_all, l_all

    Y_new = np.empty_like(state.Y)
    for i in range(N):
        if params.mode == "accelerated":
            _, _, Y_new[i] = accelerated_subproblem(state, i, gamma_all[i], l_all[i])
        else:
            Y_new[i] = subproblem(state, i, gamma_all[i], l_all[i])

    H_new = np.empty_like(state.H)
    for i in range(N):
        blk = p.block(i)
        H_new[i] = gamma_all[i] + p.A[i] @ (Y_new[i, blk] - state.Y[i, blk])
    lam_old_mean = state.Lam.mean(axis=0)
    Lam_new = l_all + params.sigma * H_new

    Delta = Y_new - 0.5 * state.Y
    V_new = np.array(state.V)
    for i in range(N):
        if state.degrees[i] > 0:
            acc = np.zeros(p.n_total)
            for j in state.graph.neighbors(i):
                acc += Delta[j]
            V_new[i] += acc / state.degrees[i] - 0.5 * state.Y[i]

    state.Y_prev = state.Y
    state.Y, state.H, state.Lam, state.V, state.Delta = Y_new, H_new, Lam_new, V_new, Delta
    state.k += 1

    _check_tracking_identity(state)
    dual_res = float(np.max(np.abs(state.Lam.mean(axis=0) - (lam_old_mean + params.sigma * state.H.mean(axis=0)))))
    if dual_res > _IDENTITY_TOL:
        raise AssertionError(f"mean-dual recursion violated by {dual_res:.3e} at iteration {state.k}")


def metrics(state: SolverState, reference_value: float | None = None) -> dict:
    """Convergence metrics of the current state.

    violation = ||sum_i A~_i y_i - d||_2 + sum over ordered pairs i != j of
    ||y_i - y_j||_2; rel_error = |sum_i f_i(y_i) - f*| / |f*| when a reference
    objective value f* is supplied (NaN otherwise); eps1/eps2 are the norms of
    the tracking and dual disagreement with their means.
    """
    p = state.problem
    N = state.n_agents
    coupling_gap = float(np.linalg.norm(state.coupling_values() - p.d))
    consensus_gap = 0.0
    for i in range(N):
        for j in range(N):
            if i != j:
                consensus_gap += float(np.linalg.norm(state.Y[i] - state.Y[j]))
    violation = coupling_gap + consensus_gap

    if reference_value is None:
        rel = float("nan")
    else:
        total = sum(p.algorithmic[i].value(state.Y[i]) for i in range(N))
        rel = abs(total - reference_value) / abs(reference_value)

    eps1 = float(np.linalg.norm(state.H - state.H.mean(axis=0)))
    eps2 = float(np.linalg.norm(state.Lam - state.Lam.mean(axis=0)))
    return {
        "iter": state.k,
        "rel_error": rel,
        "violation": violation,
        "eps1_norm": eps1,
        "eps2_norm": eps2,
        "lambda_bar": state.Lam.mean(axis=0),
    }


@dataclass
class SolveResult:
    x: np.ndarray  # each agent's own block taken from its own copy
    lam: np.ndarray  # (N, n0) final per-agent dual estimates
    trace: IterTrace
    converged: bool
    iterations: int
    consensus_x: np.ndarray  # average of all copies (diagnostic)
    state: SolverState

    @property
    def lambda_bar(self) -> np.ndarray:
        return self.lam.mean(axis=0)


def solve(
    problem: CoupledProblem,
    graph: CommGraph,
    params: SolverParams | None = None,
    y0=None,
    reference_value: float | None = None,
) -> SolveResult:
    """Run the distributed iteration to the stopping rule: both the violation
    metric <= violation_tol and the max-norm iterate change <= step_tol (plus
    rel_error <= rel_error_tol when both a reference value and that tolerance
    are given). Hitting max_iter returns the trace flagged unconverged."""
    params = params or SolverParams()
    state = init_state(problem, graph, params, y0=y0)
    trace = IterTrace(n_coupling=problem.n_coupling)
    row = metrics(state, reference_value)
    trace.append(row["iter"], row["rel_error"], row["violation"], row["eps1_norm"], row["eps2_norm"], row["lambda_bar"], 0.0)

    converged = False
    for _ in range(params.max_iter):
        t0 = time.perf_counter()
        iterate(state)
        wall = (time.perf_counter() - t0) * 1e3
        row = metrics(state, reference_value)
        trace.append(row["iter"], row["rel_error"], row["violation"], row["eps1_norm"], row["eps2_norm"], row["lambda_bar"], wall)
        step = float(np.max(np.abs(state.Y - state.Y_prev)))
        ok = row["violation"] <= params.violation_tol and step <= params.step_tol
        if ok and params.rel_error_tol is not None and reference_value is not None:
            ok = row["rel_error"] <= params.rel_error_tol
        if ok:
            converged = True
            break

    return SolveResult(
        x=state.own_block_x(),
        lam=np.array(state.Lam),
        trace=trace,
        converged=converged,
        iterations=state.k,
        consensus_x=state.average_x(),
        state=state,
    )
