"""Incentive payments on top of solved coupled problems.

Two mechanisms are provided. Shadow pricing pays each agent a per-unit price
vector built from the coupling dual and the congestion externality its flow
imposes on everyone else; the administrator computes it from one solve. The
VCG payment is a lump sum equal to the cost the rest of the market saves by
agent i's presence; it needs one solve per agent plus one with everyone.

Conventions: mechanisms only ever see *reported* objectives — prices,
allocations, and payments are computed from reports, while net costs evaluate
each agent's *true* objective at the implemented allocation (a reported-cost
evaluation mode exists for comparison). Net cost is u_i = cost_i - payment_i;
benefit is its negation, so individually rational outcomes have u_i <= 0 and
benefit >= 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConventionMismatch, Infeasible, InfeasibleWithoutAgent
from .problem import (
    CentralSolution,
    CoupledProblem,
    ReportedProblem,
    centralized_solve,
    eval_cost,
    exclude_agent,
    reconcile_dual,
    stationarity_residual,
)

__all__ = [
    "MechanismOutcome",
    "shadow_prices",
    "sp_outcome",
    "sp_for_problem",
    "sp_equilibrium_check",
    "vcg_payments",
    "vcg_ic_check",
    "ICReport",
    "misreport_sweep",
    "misreport_portfolio",
    "SweepResult",
    "PortfolioResult",
    "payments_csv",
]


def _pick(problem, which: str) -> CoupledProblem:
    return problem.pick(which) if isinstance(problem, ReportedProblem) else problem


@dataclass(frozen=True)
class MechanismOutcome:
    mechanism: str  # "ShadowPricing" or "VCG"
    x: np.ndarray
    prices: tuple[np.ndarray, ...] | None  # per-agent unit prices (shadow pricing only)
    payments: np.ndarray  # per-agent transfer: prices . x_i, or the VCG lump sum
    costs: np.ndarray  # per-agent cost of the implemented allocation
    net_costs: np.ndarray  # costs - payments (u_i)
    benefits: np.ndarray  # payments - costs
    cost_basis: str  # "true" or "reported" evaluation of the costs column

    @property
    def total_payout(self) -> float:
        return float(self.payments.sum())

    @property
    def n_agents(self) -> int:
        return int(self.payments.shape[0])


# ---------------------------------------------------------------------------
# Shadow pricing


def shadow_prices(problem, x: np.ndarray, lam: np.ndarray, which: str = "reported") -> tuple[np.ndarray, ...]:
    """Per-agent unit price vectors pi_i = A_i' lam - sum_{s != i} grad_i f_s(x).

    The gradients use the (reported) interaction objectives, so the price both
    relays the coupling dual and charges each agent the marginal cost its flow
    imposes on the others. ``lam`` must be in the convention of
    ``centralized_solve`` (grad f = A' lam on free directions); a stationarity
    check enforces that and raises ``ConventionMismatch`` otherwise.
    """
    p = _pick(problem, which)
    x = np.asarray(x, float).ravel()
    lam = np.asarray(lam, float).ravel()
    fixed = reconcile_dual(p, x, lam)
    if float(np.max(np.abs(fixed - lam))) > 1e-12 * max(1.0, float(np.max(np.abs(lam)))):
        raise ConventionMismatch("coupling dual appears to be in the mirrored sign convention; reconcile it first")

    sigma_tot, psi_tot = p.total_quadratic("actual")
    grad_tot = sigma_tot @ x + psi_tot
    prices = []
    for i in range(p.n_agents):
        blk = p.block(i)
        own = p.actual[i]
        grad_own = (own.sigma @ x + own.psi)[blk]
        cross = grad_tot[blk] - grad_own
        prices.append(p.A[i].T @ lam - cross)
    return tuple(prices)


def sp_outcome(problem, x: np.ndarray, prices, cost_basis: str = "true") -> MechanismOutcome:
    """Settlement under shadow pricing: each agent is paid prices_i . x_i and
    bears its own cost at the implemented allocation."""
    p_true = _pick(problem, cost_basis)
    x = np.asarray(x, float).ravel()
    n = p_true.n_agents
    payments = np.empty(n)
    costs = np.empty(n)
    for i in range(n):
        blk = p_true.block(i)
        payments[i] = float(prices[i] @ x[blk])
        costs[i] = eval_cost(problem, i, x, which=cost_basis)
    net = costs - payments
    return MechanismOutcome(
        mechanism="ShadowPricing",
        x=x,
        prices=tuple(np.array(v) for v in prices),
        payments=payments,
        costs=costs,
        net_costs=net,
        benefits=-net,
        cost_basis=cost_basis,
    )


def sp_for_problem(problem, cost_basis: str = "true", solution: CentralSolution | None = None) -> MechanismOutcome:
    """Solve (reported), price, and settle in one step."""
    sol = solution or centralized_solve(problem, which="reported")
    prices = shadow_prices(problem, sol.x, sol.lam)
    return sp_outcome(problem, sol.x, prices, cost_basis=cost_basis)


def sp_equilibrium_check(problem, x: np.ndarray, prices, tol: float = 1e-6) -> np.ndarray:
    """Best-response optimality residuals at x under the given prices.

    Agent i's game problem is: minimize f_i(x_i, x_-i) - prices_i . x_i over
    its local set and the coupling rows, with everyone else frozen. The
    returned entry i is the KKT stationarity residual of that problem at x_i
    (distance of the reduced gradient from the cone of active normals).
    """
    p = _pick(problem, "reported")
    x = np.asarray(x, float).ravel()
    out = np.empty(p.n_agents)
    for i in range(p.n_agents):
        blk = p.block(i)
        own = p.actual[i]
        grad = (own.sigma @ x + own.psi)[blk] - np.asarray(prices[i], float)
        poly = p.local[i]
        act_cols = None
        if poly.n_rows:
            slack = poly.m - poly.B @ x[blk]
            active = np.flatnonzero(slack <= 1e-6 * max(1.0, float(np.max(np.abs(poly.m))) if poly.m.size else 1.0))
            if active.size:
                act_cols = poly.B[active].T
        out[i] = stationarity_residual(grad, p.A[i].T, act_cols)
    return out


# ---------------------------------------------------------------------------
# VCG


def _objective_value(problem, which: str, distributed=None) -> tuple[np.ndarray, float]:
    """(x, total reported cost) of the given problem, by the centralized
    oracle or, when ``distributed`` is given, by the consensus solver."""
    p = _pick(problem, which)
    if distributed is None:
        sol = centralized_solve(p)
        return sol.x, sol.value
    from . import admm
    from .graphs import build_graph, random_connected_graph

    graph, params = distributed
    if graph is None or graph.n_agents != p.n_agents:
        # drop-one solves have one agent fewer than the caller's graph
        graph = build_graph(1, []) if p.n_agents == 1 else random_connected_graph(p.n_agents, np.random.default_rng(0))
    res = admm.solve(p, graph, params)
    if not res.converged:
        raise Infeasible("distributed VCG solve did not converge")
    return res.x, p.total_value(res.x, "actual")


def vcg_payments(problem, cost_basis: str = "true", distributed=None) -> MechanismOutcome:
    """Lump-sum payments Pi_i = (optimal cost without i) - (everyone else's
    reported cost at the full optimum). Requires the market to stay feasible
    after removing any single agent; raises ``InfeasibleWithoutAgent`` if not.

    ``distributed`` may be a (graph, SolverParams) pair to run the N+1 solves
    with the consensus algorithm instead of the centralized oracle.
    """
    if not isinstance(problem, ReportedProblem):
        problem = ReportedProblem.truthful(problem)
    x_hat, total_hat = _objective_value(problem, "reported", distributed)
    n = problem.reported.n_agents
    payments = np.empty(n)
    costs = np.empty(n)
    for i in range(n):
        reduced = exclude_agent(problem, i)
        try:
            _, without_i = _objective_value(reduced, "reported", distributed)
        except Infeasible as exc:
            raise InfeasibleWithoutAgent(f"market infeasible without agent {i}") from exc
        others_at_hat = total_hat - eval_cost(problem, i, x_hat, which="reported")
        payments[i] = without_i - others_at_hat
        costs[i] = eval_cost(problem, i, x_hat, which=cost_basis)
    net = costs - payments
    return MechanismOutcome(
        mechanism="VCG",
        x=x_hat,
        prices=None,
        payments=payments,
        costs=costs,
        net_costs=net,
        benefits=-net,
        cost_basis=cost_basis,
    )


@dataclass(frozen=True)
class ICReport:
    """Truth-versus-fake comparison rows: (agent, net cost truthful, net cost
    under the fake report, margin = fake - truthful)."""

    rows: tuple[tuple[int, float, float, float], ...]
    tol: float

    @property
    def violations(self) -> tuple[tuple[int, float, float, float], ...]:
        return tuple(r for r in self.rows if r[3] < -self.tol)

    @property
    def ok(self) -> bool:
        return not self.violations


def vcg_ic_check(true_problem: CoupledProblem, cases, tol: float = 1e-8) -> ICReport:
    """For each (agent i, fake ReportedProblem) case, verify that truthful
    reporting gives agent i a net cost no worse than the fake report does
    (both evaluated with the true objective)."""
    truthful = vcg_payments(ReportedProblem.truthful(true_problem))
    rows = []
    for i, fake in cases:
        faked = vcg_payments(fake)
        margin = faked.net_costs[i] - truthful.net_costs[i]
        rows.append((int(i), float(truthful.net_costs[i]), float(faked.net_costs[i]), float(margin)))
    return ICReport(rows=tuple(rows), tol=tol)


# ---------------------------------------------------------------------------
# Misreport experiments (transport instances)


@dataclass(frozen=True)
class SweepResult:
    agent: int
    deltas: np.ndarray
    benefits: np.ndarray  # (n_deltas, n_agents) true-cost benefits under shadow pricing

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("delta,agent,benefit\n")
            for di, delta in enumerate(self.deltas):
                for j in range(self.benefits.shape[1]):
                    fh.write(f"{format(float(delta), '.17g')},{j},{format(float(self.benefits[di, j]), '.17g')}\n")


def misreport_sweep(instance, agent: int, deltas) -> SweepResult:
    """Shift every edge cost on the agent's routes by each delta (reported
    costs floor at zero), re-solve, price, and record everyone's true-cost
    benefit under shadow pricing."""
    deltas = np.asarray(deltas, float).ravel()
    n = instance.problem.n_agents
    benefits = np.empty((deltas.shape[0], n))
    for di, delta in enumerate(deltas):
        reported = instance.perturbed_reports({agent: float(delta)})
        benefits[di] = sp_for_problem(reported).benefits
    return SweepResult(agent=int(agent), deltas=deltas, benefits=benefits)


@dataclass(frozen=True)
class PortfolioResult:
    baseline: np.ndarray  # truthful benefits
    benefits: np.ndarray  # (n_cases, n_agents)

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("case,agent,benefit\n")
            for j, b in enumerate(self.baseline):
                fh.write(f"0,{j},{format(float(b), '.17g')}\n")
            for ci in range(self.benefits.shape[0]):
                for j in range(self.benefits.shape[1]):
                    fh.write(f"{ci + 1},{j},{format(float(self.benefits[ci, j]), '.17g')}\n")


def misreport_portfolio(instance, n_cases: int, seed: int, magnitude: float = 0.5) -> PortfolioResult:
    """Seeded batch of simultaneous misreports: per case, every agent shifts a
    random nonempty subvector of its route-edge costs by a random magnitude
    (reported costs floor at zero); everyone's true-cost benefit under shadow
    pricing is recorded next to the truthful baseline."""
    rng = np.random.default_rng(seed)
    baseline = sp_for_problem(ReportedProblem.truthful(instance.problem)).benefits
    n = instance.problem.n_agents
    benefits = np.empty((int(n_cases), n))
    for ci in range(int(n_cases)):
        reports = {}
        for i in range(n):
            used = instance.used_edge_indices(i)
            costs = np.array(instance.network.edge_costs[i], dtype=float)
            scale = float(np.mean(np.abs(costs[used]))) if used else 1.0
            delta = float(rng.uniform(-magnitude, magnitude)) * max(scale, 1e-9)
            k = int(rng.integers(1, len(used) + 1)) if used else 0
            chosen = rng.choice(len(used), size=k, replace=False) if used else []
            for e_idx in np.sort(np.asarray(chosen, int)):
                e = used[int(e_idx)]
                costs[e] = max(costs[e] + delta, 0.0)
            reports[i] = costs
        reported = instance.with_reported_costs(reports)
        benefits[ci] = sp_for_problem(reported).benefits
    return PortfolioResult(baseline=baseline, benefits=benefits)


# ---------------------------------------------------------------------------
# CSV


def payments_csv(outcomes, path) -> None:
    """Payment table rows: agent, mechanism, payment, true_cost, net_cost, benefit."""
    if isinstance(outcomes, MechanismOutcome):
        outcomes = [outcomes]
    with open(path, "w") as fh:
        fh.write("agent,mechanism,payment,true_cost,net_cost,benefit\n")
        for out in outcomes:
            for i in range(out.n_agents):
                fields = [
                    str(i),
                    out.mechanism,
                    format(float(out.payments[i]), ".17g"),
                    format(float(out.costs[i]), ".17g"),
                    format(float(out.net_costs[i]), ".17g"),
                    format(float(out.benefits[i]), ".17g"),
                ]
                fh.write(",".join(fields) + "\n")
