"""Distributed solver: initialization invariants, exchange rounds, subproblem
behavior, per-iteration identities, convergence against the centralized
oracle, mode equivalence, and trace output."""

import csv
import math

import numpy as np
import pytest

from disqo.admm import (
    IterTrace,
    SolverParams,
    accelerated_subproblem,
    communication_round_tracking,
    init_state,
    iterate,
    metrics,
    solve,
    subproblem,
)
from disqo.errors import DimensionMismatch, InfeasibleInitialPoint
from disqo.graphs import build_graph, metropolis_weights, random_connected_graph
from disqo.problem import assemble_problem, centralized_solve, reconcile_dual
from disqo.star import StarInstance, to_transport
from disqo.transport import random_instance

K3 = build_graph(3, [(0, 1), (1, 2), (0, 2)])
P3 = build_graph(3, [(0, 1), (1, 2)])


def star_problem():
    return to_transport(StarInstance([2.0, 3.0, 4.0], 1.0, 5.0)).problem


def single_agent_problem(sigma=2.0, psi=0.0, d=1.0):
    return assemble_problem(
        agents=[(np.array([[sigma]]), np.array([psi]), np.array([[-1.0]]), np.array([0.0]))],
        A=[np.array([[1.0]])],
        d=np.array([d]),
    )


def twin_agent_problem():
    """Two agents with literally identical objectives and local sets."""
    sigma = np.array([[2.0, 0.5], [0.5, 2.0]])
    psi = np.array([1.0, 1.0])
    B = np.array([[-1.0]])
    m = np.array([0.0])
    return assemble_problem(
        agents=[(sigma, psi, B, m), (sigma, psi, B, m)],
        A=[np.array([[1.0]]), np.array([[1.0]])],
        d=np.array([3.0]),
    )


# ---------------------------------------------------------------------------
# Parameters


def test_params_validation():
    with pytest.raises(DimensionMismatch):
        SolverParams(sigma=0.0)
    with pytest.raises(DimensionMismatch):
        SolverParams(rho=-1.0)
    with pytest.raises(DimensionMismatch):
        SolverParams(max_iter=0)
    with pytest.raises(DimensionMismatch):
        SolverParams(mode="fast")


# ---------------------------------------------------------------------------
# Initialization


def test_default_init_from_zero():
    p = star_problem()
    state = init_state(p, K3, SolverParams())
    np.testing.assert_array_equal(state.Y, 0.0)
    np.testing.assert_array_equal(state.Lam, 0.0)
    np.testing.assert_allclose(state.H, -5.0 / 3.0, atol=1e-15)
    np.testing.assert_array_equal(state.V, 0.0)


def test_init_from_replicated_optimum_has_zero_mean_tracking():
    p = star_problem()
    ref = centralized_solve(p)
    y0 = np.tile(ref.x, (3, 1))
    state = init_state(p, K3, SolverParams(), y0=y0)
    assert float(np.abs(state.H.mean(axis=0)).max()) < 1e-9
    # v starts at the average of incident edge midpoints = the common copy
    np.testing.assert_allclose(state.V, y0, atol=1e-12)


def test_init_rejects_infeasible_start():
    p = star_problem()
    y0 = np.zeros((3, 3))
    y0[1, 1] = -0.5  # violates x >= 0 on agent 1's own block
    with pytest.raises(InfeasibleInitialPoint):
        init_state(p, K3, SolverParams(), y0=y0)


def test_default_init_when_origin_infeasible():
    # local set x >= 1 excludes the origin; the minimum-norm point is 1
    p = assemble_problem(
        agents=[(np.array([[2.0]]), np.array([0.0]), np.array([[-1.0]]), np.array([-1.0]))],
        A=[np.array([[1.0]])],
        d=np.array([2.0]),
    )
    g1 = build_graph(1, [])
    state = init_state(p, g1, SolverParams())
    np.testing.assert_allclose(state.Y[0], [1.0], atol=1e-8)
    np.testing.assert_allclose(state.H[0], [1.0 - 2.0], atol=1e-8)


def test_init_tracking_identity_holds():
    inst = random_instance((3, 2, 2, 2), seed=5)
    g = random_connected_graph(3, np.random.default_rng(1))
    state = init_state(inst.problem, g, SolverParams())
    lhs = 3 * state.H.mean(axis=0)
    rhs = state.coupling_values() - inst.problem.d
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_init_graph_size_mismatch():
    with pytest.raises(DimensionMismatch):
        init_state(star_problem(), build_graph(2, [(0, 1)]), SolverParams())


# ---------------------------------------------------------------------------
# Exchange round


def test_exchange_on_two_agents_averages():
    g = build_graph(2, [(0, 1)])
    W = metropolis_weights(g)
    eta = np.array([[2.0], [4.0]])
    lam = np.array([[1.0], [3.0]])
    gamma, ell = communication_round_tracking(eta, lam, W)
    np.testing.assert_allclose(gamma, [[3.0], [3.0]])
    np.testing.assert_allclose(ell, [[2.0], [2.0]])


def test_exchange_on_path_graph():
    W = metropolis_weights(P3)
    eta = np.array([[1.0], [0.0], [0.0]])
    gamma, _ = communication_round_tracking(eta, eta, W)
    np.testing.assert_allclose(gamma.ravel(), [0.75, 0.25, 0.0])


# ---------------------------------------------------------------------------
# Subproblem


def test_subproblem_single_agent_hand_computed():
    # f(y) = y^2 + y, coupling A = [1], d = 3, start y=0:
    # gamma = eta(0) = -3, l = 0, no consensus term (no neighbors), so the
    # step minimizes y^2 + y + 0.5 (y - 3)^2 -> 3y = 2 -> y = 2/3.
    p = assemble_problem(
        agents=[(np.array([[2.0]]), np.array([1.0]), None, None)],
        A=[np.array([[1.0]])],
        d=np.array([3.0]),
    )
    g1 = build_graph(1, [])
    state = init_state(p, g1, SolverParams())
    y = subproblem(state, 0, state.H[0], state.Lam[0])
    np.testing.assert_allclose(y, [2.0 / 3.0], atol=1e-10)
    iterate(state)
    np.testing.assert_allclose(state.Y[0], [2.0 / 3.0], atol=1e-10)
    np.testing.assert_allclose(state.H[0], [-3.0 + 2.0 / 3.0], atol=1e-10)
    np.testing.assert_allclose(state.Lam[0], [-7.0 / 3.0], atol=1e-10)


def test_subproblem_vanishing_penalties_recover_local_minimum():
    # strictly convex objective, no local rows: as sigma, rho -> 0 the step
    # approaches the plain minimizer of the agent objective
    sigma = np.array([[2.0, 0.5], [0.5, 2.0]])
    psi = np.array([1.0, 1.0])
    p = assemble_problem(
        agents=[(sigma, psi, None, None), (sigma, psi, None, None)],
        A=[np.array([[1.0]]), np.array([[1.0]])],
        d=np.array([3.0]),
    )
    g = build_graph(2, [(0, 1)])
    params = SolverParams(sigma=1e-9, rho=1e-9)
    state = init_state(p, g, params)
    y = subproblem(state, 0, np.zeros(1), np.zeros(1))
    expected = np.linalg.solve(sigma, -psi)
    np.testing.assert_allclose(y, expected, atol=1e-6)


def test_subproblem_larger_rho_pulls_toward_anchor():
    p = star_problem()
    target = np.array([1.0, 2.0, 3.0])
    dists = []
    for rho in (1.0, 10.0, 100.0):
        state = init_state(p, K3, SolverParams(rho=rho))
        state.V[0] = target
        y = subproblem(state, 0, state.H[0], state.Lam[0])
        dists.append(float(np.linalg.norm(y - target)))
    assert dists[0] > dists[1] > dists[2]


def test_accelerated_subproblem_matches_plain():
    inst = random_instance((3, 2, 2, 2), seed=5)
    g = random_connected_graph(3, np.random.default_rng(2))
    state = init_state(inst.problem, g, SolverParams(mode="plain"))
    rng = np.random.default_rng(0)
    for i in range(3):
        gamma = rng.normal(size=inst.problem.n_coupling)
        ell = rng.normal(size=inst.problem.n_coupling)
        state.V[i] = rng.normal(size=inst.problem.n_total) * 0.1
        y_plain = subproblem(state, i, gamma, ell)
        w, z, y_acc = accelerated_subproblem(state, i, gamma, ell)
        np.testing.assert_allclose(y_acc, y_plain, atol=1e-8)
        blk = inst.problem.block(i)
        np.testing.assert_allclose(w, y_plain[blk], atol=1e-8)
        assert w.shape[0] == inst.problem.dims[i]
        assert z.shape[0] == inst.problem.n_total - inst.problem.dims[i]


def test_accelerated_unconstrained_step_is_schur_solve():
    p = twin_agent_problem()
    g = build_graph(2, [(0, 1)])
    state = init_state(p, g, SolverParams(mode="accelerated"))
    state.V[0] = np.array([0.4, 0.6])
    gamma = np.array([-1.0])
    ell = np.array([0.5])
    w, z, y = accelerated_subproblem(state, 0, gamma, ell)
    cache = state._accel[0]
    q = p.algorithmic[0].psi - 1.0 * state.V[0]
    q[0] += 1.0 * (ell[0] + 1.0 * (gamma[0] - 0.0))
    phi = cache.qp.P
    psi_red = q[0] - cache.S_wz @ np.linalg.solve(np.array([[3.0]]), q[1:])
    expected_w = -psi_red / phi[0, 0]
    if expected_w < 0:  # own-block row x >= 0
        expected_w = 0.0
    np.testing.assert_allclose(w, [expected_w], atol=1e-9)


# ---------------------------------------------------------------------------
# Iteration identities and symmetry


def test_identities_hold_along_the_run():
    inst = random_instance((3, 2, 2, 2), seed=5)
    g = random_connected_graph(3, np.random.default_rng(7))
    state = init_state(inst.problem, g, SolverParams())
    for _ in range(50):
        lam_mean_before = state.Lam.mean(axis=0)
        iterate(state)
        lhs = 3 * state.H.mean(axis=0)
        rhs = state.coupling_values() - inst.problem.d
        assert float(np.abs(lhs - rhs).max()) <= 1e-10
        expected = lam_mean_before + state.params.sigma * state.H.mean(axis=0)
        assert float(np.abs(state.Lam.mean(axis=0) - expected).max()) <= 1e-10


def test_identical_twin_agents_stay_mirror_images():
    # the two agents are exchangeable up to swapping the two coordinates, so
    # their copies stay mirror images and their duals stay equal at every k
    p = twin_agent_problem()
    g = build_graph(2, [(0, 1)])
    state = init_state(p, g, SolverParams())
    for _ in range(25):
        iterate(state)
        np.testing.assert_allclose(state.Y[0], state.Y[1][::-1], atol=1e-14)
        np.testing.assert_allclose(state.Lam[0], state.Lam[1], atol=1e-14)
        np.testing.assert_allclose(state.H[0], state.H[1], atol=1e-14)


# ---------------------------------------------------------------------------
# Metrics


def test_metrics_zero_violation_at_consensus_feasible_point():
    p = star_problem()
    ref = centralized_solve(p)
    state = init_state(p, K3, SolverParams(), y0=np.tile(ref.x, (3, 1)))
    row = metrics(state)
    assert row["violation"] < 1e-8
    assert math.isnan(row["rel_error"])


def test_metrics_counts_both_ordered_pairs():
    p = twin_agent_problem()
    g = build_graph(2, [(0, 1)])
    state = init_state(p, g, SolverParams())
    v = np.array([0.3, -0.4])
    state.Y[0] = np.zeros(2)
    state.Y[1] = v
    row = metrics(state)
    coupling = float(np.linalg.norm(state.coupling_values() - p.d))
    assert abs(row["violation"] - (coupling + 2 * 0.5)) < 1e-12


def test_metrics_initial_violation_is_demand_norm():
    p = star_problem()
    state = init_state(p, K3, SolverParams())
    row = metrics(state, reference_value=287.0 / 6.0)
    assert abs(row["violation"] - 5.0) < 1e-12
    assert abs(row["rel_error"] - 1.0) < 1e-12


# ---------------------------------------------------------------------------
# End-to-end solves


def test_star_solve_matches_centralized():
    p = star_problem()
    ref = centralized_solve(p)
    res = solve(p, K3, SolverParams(max_iter=500, violation_tol=1e-8, step_tol=1e-8), reference_value=ref.value)
    assert res.converged
    assert res.iterations <= 500
    np.testing.assert_allclose(res.x, ref.x, atol=1e-4)
    assert res.trace.rel_error[-1] <= 1e-4
    # every agent's dual approaches the same vector, the mirror of the
    # centralized one; reconciliation maps it back
    for i in range(3):
        np.testing.assert_allclose(res.lam[i], -ref.lam, atol=1e-4)
    fixed = reconcile_dual(p, res.x, res.lambda_bar, which="true")
    np.testing.assert_allclose(fixed, ref.lam, atol=1e-4)


def test_transport_solve_converges_with_consensus_errors_vanishing():
    inst = random_instance((3, 2, 2, 2), seed=5)
    p = inst.problem
    g = random_connected_graph(3, np.random.default_rng(7))
    ref = centralized_solve(p)
    res = solve(p, g, SolverParams(max_iter=3000, violation_tol=1e-8, step_tol=1e-8), reference_value=ref.value)
    assert res.converged
    # the optimal x is not unique on this instance (parallel routes can trade
    # flow at equal cost), so compare value, feasibility, and duals instead
    assert abs(p.total_value(res.x, "actual") - ref.value) <= 1e-6 * abs(ref.value)
    assert res.trace.rel_error[-1] <= 1e-8
    assert res.trace.eps1_norm[-1] <= 1e-6
    assert res.trace.eps2_norm[-1] <= 1e-6
    assert float(np.abs(res.lam - (-ref.lam)).max()) <= 1e-4


def test_plain_and_accelerated_produce_same_iterates():
    inst = random_instance((3, 2, 2, 2), seed=5)
    g = random_connected_graph(3, np.random.default_rng(7))
    sa = init_state(inst.problem, g, SolverParams(mode="plain"))
    sb = init_state(inst.problem, g, SolverParams(mode="accelerated"))
    for _ in range(40):
        iterate(sa)
        iterate(sb)
        assert float(np.abs(sa.Y - sb.Y).max()) <= 1e-8
        assert float(np.abs(sa.Lam - sb.Lam).max()) <= 1e-8


def test_warm_start_from_optimum_converges_to_same_point():
    # duals always start at zero, so a primal-only warm start still has to
    # rebuild the dual trajectory; it must converge to the same solution in a
    # comparable number of iterations and start with zero violation
    p = star_problem()
    ref = centralized_solve(p)
    params = SolverParams(max_iter=1000, violation_tol=1e-6, step_tol=1e-6)
    cold = solve(p, K3, params)
    warm = solve(p, K3, params, y0=np.tile(ref.x, (3, 1)))
    assert warm.converged and cold.converged
    assert warm.trace.violation[0] < 1e-8
    assert warm.iterations <= cold.iterations + 25
    np.testing.assert_allclose(warm.x, ref.x, atol=1e-4)


def test_max_iter_returns_flagged_trace():
    p = star_problem()
    res = solve(p, K3, SolverParams(max_iter=3, violation_tol=0.0, step_tol=0.0))
    assert not res.converged
    assert res.iterations == 3
    assert len(res.trace) == 4  # initial row plus three iterations


def test_rel_error_tolerance_gates_stopping():
    p = star_problem()
    ref = centralized_solve(p)
    params = SolverParams(max_iter=2000, violation_tol=10.0, step_tol=10.0, rel_error_tol=1e-6)
    res = solve(p, K3, params, reference_value=ref.value)
    assert res.converged
    assert res.trace.rel_error[-1] <= 1e-6
    assert res.iterations > 5


def test_deterministic_traces():
    inst = random_instance((3, 2, 2, 2), seed=5)
    g = random_connected_graph(3, np.random.default_rng(7))
    params = SolverParams(max_iter=60, violation_tol=0.0, step_tol=0.0)
    r1 = solve(inst.problem, g, params)
    r2 = solve(inst.problem, g, params)
    assert r1.trace.iters == r2.trace.iters
    assert r1.trace.violation == r2.trace.violation
    assert r1.trace.eps1_norm == r2.trace.eps1_norm
    assert r1.trace.eps2_norm == r2.trace.eps2_norm
    for a, b in zip(r1.trace.lambda_bar, r2.trace.lambda_bar):
        np.testing.assert_array_equal(a, b)


def test_single_agent_solve_reduces_to_centralized():
    p = single_agent_problem()
    g1 = build_graph(1, [])
    ref = centralized_solve(p)
    res = solve(p, g1, SolverParams(max_iter=500, violation_tol=1e-10, step_tol=1e-10))
    assert res.converged
    np.testing.assert_allclose(res.x, ref.x, atol=1e-8)
    np.testing.assert_allclose(res.lam[0], -ref.lam, atol=1e-6)


def test_own_block_and_average_extractions_agree_at_convergence():
    p = star_problem()
    res = solve(p, K3, SolverParams(max_iter=1000, violation_tol=1e-9, step_tol=1e-9))
    np.testing.assert_allclose(res.x, res.consensus_x, atol=1e-7)


# ---------------------------------------------------------------------------
# Trace CSV


def test_trace_csv_layout(tmp_path):
    p = star_problem()
    res = solve(p, K3, SolverParams(max_iter=5, violation_tol=0.0, step_tol=0.0))
    path = tmp_path / "trace.csv"
    res.trace.to_csv(path)
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["iter", "rel_error", "violation", "eps1_norm", "eps2_norm", "lambda_bar_0", "wall_ms"]
    assert len(rows) == 1 + len(res.trace)
    assert rows[1][0] == "0"
    assert rows[1][1] == "nan"  # no reference supplied
    assert abs(float(rows[1][2]) - 5.0) < 1e-12
    # full-precision round trip of a later violation entry
    assert float(rows[3][2]) == res.trace.violation[2]
