"""Commodity transportation instances over directed networks.

Suppliers ship commodities to demanders along enumerated simple paths. Each
unit of flow on an edge pays a private per-supplier cost plus a congestion
charge proportional to the *total* flow on that edge, so agents' costs couple
through shared edges. The demand-satisfaction rows (one per demander and
commodity) form the coupling constraint; inventories, pair capacities, and
nonnegativity stay local.

Two per-agent decompositions of the same total cost are produced:

* algorithmic — congestion on each edge is attributed to agents in proportion
  to how many of their paths use the edge (weights kappa), which makes each
  agent's share convex;
* actual — each agent pays the congestion its own flow actually experiences,
  which is the cost mechanisms must price and evaluate.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import networkx as nx
import numpy as np

from .errors import DimensionMismatch, Infeasible, NoPathExists
from .graphs import CommGraph, build_graph, random_connected_graph
from .problem import CoupledProblem, QuadObjective, ReportedProblem, assemble_problem, centralized_solve, exclude_agent

__all__ = [
    "TransportNetwork",
    "PathSet",
    "IncidenceData",
    "TransportInstance",
    "enumerate_paths",
    "build_incidence",
    "to_coupled_problem",
    "build_instance",
    "star_network",
    "random_network",
    "random_instance",
    "network_to_dict",
    "network_from_dict",
    "save_instance",
    "load_instance",
]

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class TransportNetwork:
    """Directed transport graph plus the economic data attached to it."""

    n_nodes: int
    edges: tuple[tuple[int, int], ...]  # directed (tail, head); parallel edges allowed
    suppliers: tuple[int, ...]
    demanders: tuple[int, ...]
    inventories: np.ndarray  # (N, K)
    demands: np.ndarray  # (M, K)
    edge_costs: np.ndarray  # (N, E): supplier i's private cost per unit on edge e
    c0: float
    pair_capacity: np.ndarray  # (N, M); np.inf disables the row

    @property
    def n_suppliers(self) -> int:
        return len(self.suppliers)

    @property
    def n_demanders(self) -> int:
        return len(self.demanders)

    @property
    def n_commodities(self) -> int:
        return int(self.demands.shape[1])

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def validate(self) -> None:
        E = self.n_edges
        for t, h in self.edges:
            if not (0 <= t < self.n_nodes and 0 <= h < self.n_nodes) or t == h:
                raise DimensionMismatch(f"bad edge ({t},{h})")
        if self.inventories.shape != (self.n_suppliers, self.n_commodities):
            raise DimensionMismatch("inventories shape")
        if self.edge_costs.shape != (self.n_suppliers, E):
            raise DimensionMismatch("edge_costs shape")
        if self.pair_capacity.shape != (self.n_suppliers, self.n_demanders):
            raise DimensionMismatch("pair_capacity shape")
        if np.any(self.demands < 0) or np.any(self.inventories < 0) or np.any(self.pair_capacity < 0):
            raise DimensionMismatch("negative demand/inventory/capacity")


@dataclass(frozen=True)
class PathSet:
    """paths[(i, j)] = ordered tuple of paths; each path is a tuple of edge indices."""

    paths: dict[tuple[int, int], tuple[tuple[int, ...], ...]]

    def count(self, i: int, j: int) -> int:
        return len(self.paths.get((i, j), ()))


@dataclass(frozen=True)
class IncidenceData:
    """Edge-usage structure of the enumerated paths.

    ``used_edges`` are the edge indices touched by at least one path; ``Q`` maps
    each agent's local flow variables to loads on those edges; ``kappa[i]``
    holds agent i's share of each used edge (its fraction of the paths through
    the edge). Shares over each used edge sum to one.
    """

    used_edges: tuple[int, ...]
    Q: tuple[np.ndarray, ...]  # per agent: (len(used_edges), n_i) 0/1
    kappa: tuple[np.ndarray, ...]  # per agent: (len(used_edges),)


def enumerate_paths(network: TransportNetwork, R: int, L: int = 4) -> PathSet:
    """R shortest simple paths per (supplier, demander) pair, at most L edges,
    ordered by edge count then lexicographic edge indices.

    Raises ``NoPathExists`` when some demander cannot be reached from any
    supplier.
    """
    if R < 1:
        raise DimensionMismatch("R must be >= 1")
    g = nx.MultiDiGraph()
    g.add_nodes_from(range(network.n_nodes))
    for idx, (t, h) in enumerate(network.edges):
        g.add_edge(t, h, key=idx)
    paths: dict[tuple[int, int], tuple[tuple[int, ...], ...]] = {}
    for i, s in enumerate(network.suppliers):
        for j, t in enumerate(network.demanders):
            found = []
            if s in g and t in g:
                for edge_path in nx.all_simple_edge_paths(g, s, t, cutoff=L):
                    found.append(tuple(key for _, _, key in edge_path))
            found.sort(key=lambda p: (len(p), p))
            paths[(i, j)] = tuple(found[:R])
    for j in range(network.n_demanders):
        if all(len(paths[(i, j)]) == 0 for i in range(network.n_suppliers)):
            raise NoPathExists(f"demander {j} (node {network.demanders[j]}) unreachable from every supplier")
    return PathSet(paths=paths)


def _var_layout(network: TransportNetwork, paths: PathSet) -> list[list[tuple[int, int, int]]]:
    """Per agent, the ordered (demander j, commodity k, route r) labels of its block."""
    layout = []
    for i in range(network.n_suppliers):
        labels = []
        for j in range(network.n_demanders):
            for k in range(network.n_commodities):
                for r in range(paths.count(i, j)):
                    labels.append((j, k, r))
        layout.append(labels)
    return layout


def build_incidence(paths: PathSet, network: TransportNetwork) -> IncidenceData:
    used = sorted({e for plist in paths.paths.values() for p in plist for e in p})
    pos = {e: row for row, e in enumerate(used)}
    layout = _var_layout(network, paths)

    Q = []
    path_counts = np.zeros((network.n_suppliers, len(used)))
    for i in range(network.n_suppliers):
        qi = np.zeros((len(used), len(layout[i])))
        for col, (j, k, r) in enumerate(layout[i]):
            for e in paths.paths[(i, j)][r]:
                qi[pos[e], col] = 1.0
        Q.append(qi)
        # kappa counts routes (not per-commodity variables) through each edge.
        for j in range(network.n_demanders):
            for p in paths.paths[(i, j)]:
                for e in p:
                    path_counts[i, pos[e]] += 1.0
    totals = path_counts.sum(axis=0)
    kappa = []
    for i in range(network.n_suppliers):
        with np.errstate(invalid="ignore", divide="ignore"):
            k_i = np.where(totals > 0, path_counts[i] / np.where(totals > 0, totals, 1.0), 0.0)
        kappa.append(k_i)
    return IncidenceData(used_edges=tuple(used), Q=tuple(Q), kappa=tuple(kappa))


def to_coupled_problem(network: TransportNetwork, paths: PathSet, incidence: IncidenceData) -> CoupledProblem:
    """Assemble the coupled problem with both objective decompositions."""
    N, M, K = network.n_suppliers, network.n_demanders, network.n_commodities
    layout = _var_layout(network, paths)
    dims = [len(layout[i]) for i in range(N)]
    n = sum(dims)
    offsets = np.concatenate([[0], np.cumsum(dims)])
    n_edges_used = len(incidence.used_edges)

    # Q_total over the stacked vector; per-agent padded copies share its rows.
    Q_total = np.zeros((n_edges_used, n))
    for i in range(N):
        Q_total[:, offsets[i] : offsets[i + 1]] = incidence.Q[i]

    agents = []
    actual = []
    A_blocks = []
    c0 = float(network.c0)
    for i in range(N):
        ni = dims[i]
        # Coupling rows (j, k): demand satisfaction.
        A_i = np.zeros((M * K, ni))
        for col, (j, k, r) in enumerate(layout[i]):
            A_i[j * K + k, col] = 1.0
        A_blocks.append(A_i)

        # Local polyhedron: nonnegativity, inventories per commodity,
        # pair capacities per demander (rows with infinite capacity dropped).
        rows = [-np.eye(ni)]
        rhs = [np.zeros(ni)]
        inv = np.zeros((K, ni))
        for col, (j, k, r) in enumerate(layout[i]):
            inv[k, col] = 1.0
        rows.append(inv)
        rhs.append(network.inventories[i])
        cap_rows = []
        cap_rhs = []
        for j in range(M):
            if np.isfinite(network.pair_capacity[i, j]):
                row = np.zeros(ni)
                for col, (jj, k, r) in enumerate(layout[i]):
                    if jj == j:
                        row[col] = 1.0
                cap_rows.append(row)
                cap_rhs.append(network.pair_capacity[i, j])
        if cap_rows:
            rows.append(np.array(cap_rows))
            rhs.append(np.array(cap_rhs))
        B_i = np.vstack(rows)
        m_i = np.concatenate(rhs)

        # Linear term: private edge costs summed along each variable's route.
        psi = np.zeros(n)
        for col, (j, k, r) in enumerate(layout[i]):
            psi[offsets[i] + col] = sum(network.edge_costs[i, e] for e in paths.paths[(i, j)][r])

        sigma_alg = 2.0 * c0 * Q_total.T @ np.diag(incidence.kappa[i]) @ Q_total
        q_pad = np.zeros((n_edges_used, n))
        q_pad[:, offsets[i] : offsets[i + 1]] = incidence.Q[i]
        sigma_act = c0 * (Q_total.T @ q_pad + q_pad.T @ Q_total)

        agents.append((sigma_alg, psi, B_i, m_i))
        actual.append((sigma_act, psi))

    d = network.demands.reshape(-1)  # (j, k) j-major
    return assemble_problem(agents, A_blocks, d, actual=actual)


@dataclass(frozen=True)
class TransportInstance:
    """A network, its enumerated paths/incidence, and the assembled problem."""

    network: TransportNetwork
    paths: PathSet
    incidence: IncidenceData
    problem: CoupledProblem
    R: int
    L: int

    @property
    def var_labels(self) -> list[list[tuple[int, int, int]]]:
        return _var_layout(self.network, self.paths)

    def used_edge_indices(self, i: int) -> list[int]:
        """Edge indices (original numbering) that agent i's routes traverse."""
        used = set()
        for j in range(self.network.n_demanders):
            for p in self.paths.paths[(i, j)]:
                used.update(p)
        return sorted(used)

    def with_reported_costs(self, reports: dict[int, np.ndarray]) -> ReportedProblem:
        """Reported problem where each agent in ``reports`` declares the given
        private edge-cost vector (length n_edges) instead of its true one."""
        costs = np.array(self.network.edge_costs, dtype=float)
        for i, c in reports.items():
            c = np.asarray(c, float).ravel()
            if c.shape != (self.network.n_edges,):
                raise DimensionMismatch(f"reported cost vector of agent {i} has length {c.shape[0]}")
            costs[i] = c
        reported_net = TransportNetwork(
            n_nodes=self.network.n_nodes,
            edges=self.network.edges,
            suppliers=self.network.suppliers,
            demanders=self.network.demanders,
            inventories=self.network.inventories,
            demands=self.network.demands,
            edge_costs=costs,
            c0=self.network.c0,
            pair_capacity=self.network.pair_capacity,
        )
        reported_problem = to_coupled_problem(reported_net, self.paths, self.incidence)
        return ReportedProblem(true=self.problem, reported=reported_problem)

    def perturbed_reports(self, deltas: dict[int, float]) -> ReportedProblem:
        """Each listed agent shifts every edge cost on its used edges by its delta
        (reported costs are floored at zero)."""
        reports = {}
        for i, delta in deltas.items():
            c = np.array(self.network.edge_costs[i], dtype=float)
            used = self.used_edge_indices(i)
            c[used] = np.maximum(c[used] + delta, 0.0)
            reports[i] = c
        return self.with_reported_costs(reports)


def build_instance(network: TransportNetwork, R: int, L: int = 4) -> TransportInstance:
    network.validate()
    paths = enumerate_paths(network, R, L)
    incidence = build_incidence(paths, network)
    problem = to_coupled_problem(network, paths, incidence)
    return TransportInstance(network=network, paths=paths, incidence=incidence, problem=problem, R=R, L=L)


def star_network(c_norms, c0: float = 1.0, d: float = 5.0, spoke_costs=None) -> TransportNetwork:
    """N suppliers, one demander, one shared trunk edge into it.

    Supplier i's single route is (spoke_i, trunk); its private per-unit route
    cost is c_norms[i], placed on the spoke unless explicit per-edge splits are
    given via ``spoke_costs`` (pairs of spoke/trunk entries).
    """
    c_norms = np.asarray(c_norms, float).ravel()
    N = c_norms.shape[0]
    junction = N + 1
    demander = N
    edges = [(i, junction) for i in range(N)] + [(junction, demander)]
    costs = np.zeros((N, N + 1))
    if spoke_costs is None:
        for i in range(N):
            costs[i, i] = c_norms[i]
    else:
        for i, (on_spoke, on_trunk) in enumerate(spoke_costs):
            if abs(on_spoke + on_trunk - c_norms[i]) > 1e-12:
                raise DimensionMismatch("spoke/trunk split must sum to the route cost")
            costs[i, i] = on_spoke
            costs[i, N] = on_trunk
    return TransportNetwork(
        n_nodes=N + 2,
        edges=tuple(edges),
        suppliers=tuple(range(N)),
        demanders=(demander,),
        inventories=np.full((N, 1), float(d)),  # redundant cap keeps each local set bounded
        demands=np.array([[float(d)]]),
        edge_costs=costs,
        c0=float(c0),
        pair_capacity=np.full((N, 1), np.inf),
    )


def random_network(scale: tuple[int, int, int, int], rng: np.random.Generator, c0: float = 1.0, max_tries: int = 50) -> TransportNetwork:
    """Seeded random layered network at scale (N suppliers, M demanders,
    K commodities, R routes). Redraws (deterministically) until every demander
    is reachable by at least two suppliers and the instance stays feasible
    even after removing any single supplier."""
    N, M, K, R = scale
    for _ in range(max_tries):
        network = _draw_network(scale, rng, c0)
        try:
            instance = build_instance(network, R=R, L=4)
        except NoPathExists:
            continue
        # Coverage: every demand row needs at least two contributing suppliers,
        # or dropping one supplier could strand demand.
        paths = instance.paths
        if any(sum(1 for i in range(N) if paths.count(i, j) > 0) < 2 for j in range(M)):
            continue
        try:
            centralized_solve(instance.problem, tol=1e-8)
            ok = True
            for i in range(N):
                centralized_solve(exclude_agent(instance.problem, i), tol=1e-8)
        except Infeasible:
            ok = False
        if ok:
            return network
    raise Infeasible(f"no feasible draw at scale {scale} in {max_tries} tries")


def _draw_network(scale: tuple[int, int, int, int], rng: np.random.Generator, c0: float) -> TransportNetwork:
    N, M, K, R = scale
    n_hubs = max(2, (N + M) // 3)
    suppliers = tuple(range(N))
    demanders = tuple(range(N, N + M))
    hubs = list(range(N + M, N + M + n_hubs))
    n_nodes = N + M + n_hubs

    edge_set: set[tuple[int, int]] = set()
    for s in suppliers:
        chosen = rng.choice(n_hubs, size=max(1, int(rng.integers(1, n_hubs + 1))), replace=False)
        for hub_idx in np.sort(chosen):
            edge_set.add((s, hubs[hub_idx]))
    for hub in hubs:
        for t in demanders:
            if rng.random() < 0.8:
                edge_set.add((hub, t))
    for s in suppliers:
        for t in demanders:
            if rng.random() < 0.25:
                edge_set.add((s, t))
    # Guarantee every hub feeds someone and every demander is fed twice.
    for hub in hubs:
        if not any(t for (a, t) in edge_set if a == hub):
            edge_set.add((hub, demanders[int(rng.integers(0, M))]))
    for t in demanders:
        feeders = {a for (a, b) in edge_set if b == t}
        while len(feeders) < 2:
            s = suppliers[int(rng.integers(0, N))]
            edge_set.add((s, t))
            feeders.add(s)
    edges = tuple(sorted(edge_set))

    demands = rng.uniform(1.0, 5.0, size=(M, K))
    per_commodity = demands.sum(axis=0)  # (K,)
    inventories = np.outer(np.ones(N), per_commodity) * rng.uniform(0.6, 1.0, size=(N, K))
    pair_capacity = np.outer(np.ones(N), demands.sum(axis=1)) * rng.uniform(0.8, 1.5, size=(N, M))
    edge_costs = rng.uniform(0.5, 3.0, size=(N, len(edges)))
    return TransportNetwork(
        n_nodes=n_nodes,
        edges=edges,
        suppliers=suppliers,
        demanders=demanders,
        inventories=inventories,
        demands=demands,
        edge_costs=edge_costs,
        c0=c0,
        pair_capacity=pair_capacity,
    )


def random_instance(scale: tuple[int, int, int, int], seed: int, c0: float = 1.0) -> TransportInstance:
    rng = np.random.default_rng(seed)
    network = random_network(scale, rng, c0=c0)
    return build_instance(network, R=scale[3], L=4)


def default_comm_graph(n_agents: int, seed: int) -> CommGraph:
    return random_connected_graph(n_agents, np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# Serialization


def network_to_dict(network: TransportNetwork, R: int, L: int, comm_edges=None) -> dict:
    cap = [[None if not np.isfinite(v) else float(v) for v in row] for row in network.pair_capacity]
    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "transport",
        "n_nodes": network.n_nodes,
        "edges": [list(e) for e in network.edges],
        "suppliers": list(network.suppliers),
        "demanders": list(network.demanders),
        "inventories": network.inventories.tolist(),
        "demands": network.demands.tolist(),
        "edge_costs": network.edge_costs.tolist(),
        "c0": float(network.c0),
        "pair_capacity": cap,
        "R": int(R),
        "L": int(L),
        "comm_edges": [list(e) for e in comm_edges] if comm_edges is not None else None,
    }


def network_from_dict(data: dict) -> tuple[TransportNetwork, int, int, CommGraph | None]:
    if data.get("schema_version") != SCHEMA_VERSION:
        raise DimensionMismatch(f"unsupported schema_version {data.get('schema_version')!r}")
    cap = np.array([[np.inf if v is None else float(v) for v in row] for row in data["pair_capacity"]])
    network = TransportNetwork(
        n_nodes=int(data["n_nodes"]),
        edges=tuple(tuple(e) for e in data["edges"]),
        suppliers=tuple(data["suppliers"]),
        demanders=tuple(data["demanders"]),
        inventories=np.array(data["inventories"], float),
        demands=np.array(data["demands"], float),
        edge_costs=np.array(data["edge_costs"], float),
        c0=float(data["c0"]),
        pair_capacity=cap,
    )
    comm = None
    if data.get("comm_edges") is not None:
        comm = build_graph(network.n_suppliers, [tuple(e) for e in data["comm_edges"]])
    return network, int(data["R"]), int(data["L"]), comm


def save_instance(path, network: TransportNetwork, R: int, L: int, comm_edges=None) -> None:
    with open(path, "w") as fh:
        json.dump(network_to_dict(network, R, L, comm_edges), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_instance(path) -> tuple[TransportInstance, CommGraph | None]:
    with open(path) as fh:
        data = json.load(fh)
    network, R, L, comm = network_from_dict(data)
    return build_instance(network, R=R, L=L), comm
