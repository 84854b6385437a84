"""Command-line front end.

Subcommands: ``gen`` (seeded instance files), ``solve`` (distributed run with
trace/solution CSVs), ``mechanism`` (payment tables), ``misreport-sweep`` and
``misreport-portfolio`` (misreport experiments), ``validate`` (config and
instance checks).  Exit codes: 0 success, 1 input error, 2 the iterative
solver hit its budget without converging.

Config files are JSON with a ``schema_version`` field::

    {
      "schema_version": 1,
      "instance": "inst.json",                      # or a generator spec:
      "generator": {"scale": [4, 2, 3, 2], "seed": 7, "c0": 1.0},
      "graph": {"edges": [[0, 1], [1, 2]]},         # optional; default seeded draw
      "solver": {"sigma": 1.0, "rho": 1.0, "max_iter": 2000,
                 "violation_tol": 1e-6, "step_tol": 1e-6, "mode": "plain"},
      "report_deltas": {"0": -1.0},                 # optional misreports, or
      "reports": {"0": [per-edge costs...]},        #   explicit reported costs
      "mechanisms": ["sp", "vcg"],
      "cost_basis": "true",
      "sweep": {"agent": 0, "deltas": [-1.0, 0.0]},
      "portfolio": {"cases": 30, "seed": 11, "magnitude": 0.5},
      "out": "results"
    }

The generator spec may instead be a star template with explicit costs:
``{"star": {"c": [3, 4, 5], "c0": 1.0, "d": 5.0}}``.

All emitted CSVs are byte-stable across reruns of the same config and seed,
except the ``wall_ms`` trace column, which records measured time.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from .admm import SolverParams, solve as distributed_solve
from .errors import ConventionMismatch, DisqoError, InvalidConfig
from .graphs import CommGraph, build_graph, metropolis_weights, validate_weights
from .mechanisms import MechanismOutcome, misreport_portfolio, misreport_sweep, sp_for_problem, vcg_payments
from .problem import ReportedProblem, centralized_solve, reconcile_dual
from .transport import (
    TransportInstance,
    build_instance,
    default_comm_graph,
    load_instance,
    random_instance,
    save_instance,
    star_network,
)

CONFIG_SCHEMA_VERSION = 1

_SOLVER_FIELDS = {f.name for f in dataclasses.fields(SolverParams)}


def _fmt(v) -> str:
    return format(float(v), ".17g")


# ---------------------------------------------------------------------------
# Config handling


def _load_json(path: str) -> dict:
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise InvalidConfig(f"{path}: top level must be a JSON object")
    return data


def _load_config(path: str) -> tuple[dict, str]:
    """Return (config dict, directory for resolving relative paths).

    A bare instance file (``"kind": "transport"``) is accepted and wrapped as
    a minimal config pointing at itself.
    """
    data = _load_json(path)
    base = os.path.dirname(os.path.abspath(path))
    if data.get("kind") == "transport":
        return {"schema_version": CONFIG_SCHEMA_VERSION, "instance": os.path.abspath(path)}, base
    if data.get("schema_version") != CONFIG_SCHEMA_VERSION:
        raise InvalidConfig(f"{path}: unsupported schema_version {data.get('schema_version')!r}")
    return data, base


def _scale_tuple(raw) -> tuple[int, int, int, int]:
    try:
        parts = [int(v) for v in raw]
    except (TypeError, ValueError) as exc:
        raise InvalidConfig(f"scale must be four integers, got {raw!r}") from exc
    if len(parts) != 4 or any(v < 1 for v in parts):
        raise InvalidConfig(f"scale must be four positive integers (N,M,K,R), got {raw!r}")
    return tuple(parts)


def _instance_from_generator(gen: dict, seed_override: int | None) -> TransportInstance:
    if "star" in gen:
        star = gen["star"]
        if "c" not in star:
            raise InvalidConfig("star generator needs a cost list 'c'")
        network = star_network(
            [float(v) for v in star["c"]],
            c0=float(star.get("c0", 1.0)),
            d=float(star.get("d", 5.0)),
            spoke_costs=star.get("spoke_costs"),
        )
        return build_instance(network, R=int(gen.get("R", 1)), L=int(gen.get("L", 2)))
    if "scale" not in gen:
        raise InvalidConfig("generator spec needs 'scale' or 'star'")
    scale = _scale_tuple(gen["scale"])
    seed = seed_override if seed_override is not None else gen.get("seed")
    if seed is None:
        raise InvalidConfig("generator spec needs a seed (config 'seed' or --seed)")
    return random_instance(scale, int(seed), c0=float(gen.get("c0", 1.0)))


def _resolve_instance(config: dict, base: str, seed_override: int | None) -> tuple[TransportInstance, CommGraph | None]:
    if "instance" in config:
        path = config["instance"]
        if not os.path.isabs(path):
            path = os.path.join(base, path)
        if not os.path.exists(path):
            raise InvalidConfig(f"instance file not found: {path}")
        return load_instance(path)
    if "generator" in config:
        return _instance_from_generator(config["generator"], seed_override), None
    raise InvalidConfig("config needs an 'instance' path or a 'generator' spec")


def _resolve_graph(config: dict, instance: TransportInstance, embedded: CommGraph | None, seed_override: int | None) -> CommGraph:
    spec = config.get("graph") or {}
    n = instance.problem.n_agents
    if "edges" in spec:
        return build_graph(n, [tuple(e) for e in spec["edges"]])
    if embedded is not None:
        return embedded
    seed = spec.get("seed")
    if seed is None:
        seed = seed_override if seed_override is not None else config.get("generator", {}).get("seed", 0)
    return default_comm_graph(n, int(seed))


def _solver_params(config: dict, args) -> SolverParams:
    spec = dict(config.get("solver") or {})
    unknown = set(spec) - _SOLVER_FIELDS
    if unknown:
        raise InvalidConfig(f"unknown solver option(s): {sorted(unknown)}")
    if getattr(args, "mode", None):
        spec["mode"] = args.mode
    if getattr(args, "max_iter", None) is not None:
        spec["max_iter"] = args.max_iter
    if getattr(args, "tol", None) is not None:
        spec["violation_tol"] = args.tol
        spec["step_tol"] = args.tol
    return SolverParams(**spec)


def _apply_reports(config: dict, instance: TransportInstance):
    """Plain problem, or the reported version when the config declares one."""
    if "reports" in config:
        reports = {int(i): np.asarray(c, float) for i, c in config["reports"].items()}
        return instance.with_reported_costs(reports)
    if "report_deltas" in config:
        deltas = {int(i): float(v) for i, v in config["report_deltas"].items()}
        return instance.perturbed_reports(deltas)
    return instance.problem


def _out_dir(config: dict, args) -> str:
    out = getattr(args, "out", None) or config.get("out") or "."
    os.makedirs(out, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# Output writers


def _write_solution_csv(path: str, instance: TransportInstance, problem, result) -> None:
    reported = problem.reported if isinstance(problem, ReportedProblem) else problem
    try:
        lam = reconcile_dual(problem, result.x, result.lambda_bar, which="reported")
    except ConventionMismatch:
        lam = result.lambda_bar
    value = reported.total_value(result.x, "actual")
    labels = instance.var_labels
    with open(path, "w") as fh:
        fh.write("kind,index,label,value\n")
        pos = 0
        for i, agent_vars in enumerate(labels):
            for (j, k, r) in agent_vars:
                fh.write(f"x,{pos},s{i}:d{j}:k{k}:r{r},{_fmt(result.x[pos])}\n")
                pos += 1
        K = instance.network.n_commodities
        for row in range(reported.n_coupling):
            fh.write(f"lambda,{row},d{row // K}:k{row % K},{_fmt(lam[row])}\n")
        fh.write(f"objective,0,total,{_fmt(value)}\n")
        fh.write(f"iterations,0,,{result.iterations}\n")
        fh.write(f"converged,0,,{int(result.converged)}\n")


def _write_payments_csv(path: str, outcomes: list[MechanismOutcome]) -> None:
    with open(path, "w") as fh:
        fh.write("agent,mechanism,payment,true_cost,net_cost,benefit\n")
        for out in outcomes:
            for i in range(out.n_agents):
                fh.write(
                    f"{i},{out.mechanism},{_fmt(out.payments[i])},{_fmt(out.costs[i])},"
                    f"{_fmt(out.net_costs[i])},{_fmt(out.benefits[i])}\n"
                )
        for out in outcomes:
            fh.write(
                f"total,{out.mechanism},{_fmt(out.payments.sum())},{_fmt(out.costs.sum())},"
                f"{_fmt(out.net_costs.sum())},{_fmt(out.benefits.sum())}\n"
            )
        by_name = {out.mechanism: out for out in outcomes}
        if "ShadowPricing" in by_name and "VCG" in by_name:
            sp, vcg = by_name["ShadowPricing"], by_name["VCG"]
            fh.write(
                f"total,SP-VCG,{_fmt(sp.payments.sum() - vcg.payments.sum())},"
                f"{_fmt(sp.costs.sum() - vcg.costs.sum())},"
                f"{_fmt(sp.net_costs.sum() - vcg.net_costs.sum())},"
                f"{_fmt(sp.benefits.sum() - vcg.benefits.sum())}\n"
            )


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gen(args) -> int:
    gen: dict = {}
    if args.config:
        config, _ = _load_config(args.config)
        gen = dict(config.get("generator") or {})
    if args.scale:
        gen["scale"] = args.scale.split(",")
    if args.c0 is not None:
        gen["c0"] = args.c0
    seed_override = args.seed
    instance = _instance_from_generator(gen, seed_override)
    n = instance.problem.n_agents
    seed = seed_override if seed_override is not None else int(gen.get("seed", 0))
    comm = default_comm_graph(n, seed)
    save_instance(args.out, instance.network, instance.R, instance.L, comm_edges=sorted(comm.edges))
    print(f"wrote {args.out}: {n} agents, {instance.problem.n_total} variables, {instance.problem.n_coupling} coupling rows")
    return 0


def cmd_solve(args) -> int:
    config, base = _load_config(args.config)
    instance, embedded = _resolve_instance(config, base, args.seed)
    graph = _resolve_graph(config, instance, embedded, args.seed)
    params = _solver_params(config, args)
    problem = _apply_reports(config, instance)
    reference = centralized_solve(problem, which="reported").value
    result = distributed_solve(problem, graph, params, reference_value=reference)
    out = _out_dir(config, args)
    result.trace.to_csv(os.path.join(out, "trace.csv"))
    _write_solution_csv(os.path.join(out, "solution.csv"), instance, problem, result)
    print(f"converged={result.converged} iterations={result.iterations} mode={params.mode}")
    return 0 if result.converged else 2


def cmd_mechanism(args) -> int:
    config, base = _load_config(args.config)
    instance, _ = _resolve_instance(config, base, args.seed)
    problem = _apply_reports(config, instance)
    selected = [str(m).lower() for m in config.get("mechanisms", ["sp", "vcg"])]
    bad = [m for m in selected if m not in ("sp", "vcg")]
    if bad:
        raise InvalidConfig(f"unknown mechanism(s): {bad}; choose from 'sp', 'vcg'")
    cost_basis = config.get("cost_basis", "true")
    outcomes = []
    if "sp" in selected:
        outcomes.append(sp_for_problem(problem, cost_basis=cost_basis))
    if "vcg" in selected:
        outcomes.append(vcg_payments(problem, cost_basis=cost_basis))
    out = _out_dir(config, args)
    _write_payments_csv(os.path.join(out, "payments.csv"), outcomes)
    for outc in outcomes:
        print(f"{outc.mechanism}: total payout {outc.total_payout:.6g}")
    return 0


def cmd_misreport_sweep(args) -> int:
    config, base = _load_config(args.config)
    instance, _ = _resolve_instance(config, base, args.seed)
    spec = config.get("sweep") or {}
    if "agent" not in spec:
        raise InvalidConfig("sweep spec needs an 'agent'")
    agent = int(spec["agent"])
    if not 0 <= agent < instance.problem.n_agents:
        raise InvalidConfig(f"sweep agent {agent} out of range")
    deltas = [float(v) for v in spec.get("deltas", [])] or [0.0]
    result = misreport_sweep(instance, agent, deltas)
    out = _out_dir(config, args)
    result.to_csv(os.path.join(out, "sweep.csv"))
    print(f"swept agent {agent} over {len(deltas)} delta(s)")
    return 0


def cmd_misreport_portfolio(args) -> int:
    config, base = _load_config(args.config)
    instance, _ = _resolve_instance(config, base, args.seed)
    spec = config.get("portfolio") or {}
    cases = int(spec.get("cases", 0))
    if cases < 0:
        raise InvalidConfig("portfolio 'cases' must be nonnegative")
    seed = args.seed if args.seed is not None else int(spec.get("seed", 0))
    magnitude = float(spec.get("magnitude", 0.5))
    result = misreport_portfolio(instance, cases, seed, magnitude=magnitude)
    out = _out_dir(config, args)
    result.to_csv(os.path.join(out, "portfolio.csv"))
    print(f"ran {cases} misreport case(s), seed {seed}")
    return 0


def cmd_validate(args) -> int:
    config, base = _load_config(args.config)
    checks: list[tuple[str, bool, str]] = []

    def record(name: str, fn):
        try:
            detail = fn()
            checks.append((name, True, detail or ""))
        except Exception as exc:  # report every failure, keep checking
            checks.append((name, False, f"{type(exc).__name__}: {exc}"))

    holder: dict = {}

    def check_instance():
        instance, embedded = _resolve_instance(config, base, args.seed)
        instance.network.validate()
        holder["instance"] = instance
        holder["embedded"] = embedded
        p = instance.problem
        return f"{p.n_agents} agents, {p.n_total} variables, {p.n_coupling} coupling rows"

    record("instance", check_instance)
    if "instance" in holder:
        def check_graph():
            graph = _resolve_graph(config, holder["instance"], holder["embedded"], args.seed)
            holder["graph"] = graph
            return f"{graph.n_agents} nodes, {len(graph.edges)} edges, connected"

        record("communication graph", check_graph)
    if "graph" in holder:
        def check_weights():
            report = validate_weights(metropolis_weights(holder["graph"]), holder["graph"])
            if not report.ok:
                raise InvalidConfig("; ".join(report.failures()))
            return "doubly stochastic, symmetric, spectrum in range"

        record("mixing weights", check_weights)
    record("solver params", lambda: str(_solver_params(config, args)))
    if "instance" in holder and ("reports" in config or "report_deltas" in config):
        record("reported costs", lambda: str(type(_apply_reports(config, holder["instance"])).__name__))
    if "sweep" in config and "instance" in holder:
        def check_sweep():
            spec = config["sweep"]
            agent = int(spec["agent"])
            if not 0 <= agent < holder["instance"].problem.n_agents:
                raise InvalidConfig(f"sweep agent {agent} out of range")
            [float(v) for v in spec.get("deltas", [])]
            return f"agent {agent}, {len(spec.get('deltas', []))} delta(s)"

        record("sweep spec", check_sweep)
    if "portfolio" in config:
        def check_portfolio():
            spec = config["portfolio"]
            if int(spec.get("cases", 0)) < 0:
                raise InvalidConfig("portfolio 'cases' must be nonnegative")
            return f"{int(spec.get('cases', 0))} case(s)"

        record("portfolio spec", check_portfolio)

    ok = all(good for _, good, _ in checks)
    for name, good, detail in checks:
        tag = "ok" if good else "FAIL"
        print(f"{tag}: {name}" + (f" ({detail})" if detail else ""))
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# Parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # input errors exit 1, not argparse's default 2
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="disqo", description="Distributed coupled-QP solver and incentive mechanisms.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out_default=None, with_mode=False):
        p.add_argument("--config", help="JSON config file (or a bare instance file)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=out_default, help="output directory (default from config, else '.')")
        if with_mode:
            p.add_argument("--mode", choices=("plain", "accelerated"), default=None, help="subproblem mode")
            p.add_argument("--max-iter", type=int, default=None, help="iteration budget override")
            p.add_argument("--tol", type=float, default=None, help="sets both violation and step tolerances")

    p_gen = sub.add_parser("gen", help="generate a seeded instance file")
    common(p_gen)
    p_gen.add_argument("--scale", help="N,M,K,R (e.g. 4,2,3,2); alternative to a generator config")
    p_gen.add_argument("--c0", type=float, default=None, help="congestion coefficient")
    p_gen.set_defaults(func=cmd_gen)

    p_solve = sub.add_parser("solve", help="run the distributed solver; writes trace.csv and solution.csv")
    common(p_solve, with_mode=True)
    p_solve.set_defaults(func=cmd_solve)

    p_mech = sub.add_parser("mechanism", help="settle payments; writes payments.csv")
    common(p_mech)
    p_mech.set_defaults(func=cmd_mechanism)

    p_sweep = sub.add_parser("misreport-sweep", help="single-agent misreport grid; writes sweep.csv")
    common(p_sweep)
    p_sweep.set_defaults(func=cmd_misreport_sweep)

    p_port = sub.add_parser("misreport-portfolio", help="seeded simultaneous misreports; writes portfolio.csv")
    common(p_port)
    p_port.set_defaults(func=cmd_misreport_portfolio)

    p_val = sub.add_parser("validate", help="check a config or instance file")
    p_val.add_argument("--config", help="JSON config file (or a bare instance file)")
    p_val.add_argument("--seed", type=int, default=None)
    p_val.set_defaults(func=cmd_validate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help exits 0; argument errors exit 1
        return int(exc.code or 0)
    if getattr(args, "func", None) in (cmd_solve, cmd_mechanism, cmd_misreport_sweep, cmd_misreport_portfolio, cmd_validate):
        if not args.config:
            print(f"disqo {args.command}: error: --config is required", file=sys.stderr)
            return 1
    if args.func is cmd_gen and not (args.config or args.scale):
        print("disqo gen: error: provide --scale or --config with a generator spec", file=sys.stderr)
        return 1
    if args.func is cmd_gen and not args.out:
        print("disqo gen: error: --out file path is required", file=sys.stderr)
        return 1
    try:
        return int(args.func(args))
    except DisqoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
