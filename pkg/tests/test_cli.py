"""End-to-end checks of the command-line interface: subcommands, exit codes,
and the layout/determinism of every emitted file."""

import csv
import json

import numpy as np
import pytest

from disqo.cli import main
from disqo.mechanisms import misreport_sweep, sp_for_problem
from disqo.problem import ReportedProblem, centralized_solve
from disqo.transport import build_instance, load_instance, star_network

STAR_GEN = {"star": {"c": [2.0, 3.0, 4.0], "c0": 1.0, "d": 5.0}}
STAR_X = np.array([13 / 6, 5 / 3, 7 / 6])


def star_instance():
    return build_instance(star_network([2.0, 3.0, 4.0], c0=1.0, d=5.0), R=1, L=2)


def write_config(path, **overrides):
    data = {"schema_version": 1, **overrides}
    path.write_text(json.dumps(data))
    return str(path)


def star_config(path, **overrides):
    return write_config(
        path,
        generator=STAR_GEN,
        solver={"max_iter": 3000, "violation_tol": 1e-8, "step_tol": 1e-8},
        **overrides,
    )


def read_solution(path):
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    x = np.array([float(r["value"]) for r in rows if r["kind"] == "x"])
    lam = np.array([float(r["value"]) for r in rows if r["kind"] == "lambda"])
    obj = next(float(r["value"]) for r in rows if r["kind"] == "objective")
    converged = next(int(float(r["value"])) for r in rows if r["kind"] == "converged")
    return x, lam, obj, converged


def read_payments(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# gen


def test_gen_is_deterministic_and_loadable(tmp_path):
    out1, out2 = tmp_path / "a.json", tmp_path / "b.json"
    assert main(["gen", "--scale", "4,2,3,2", "--seed", "7", "--out", str(out1)]) == 0
    assert main(["gen", "--scale", "4,2,3,2", "--seed", "7", "--out", str(out2)]) == 0
    assert out1.read_bytes() == out2.read_bytes()
    inst, comm = load_instance(out1)
    assert inst.problem.n_agents == 4
    assert comm is not None and comm.n_agents == 4
    data = json.loads(out1.read_text())
    assert data["schema_version"] == 1
    assert data["comm_edges"]


def test_gen_different_seeds_differ(tmp_path):
    out1, out2 = tmp_path / "a.json", tmp_path / "b.json"
    main(["gen", "--scale", "4,2,3,2", "--seed", "7", "--out", str(out1)])
    main(["gen", "--scale", "4,2,3,2", "--seed", "8", "--out", str(out2)])
    assert out1.read_bytes() != out2.read_bytes()


def test_gen_star_template_reproduces_known_optimum(tmp_path):
    cfg = write_config(tmp_path / "cfg.json", generator=STAR_GEN, seed=0)
    out = tmp_path / "star.json"
    assert main(["gen", "--config", cfg, "--seed", "0", "--out", str(out)]) == 0
    inst, _ = load_instance(out)
    sol = centralized_solve(inst.problem)
    np.testing.assert_allclose(sol.x, STAR_X, atol=1e-8)
    assert sol.lam[0] == pytest.approx(49 / 3, abs=1e-8)


def test_gen_rejects_bad_scale(tmp_path):
    assert main(["gen", "--scale", "4,2", "--seed", "1", "--out", str(tmp_path / "z.json")]) == 1
    assert main(["gen", "--scale", "0,2,3,2", "--seed", "1", "--out", str(tmp_path / "z.json")]) == 1


def test_gen_requires_seed_and_spec(tmp_path, capsys):
    assert main(["gen", "--scale", "4,2,3,2", "--out", str(tmp_path / "z.json")]) == 1
    assert main(["gen", "--seed", "1", "--out", str(tmp_path / "z.json")]) == 1
    capsys.readouterr()


# ---------------------------------------------------------------------------
# solve


def test_solve_star_reaches_reference(tmp_path):
    cfg = star_config(tmp_path / "cfg.json")
    out = tmp_path / "run"
    assert main(["solve", "--config", cfg, "--out", str(out)]) == 0
    x, lam, obj, converged = read_solution(out / "solution.csv")
    assert converged == 1
    np.testing.assert_allclose(x, STAR_X, atol=1e-4)
    assert lam[0] == pytest.approx(49 / 3, abs=1e-4)
    assert obj == pytest.approx(287 / 6, abs=1e-4)
    with open(out / "trace.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert float(rows[-1]["rel_error"]) <= 1e-4
    assert float(rows[-1]["violation"]) <= 1e-4


def test_solve_on_instance_file(tmp_path):
    inst_file = tmp_path / "inst.json"
    main(["gen", "--scale", "3,2,2,2", "--seed", "3", "--out", str(inst_file)])
    cfg = write_config(tmp_path / "cfg.json", instance="inst.json")  # relative to config dir
    out = tmp_path / "run"
    assert main(["solve", "--config", cfg, "--out", str(out)]) == 0
    x, lam, obj, converged = read_solution(out / "solution.csv")
    assert converged == 1
    inst, _ = load_instance(inst_file)
    sol = centralized_solve(inst.problem)
    assert obj == pytest.approx(sol.value, rel=1e-5)
    np.testing.assert_allclose(lam, sol.lam, atol=1e-3)


def test_solve_exit_two_when_budget_exhausted(tmp_path):
    cfg = star_config(tmp_path / "cfg.json")
    out = tmp_path / "run"
    assert main(["solve", "--config", cfg, "--tol", "0", "--max-iter", "10", "--out", str(out)]) == 2
    with open(out / "trace.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["iter"]) for r in rows] == list(range(11))  # initial point plus 10 iterations
    *_, converged = read_solution(out / "solution.csv")
    assert converged == 0


def test_solve_modes_agree(tmp_path):
    inst_file = tmp_path / "inst.json"
    main(["gen", "--scale", "3,2,2,2", "--seed", "5", "--out", str(inst_file)])
    cfg = write_config(tmp_path / "cfg.json", instance="inst.json")
    out_p, out_a = tmp_path / "plain", tmp_path / "acc"
    assert main(["solve", "--config", cfg, "--mode", "plain", "--out", str(out_p)]) == 0
    assert main(["solve", "--config", cfg, "--mode", "accelerated", "--out", str(out_a)]) == 0
    xp, lp, op, _ = read_solution(out_p / "solution.csv")
    xa, la, oa, _ = read_solution(out_a / "solution.csv")
    np.testing.assert_allclose(xp, xa, atol=1e-8)
    np.testing.assert_allclose(lp, la, atol=1e-8)
    assert op == pytest.approx(oa, abs=1e-8)


def test_solve_outputs_are_stable_and_finite(tmp_path):
    inst_file = tmp_path / "inst.json"
    main(["gen", "--scale", "3,2,2,2", "--seed", "3", "--out", str(inst_file)])
    cfg = write_config(tmp_path / "cfg.json", instance="inst.json")
    out1, out2 = tmp_path / "r1", tmp_path / "r2"
    assert main(["solve", "--config", cfg, "--out", str(out1)]) == 0
    assert main(["solve", "--config", cfg, "--out", str(out2)]) == 0
    assert (out1 / "solution.csv").read_bytes() == (out2 / "solution.csv").read_bytes()
    for run in (out1, out2):
        with open(run / "trace.csv") as fh:
            rows = list(csv.DictReader(fh))
        for row in rows:
            for key, val in row.items():
                assert np.isfinite(float(val)), f"{key} not finite at iter {row['iter']}"
    strip = lambda p: [r[:-1] for r in csv.reader(open(p))]  # all but wall_ms
    assert strip(out1 / "trace.csv") == strip(out2 / "trace.csv")


def test_solve_input_errors(tmp_path, capsys):
    assert main(["solve", "--config", str(tmp_path / "missing.json")]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text("not json")
    assert main(["solve", "--config", str(bad)]) == 1
    bad.write_text(json.dumps({"schema_version": 99}))
    assert main(["solve", "--config", str(bad)]) == 1
    cfg = write_config(tmp_path / "cfg.json", generator=STAR_GEN, solver={"bogus": 1})
    assert main(["solve", "--config", cfg]) == 1
    cfg2 = write_config(tmp_path / "cfg2.json")  # neither instance nor generator
    assert main(["solve", "--config", cfg2]) == 1
    assert main(["solve"]) == 1  # --config required
    capsys.readouterr()


def test_cli_flag_and_command_errors(capsys):
    assert main(["bogus"]) == 1
    assert main(["--help"]) == 0
    assert main(["solve", "--config", "x.json", "--mode", "bogus"]) == 1
    capsys.readouterr()


# ---------------------------------------------------------------------------
# mechanism


def test_mechanism_table_for_star(tmp_path):
    cfg = star_config(tmp_path / "cfg.json")
    out = tmp_path / "run"
    assert main(["mechanism", "--config", cfg, "--out", str(out)]) == 0
    rows = read_payments(out / "payments.csv")
    sp = {r["agent"]: r for r in rows if r["mechanism"] == "ShadowPricing"}
    vcg = {r["agent"]: r for r in rows if r["mechanism"] == "VCG"}
    for i, want in enumerate([9.39, 5.56, 2.72]):
        assert float(sp[str(i)]["benefit"]) == pytest.approx(want, abs=1e-2)
    for i, want in enumerate([7.04, 4.17, 2.04]):
        assert float(vcg[str(i)]["benefit"]) == pytest.approx(want, abs=1e-2)
    assert float(sp["total"]["payment"]) == pytest.approx(65.5, abs=1e-2)
    diff = next(r for r in rows if r["mechanism"] == "SP-VCG")
    assert diff["agent"] == "total"
    want_diff = float(sp["total"]["payment"]) - float(vcg["total"]["payment"])
    assert float(diff["payment"]) == pytest.approx(want_diff, abs=1e-10)


def test_mechanism_zero_demand_pays_nothing(tmp_path):
    cfg = write_config(tmp_path / "cfg.json", generator={"star": {"c": [2.0, 3.0, 4.0], "d": 0.0}})
    out = tmp_path / "run"
    assert main(["mechanism", "--config", cfg, "--out", str(out)]) == 0
    for row in read_payments(out / "payments.csv"):
        assert float(row["payment"]) == pytest.approx(0.0, abs=1e-8)


def test_mechanism_respects_reported_costs_and_basis(tmp_path):
    out = tmp_path / "run"
    cfg = write_config(
        tmp_path / "cfg.json",
        generator=STAR_GEN,
        report_deltas={"0": -1.0},
        cost_basis="reported",
        mechanisms=["sp"],
    )
    assert main(["mechanism", "--config", cfg, "--out", str(out)]) == 0
    rows = read_payments(out / "payments.csv")
    assert {r["mechanism"] for r in rows} == {"ShadowPricing"}
    assert float(rows[0]["benefit"]) == pytest.approx(12.5, abs=1e-2)

    cfg_true = write_config(
        tmp_path / "cfg_true.json",
        generator=STAR_GEN,
        report_deltas={"0": -1.0},
        cost_basis="true",
    )
    assert main(["mechanism", "--config", cfg_true, "--out", str(out)]) == 0
    rows = read_payments(out / "payments.csv")
    sp = [r for r in rows if r["mechanism"] == "ShadowPricing" and r["agent"] != "total"]
    benefits = [float(r["benefit"]) for r in sp]
    assert benefits == pytest.approx([10.0, 4.5, 2.0], abs=1e-2)


def test_mechanism_rejects_unknown_selection(tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.json", generator=STAR_GEN, mechanisms=["sp", "auction"])
    assert main(["mechanism", "--config", cfg, "--out", str(tmp_path / "run")]) == 1
    capsys.readouterr()


# ---------------------------------------------------------------------------
# misreport commands


def test_sweep_matches_library_and_handles_empty_grid(tmp_path):
    cfg = write_config(tmp_path / "cfg.json", generator=STAR_GEN, sweep={"agent": 0, "deltas": [-1.0, 0.0]})
    out = tmp_path / "run"
    assert main(["misreport-sweep", "--config", cfg, "--out", str(out)]) == 0
    with open(out / "sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    inst = star_instance()
    want = misreport_sweep(inst, 0, [-1.0, 0.0])
    got = np.array([float(r["benefit"]) for r in rows]).reshape(2, 3)
    np.testing.assert_allclose(got, want.benefits, atol=1e-10)
    assert [float(r["delta"]) for r in rows[:3]] == [-1.0, -1.0, -1.0]

    cfg_empty = write_config(tmp_path / "cfg2.json", generator=STAR_GEN, sweep={"agent": 0, "deltas": []})
    assert main(["misreport-sweep", "--config", cfg_empty, "--out", str(out)]) == 0
    with open(out / "sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3 and all(float(r["delta"]) == 0.0 for r in rows)
    truthful = sp_for_problem(ReportedProblem.truthful(inst.problem)).benefits
    np.testing.assert_allclose([float(r["benefit"]) for r in rows], truthful, atol=1e-10)



def test_sweep_rejects_bad_agent(tmp_path, capsys):
    cfg = write_config(tmp_path / "cfg.json", generator=STAR_GEN, sweep={"agent": 7, "deltas": [0.0]})
    assert main(["misreport-sweep", "--config", cfg, "--out", str(tmp_path / "run")]) == 1
    cfg2 = write_config(tmp_path / "cfg2.json", generator=STAR_GEN, sweep={})
    assert main(["misreport-sweep", "--config", cfg2, "--out", str(tmp_path / "run")]) == 1
    capsys.readouterr()


def test_portfolio_deterministic_and_seed_sensitive(tmp_path):
    inst_file = tmp_path / "inst.json"
    main(["gen", "--scale", "3,2,2,2", "--seed", "3", "--out", str(inst_file)])
    cfg = write_config(tmp_path / "cfg.json", instance="inst.json", portfolio={"cases": 5, "seed": 11})
    out1, out2, out3 = tmp_path / "r1", tmp_path / "r2", tmp_path / "r3"
    assert main(["misreport-portfolio", "--config", cfg, "--out", str(out1)]) == 0
    assert main(["misreport-portfolio", "--config", cfg, "--out", str(out2)]) == 0
    assert (out1 / "portfolio.csv").read_bytes() == (out2 / "portfolio.csv").read_bytes()
    assert main(["misreport-portfolio", "--config", cfg, "--seed", "12", "--out", str(out3)]) == 0
    assert (out1 / "portfolio.csv").read_bytes() != (out3 / "portfolio.csv").read_bytes()
    with open(out1 / "portfolio.csv") as fh:
        rows = list(csv.DictReader(fh))
    inst, _ = load_instance(inst_file)
    baseline = sp_for_problem(ReportedProblem.truthful(inst.problem)).benefits
    case0 = [float(r["benefit"]) for r in rows if r["case"] == "0"]
    np.testing.assert_allclose(case0, baseline, atol=1e-10)
    assert {r["case"] for r in rows} == {"0", "1", "2", "3", "4", "5"}


def test_portfolio_zero_cases_writes_baseline_only(tmp_path):
    cfg = write_config(tmp_path / "cfg.json", generator=STAR_GEN, portfolio={"cases": 0, "seed": 1})
    out = tmp_path / "run"
    assert main(["misreport-portfolio", "--config", cfg, "--out", str(out)]) == 0
    with open(out / "portfolio.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3 and all(r["case"] == "0" for r in rows)


# ---------------------------------------------------------------------------
# validate


def test_validate_accepts_good_config(tmp_path, capsys):
    cfg = star_config(tmp_path / "cfg.json", sweep={"agent": 0, "deltas": [0.0]}, portfolio={"cases": 2})
    assert main(["validate", "--config", cfg]) == 0
    out = capsys.readouterr().out
    assert "ok: instance" in out and "ok: mixing weights" in out
    assert "FAIL" not in out


def test_validate_accepts_bare_instance_file(tmp_path, capsys):
    inst_file = tmp_path / "inst.json"
    main(["gen", "--scale", "3,2,2,2", "--seed", "3", "--out", str(inst_file)])
    assert main(["validate", "--config", str(inst_file)]) == 0
    capsys.readouterr()


def test_validate_flags_broken_sections(tmp_path, capsys):
    cfg = write_config(
        tmp_path / "cfg.json",
        generator=STAR_GEN,
        graph={"edges": [[0, 1]]},  # node 2 isolated
    )
    assert main(["validate", "--config", cfg]) == 1
    assert "FAIL: communication graph" in capsys.readouterr().out
    cfg2 = write_config(tmp_path / "cfg2.json", generator=STAR_GEN, solver={"sigma": -1.0})
    assert main(["validate", "--config", cfg2]) == 1
    assert "FAIL: solver params" in capsys.readouterr().out
