import dataclasses
import re

import numpy as np
import pytest
import scipy.sparse as sp

from conftest import load_study
from flexopf import conic
from flexopf.conic import SolverSettings, StandardForm, solve_standard, solve_via_backend
from flexopf.formulation import ConicProgram, Epigraph, FormulationOptions, assemble
from flexopf.transform import augment


def quadratic_program():
    # min t  s.t.  t >= (P - 1)^2,  0 <= P <= 2
    p = ConicProgram(size=1)
    P = p.add_var("P", 0, 2)
    t = p.add_var("t")
    p.epigraphs.append(Epigraph(t=t, x=P, a=1.0, b=-2.0, c=1.0))
    p.objective[t] = 1.0
    p.add_row("pin", "W", {}, {(0, 0): 1.0}, 1.0)
    return p


def trace_program():
    # min trace(W)  s.t.  W_11 = 1,  W psd (2x2)
    p = ConicProgram(size=2)
    t = p.add_var("tr")
    p.objective[t] = 1.0
    p.add_row("trace", "t", {t: 1.0}, {(0, 0): -1.0, (1, 1): -1.0}, 0.0)
    p.add_row("pin", "W11", {}, {(0, 0): 1.0}, 1.0)
    return p


def test_quadratic_micro_instance():
    sol = conic.solve(quadratic_program())
    assert sol.optimal and sol.residuals["gap"] <= 1e-8
    P, t = sol.scalars
    assert t == pytest.approx(0, abs=1e-8)
    assert P == pytest.approx(1, abs=1e-4)


def test_trace_micro_instance():
    sol = conic.solve(trace_program())
    assert sol.optimal and sol.residuals["gap"] <= 1e-8
    assert sol.primal_objective == pytest.approx(1.0, abs=1e-8)
    assert sol.W == pytest.approx(np.diag([1.0, 0.0]), abs=1e-8)


def test_linear_program_without_psd_block():
    # min x1 + 2 x2  s.t.  x1 + x2 = 1,  x >= 0
    std = StandardForm(c=np.array([1.0, 2.0]), C=[], A=sp.csr_matrix([[1.0, 1.0]]), A_psd=[],
                       b=np.array([1.0]), lp=2, soc=(), psd=())
    sol = solve_standard(std)
    assert sol.optimal
    assert sol.x == pytest.approx([1, 0], abs=1e-7)


def test_infeasible_lp_detected():
    # x1 + x2 = -1 with x >= 0
    std = StandardForm(c=np.array([1.0, 1.0]), C=[], A=sp.csr_matrix([[1.0, 1.0]]), A_psd=[],
                       b=np.array([-1.0]), lp=2, soc=(), psd=())
    sol = solve_standard(std)
    assert sol.status in ("primal_infeasible", "numerical_failure", "iteration_limit")
    assert not sol.optimal


def test_settings_validation():
    for bad in (dict(max_iterations=0), dict(tol_gap=0), dict(step_fraction=1.0)):
        with pytest.raises(ValueError):
            SolverSettings(**bad)


@pytest.fixture(scope="module")
def two_bus_program():
    case, cfg = load_study("case2flex.m", "flex2.cfg")
    return assemble(augment(case, cfg.epsilon), FormulationOptions(wq=cfg.wq))


@pytest.fixture(scope="module")
def three_bus_program():
    case, cfg = load_study("case3tri.m", "flex3.cfg")
    return assemble(augment(case, cfg.epsilon))


@pytest.mark.parametrize("name", ["two_bus_program", "three_bus_program"])
def test_iterate_properties(request, name):
    prog = request.getfixturevalue(name)
    sol = conic.solve(prog)
    assert sol.optimal
    # weak duality along the path (objectives in the scaled problem units)
    for h in sol.history:
        assert h["pobj"] >= h["dobj"] - 1e-6 * max(1.0, abs(h["pobj"]))
    merit = [max(h["gap"], h["pres"], h["dres"]) for h in sol.history]
    assert merit[min(20, len(merit) - 1)] < merit[1]
    W = sol.W
    assert np.linalg.eigvalsh(W).min() >= -1e-7 * np.trace(W).real
    assert max(sol.residuals.values()) <= 1e-8


def test_objective_scaling_keeps_argmin(three_bus_program):
    prog = three_bus_program
    # t >= 10 f(P) is the epigraph of the scaled cost
    scaled = dataclasses.replace(
        prog, objective={k: 10 * v for k, v in prog.objective.items()},
        objective_constant=10 * prog.objective_constant,
        epigraphs=[dataclasses.replace(e, a=10 * e.a, b=10 * e.b, c=10 * e.c) for e in prog.epigraphs])
    a, b = conic.solve(prog), conic.solve(scaled)
    assert b.primal_objective == pytest.approx(10 * a.primal_objective, rel=1e-7)
    gens = prog.gen_P
    assert b.scalars[gens] == pytest.approx(a.scalars[gens], abs=1e-6)


def test_deterministic_logs(two_bus_program):
    a, b = conic.solve(two_bus_program), conic.solve(two_bus_program)
    assert "\n".join(a.log).encode() == "\n".join(b.log).encode()
    assert np.array_equal(a.W, b.W)


def test_log_line_format(two_bus_program):
    line = conic.solve(two_bus_program).log[3]
    assert int(line.split()[0]) == 3
    assert re.findall(r"(\w+)=", line) == ["pobj", "dobj", "gap", "pres", "dres", "ap", "ad", "sigma"]


def test_internal_backend_aliases_solve(two_bus_program):
    a = conic.solve(two_bus_program)
    b = solve_via_backend(two_bus_program, "internal")
    assert a.primal_objective == b.primal_objective
    assert np.array_equal(a.W, b.W)


def test_unknown_backend_lists_registered(two_bus_program):
    with pytest.raises(KeyError, match="internal"):
        solve_via_backend(two_bus_program, "nope")


def test_external_backend_agrees(two_bus_program):
    pytest.importorskip("clarabel")
    objs, agree = conic.compare_backends(two_bus_program, rtol=1e-6)
    assert agree, objs
    assert objs["clarabel"] == pytest.approx(objs["internal"], rel=1e-6)
