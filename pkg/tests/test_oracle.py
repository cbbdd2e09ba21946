import cmath
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import DATA, load_study
from flexopf.network import CaseError, load_case, parse_flex_config, parse_matpower_case, prepare_case
from flexopf.oracle import (GridSpec, brute_force_opf, epsilon_attribution, evaluate_acopf_point,
                            evaluate_augmented_point)
from flexopf.transform import secondary_voltages

IDLE_CASE = """
mpc.baseMVA = 100;
mpc.bus = [
  1 3 0 0 0 0 1 1 0 230 1 1.05 0.95;
  2 2 0 0 0 0 1 1 0 230 1 1.05 0.95;
  3 1 0 0 0 0 1 1 0 230 1 1.05 0.95;
];
mpc.gen = [
  1 0 0 50 -50 1 100 1 200 0;
  2 0 0 50 -50 1 100 1 100 0;
];
mpc.branch = [
  1 2 0.01 0.1 0 0 0 0 0 0 1;
  2 3 0.01 0.1 0 0 0 0 0 0 1;
];
mpc.gencost = [
  2 0 0 3 0.01 20 7.5;
  2 0 0 3 0.02 30 2.5;
];
"""


def test_flat_start_is_balanced():
    case = parse_matpower_case(IDLE_CASE)
    rep = evaluate_acopf_point(case, np.ones(3), np.zeros(2), np.zeros(2))
    assert rep.max_mismatch == 0 and rep.mean_mismatch == 0
    assert rep.worst_constraint[1] <= 0


def test_dimension_check():
    case = parse_matpower_case(IDLE_CASE)
    with pytest.raises(ValueError):
        evaluate_acopf_point(case, np.ones(2), np.zeros(2), np.zeros(2))


def test_perturbation_is_local():
    case = load_case(DATA / "case118.m")
    rng = np.random.default_rng(0)
    V = rng.uniform(0.98, 1.02, case.n_bus) * np.exp(1j * rng.uniform(-0.2, 0.2, case.n_bus))
    ng = len(case.generators)
    base = evaluate_acopf_point(case, V, np.zeros(ng), np.zeros(ng)).mismatch
    idx = case.bus_index()
    b = idx[49]
    V2 = V.copy()
    V2[b] += 0.01
    moved = np.abs(evaluate_acopf_point(case, V2, np.zeros(ng), np.zeros(ng)).mismatch - base) > 0
    neighbours = {b}
    for _, br in case.active_branches():
        if b in (idx[br.from_bus], idx[br.to_bus]):
            neighbours |= {idx[br.from_bus], idx[br.to_bus]}
    assert moved[b]
    assert set(np.flatnonzero(moved)) <= neighbours


def test_limit_slack_names():
    case, _ = load_study("case3tri.m", "flex3.cfg")
    rep = evaluate_acopf_point(case, np.ones(3), np.zeros(3), np.zeros(3), [1.0])
    assert {"V@2:min", "P_G0@1:max", "Q_G2@3:min", "k@1-3:max"} <= set(rep.slacks)
    assert any(name.startswith("flow0:1-2") for name in rep.slacks)


@settings(max_examples=300, deadline=None)
@given(m2=st.floats(0.95, 1.05), m3=st.floats(0.95, 1.05), a2=st.floats(-20, 20), a3=st.floats(-20, 20),
       k=st.floats(0.8, 2.0), p=st.floats(0, 1), q=st.floats(-0.3, 0.3))
def test_transformer_equivalence(m2, m3, a2, a3, k, p, q):
    case, _ = load_study("case3tri.m", "flex3.cfg")
    V = np.array([1.0, cmath.rect(m2, math.radians(a2)), cmath.rect(m3, math.radians(a3))])
    P, Q = np.full(3, p), np.full(3, q)
    direct = evaluate_acopf_point(case, V, P, Q, [k])
    pair = evaluate_augmented_point(case, secondary_voltages(V, case, [k]), P, Q, epsilon=0.0)
    assert np.abs(direct.mismatch - pair.mismatch).max() <= 1e-10
    for name, slack in direct.slacks.items():
        assert pair.slacks[name] == pytest.approx(slack, abs=1e-10)
    assert pair.slacks["tap@1-3"] >= -1e-12


@settings(max_examples=200, deadline=None)
@given(m2=st.floats(0.95, 1.05), a2=st.floats(-30, 0), k=st.floats(0.8, 2.0), eps=st.floats(0.001, 0.1))
def test_attribution_closes_the_books(m2, a2, k, eps):
    case, _ = load_study("case2flex.m", "flex2.cfg")
    V = np.array([1.0, cmath.rect(m2, math.radians(a2))])
    P, Q = np.array([0.5, 0.3]), np.array([0.1, 0.0])
    original = evaluate_acopf_point(case, V, P, Q, [k])
    augmented = evaluate_augmented_point(case, secondary_voltages(V, case, [k]), P, Q, epsilon=eps)
    attribution = epsilon_attribution(case, V, [k], eps)
    assert np.abs(original.mismatch - (augmented.mismatch + attribution)).max() <= 1e-12
    assert np.all(attribution.imag == 0) and np.all(attribution.real >= 0)
    # the compact form used by the grid oracle agrees with explicit secondaries
    compact = evaluate_acopf_point(case, V, P, Q, [k], epsilon=eps)
    assert np.abs(compact.mismatch - augmented.mismatch).max() <= 1e-12


def test_idle_case_costs_constant_terms():
    case = parse_matpower_case(IDLE_CASE)
    res = brute_force_opf(case, GridSpec(dv=0.05, dtheta_deg=1.0, theta_span_deg=5.0))
    assert res.cost == pytest.approx(7.5 + 2.5, abs=1e-9)
    assert res.P_G == pytest.approx([0, 0], abs=1e-12)


def test_idle_case_all_ratios_feasible():
    idle = parse_matpower_case(IDLE_CASE.replace("1 2 0.01 0.1", "1 2 0 1.0"))
    idle = prepare_case(idle, parse_flex_config("[lines]\n1 2 0.8 2.0\n", idle))
    res = brute_force_opf(idle, GridSpec(dv=0.05, dtheta_deg=1.0, theta_span_deg=5.0, dk=0.1))
    kv, land = res.k_landscape
    assert kv.size == 13
    assert land == pytest.approx(np.full(kv.size, 10.0), abs=1e-9)


def test_congestion_relief_landscape():
    case, _ = load_study("case2flex.m", "flex2.cfg")
    res = brute_force_opf(case, GridSpec(dv=0.001, dtheta_deg=0.1, dk=0.02))
    kv, land = res.k_landscape
    congested = kv <= 1.9 + 1e-9
    assert np.all(np.diff(land[congested]) < 0)
    assert res.k[0] >= 1.88
    assert res.cost == pytest.approx(800.0639092035343, rel=1e-12)


def test_oracle_limits():
    case, _ = load_study("case118.m", "flex118.cfg")
    with pytest.raises(CaseError, match="4 buses"):
        brute_force_opf(case)
    with pytest.raises(ValueError):
        GridSpec(dv=0)


def test_oracle_regressions(oracle2, oracle3):
    assert oracle2.cost == pytest.approx(811.4416333957706, rel=1e-12)
    assert oracle2.k == pytest.approx([1.92])
    assert oracle3.cost == pytest.approx(1620.86, abs=0.01)


def test_oracle_above_relaxation(study2, study3, oracle2, oracle3):
    assert oracle2.cost >= study2.relaxed.cost
    assert oracle3.cost >= study3.relaxed.cost
    # the oracle point is feasible, so it cannot beat the true optimum and
    # the certified bound must cover penalized / oracle
    for study, oracle in ((study2, oracle2), (study3, oracle3)):
        assert study.gap >= study.penalized.cost / oracle.cost
