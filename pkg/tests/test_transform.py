import cmath
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import DATA
from flexopf.network import load_case, parse_flex_config, parse_matpower_case, prepare_case, with_flex_lines
from flexopf.transform import (augment, check_tap_constraints, dump_augmented, flexible_line_flow, polar,
                               secondary_voltages, tap_ratio_from_secondaries, transformer_pair_flow)

mags = st.floats(0.5, 1.5)
angles = st.floats(-math.pi, math.pi)
ratios = st.floats(0.5, 4.0)
susceptances = st.floats(-50.0, -0.01)


def test_flat_voltages_carry_nothing():
    assert flexible_line_flow(1 + 0j, 1 + 0j, 2.3, -4.0) == (0j, 0j)


def test_in_phase_drop_is_reactive():
    s_ij, _ = flexible_line_flow(1 + 0j, 0.9 + 0j, 1.0, -1.0)
    assert s_ij == pytest.approx(0.1j, abs=1e-15)


@settings(max_examples=1000, deadline=None)
@given(mi=mags, mj=mags, ai=angles, aj=angles, k=ratios, b=susceptances)
def test_pair_equals_flexible_line_at_zero_epsilon(mi, mj, ai, aj, k, b):
    Vi, Vj = cmath.rect(mi, ai), cmath.rect(mj, aj)
    direct = flexible_line_flow(Vi, Vj, k, b)
    s_ij, s_ji, loss = transformer_pair_flow(Vi, Vj, k, b, 0.0)
    assert abs(s_ij - direct[0]) <= 1e-12 * max(1.0, abs(b) * k)
    assert abs(s_ji - direct[1]) <= 1e-12 * max(1.0, abs(b) * k)
    assert loss == 0
    assert abs(s_ij.real + s_ji.real) <= 1e-12 * max(1.0, abs(b) * k)


@settings(max_examples=300, deadline=None)
@given(mi=mags, mj=mags, ai=angles, aj=angles, k=ratios, b=susceptances, eps=st.floats(1e-3, 0.1))
def test_fictitious_loss_formula(mi, mj, ai, aj, k, b, eps):
    Vi, Vj = cmath.rect(mi, ai), cmath.rect(mj, aj)
    s_ij, s_ji, loss = transformer_pair_flow(Vi, Vj, k, b, eps)
    r = math.sqrt(k)
    expected = eps * abs(b) * (abs(Vi - r * Vi) ** 2 + abs(Vj - r * Vj) ** 2)
    assert loss == pytest.approx(expected, rel=1e-12, abs=1e-15)
    assert loss >= 0
    # the lossless core means the only active loss is in the couplings
    assert s_ij.real + s_ji.real == pytest.approx(loss, rel=1e-9, abs=1e-12)


def test_unit_ratio_coupling_idle():
    Vi, Vj = polar(1.02, 3), polar(0.97, -7)
    with_eps = transformer_pair_flow(Vi, Vj, 1.0, -5.0, 0.04)
    assert with_eps[2] == 0
    assert with_eps[:2] == pytest.approx(flexible_line_flow(Vi, Vj, 1.0, -5.0))


def test_loss_regression():
    loss = transformer_pair_flow(polar(1, 0), polar(1, -10), 1.256, -12.5, 0.04)[2]
    assert loss == pytest.approx(0.014571883820495988, rel=1e-12)


def test_augment_two_bus():
    case = parse_matpower_case("""
mpc.baseMVA = 100;
mpc.bus = [1 3 0 0 0 0 1 1 0 1 1 1.1 0.9; 2 1 50 0 0 0 1 1 0 1 1 1.1 0.9];
mpc.gen = [1 0 0 1 -1 1 100 1 200 0];
mpc.branch = [1 2 0 0.1 0 0 0 0 0 0 1];
""")
    cfg = parse_flex_config("[lines]\n1 2 0.8 2\n", case)
    aug = augment(prepare_case(case, cfg), 0.04)
    assert aug.size == 4
    kinds = sorted(br.kind for br in aug.branches)
    assert kinds == ["core", "coupling", "coupling"]
    for br in aug.of_kind("coupling"):
        assert br.y == pytest.approx(0.4) and br.y.imag == 0
    assert aug.of_kind("core")[0].y == pytest.approx(-10j)
    assert "coupling" in dump_augmented(aug)


def test_augment_118_sizes():
    case = load_case(DATA / "case118.m")
    five = parse_flex_config("[lines]\n23 25 0.8 3\n25 27 0.8 3\n42 49 0.8 3 1\n47 69 0.8 3\n100 106 0.8 3\n", case)
    assert augment(prepare_case(case, five)).size == 128
    both = parse_flex_config((DATA / "flex118.cfg").read_text(), case)
    assert augment(prepare_case(case, both)).size == 130
    plain = augment(case)
    assert plain.size == 118 and not plain.of_kind("coupling")
    assert len(plain.of_kind("constant")) == 186


def test_augment_rejects_nonpositive_epsilon():
    case = load_case(DATA / "case2flex.m")
    with pytest.raises(ValueError):
        augment(case, 0.0)


def test_core_admittance_independent_of_k():
    case = load_case(DATA / "case2flex.m")
    a = with_flex_lines(case, parse_flex_config("[lines]\n1 2 0.8 2\n", case).lines)
    b = with_flex_lines(case, parse_flex_config("[lines]\n1 2 0.5 3\n", case).lines)
    assert augment(a).of_kind("core")[0].y == augment(b).of_kind("core")[0].y


# --- tap-pair constraints ----------------------------------------------------

def test_tap_constraints_hold_for_consistent_pair():
    Vi, Vj = polar(1.01, 4), polar(0.98, -3)
    r = math.sqrt(1.7)
    assert check_tap_constraints(Vi, Vj, r * Vi, r * Vj, 0.8, 3.0)


def test_phase_shifted_secondary_violates_imag_clause():
    Vi, Vj = polar(1.01, 4), polar(0.98, -3)
    r = math.sqrt(1.7)
    res = check_tap_constraints(Vi, Vj, r * Vi * cmath.exp(0.1j), r * Vj, 0.8, 3.0)
    assert not res and "imag" in res.violated
    # rotating the two secondaries oppositely keeps the cross equality, so imag is the witness
    res = check_tap_constraints(Vi, Vj, r * Vi * cmath.exp(0.1j), r * Vj * cmath.exp(-0.1j), 0.8, 3.0)
    assert res.clause == "imag" and res.violated == ("imag",)


@settings(max_examples=1000, deadline=None)
@given(mi=mags, mj=mags, ai=angles, aj=angles, k=st.floats(0.8, 3.0))
def test_necessity(mi, mj, ai, aj, k):
    Vi, Vj = cmath.rect(mi, ai), cmath.rect(mj, aj)
    assert check_tap_constraints(Vi, Vj, math.sqrt(k) * Vi, math.sqrt(k) * Vj, 0.8, 3.0)


@settings(max_examples=1000, deadline=None)
@given(mi=mags, mj=mags, ai=angles, aj=angles, k=st.floats(0.8, 3.0), phase=angles)
def test_sufficiency(mi, mj, ai, aj, k, phase):
    # sample the constraint set directly: a real positive ratio on the i side,
    # with the j side fixed by the cross equality
    Vi, Vj = cmath.rect(mi, ai), cmath.rect(mj, aj)
    Vij = math.sqrt(k) * Vi
    Vji = (Vij * Vj.conjugate() / Vi).conjugate()
    assert check_tap_constraints(Vi, Vj, Vij, Vji, 0.8, 3.0)
    k_rec = tap_ratio_from_secondaries(Vi, Vij)
    assert abs(Vji - math.sqrt(k_rec) * Vj) <= 1e-9
    assert abs(Vij - math.sqrt(k_rec) * Vi) <= 1e-9


@pytest.mark.parametrize("clause", ["range_i", "range_j", "cross", "imag", "real"])
def test_each_clause_detects_perturbation(clause):
    Vi, Vj = polar(1.0, 5), polar(0.99, -2)
    r = math.sqrt(1.5)
    Vij, Vji = r * Vi, r * Vj
    kmin, kmax = 0.8, 3.0
    if clause == "range_i":
        Vij, Vji = 2.0 * Vi, 2.0 * Vj
    elif clause == "range_j":
        kmin, kmax = 1.4, 1.6
        Vji = 1.05 * r * Vj
    elif clause == "cross":
        Vji = r * Vj * 1.001
    elif clause == "imag":
        Vij, Vji = Vij * cmath.exp(0.01j), Vji * cmath.exp(-0.01j)
    elif clause == "real":
        Vij, Vji = -Vij, -Vji
    res = check_tap_constraints(Vi, Vj, Vij, Vji, kmin, kmax)
    assert not res
    assert res.clause == clause


def test_secondary_voltages_appends_scaled_entries():
    case = load_case(DATA / "case2flex.m")
    case = with_flex_lines(case, parse_flex_config("[lines]\n1 2 0.8 2\n", case).lines)
    V = np.array([1.0, polar(0.98, -10)])
    full = secondary_voltages(V, case, [1.44])
    assert full[2:] == pytest.approx(1.2 * V)
