import dataclasses
import math

import pytest
from hypothesis import given, settings, strategies as st

from conftest import DATA, TWO_BUS_TEXT
from flexopf.network import (Branch, CaseError, CaseModifications, FlexLineSpec, apply_case_modifications,
                             conventional_case, load_case, parse_flex_config, parse_matpower_case,
                             prepare_case, with_flex_lines, write_matpower_case)


@pytest.fixture(scope="module")
def case118():
    return load_case(DATA / "case118.m")


def test_two_bus_parse():
    case = parse_matpower_case(TWO_BUS_TEXT)
    assert case.n_bus == 2 and len(case.branches) == 1
    assert case.branches[0].series_b == pytest.approx(-10.0, abs=1e-12)
    assert case.branches[0].series_g == 0
    assert case.buses[1].P_load == pytest.approx(0.5)
    assert case.generators[0].cost_c2 == 0.01 and case.generators[0].cost_c1 == 40


def test_118_counts(case118):
    assert case118.n_bus == 118
    assert len(case118.active_branches()) == 186
    condensers = [g for g in case118.generators if g.P_min == 0 and g.P_max == 0]
    assert len(condensers) == 35


def test_118_flex_susceptances(case118):
    cfg = parse_flex_config((DATA / "flex118.cfg").read_text(), case118)
    case = prepare_case(case118, cfg)
    by_line = {}
    for fl in case.flex_lines:
        by_line.setdefault(fl.key, -fl.b_rated)
    got = [round(by_line[k], 3) for k in [(23, 25), (25, 27), (42, 49), (47, 69), (100, 106)]]
    assert got == [12.5, 6.135, 3.096, 3.6, 4.367]
    assert all(fl.k_min == 0.8 and fl.k_max == 3.0 for fl in case.flex_lines)
    assert all(br.P_flow_max == 2.0 for _, br in case.active_branches())
    assert all(case.branches[fl.branch_index].r == 0 for fl in case.flex_lines)
    g0 = case118.generators[0]
    assert case.generators[0].P_max == pytest.approx(2 * g0.P_max)


def test_double_circuit_expands_without_circuit_column(case118):
    text = "[lines]\n42 49 0.8 3.0\n"
    specs = parse_flex_config(text, case118).lines
    assert [fl.circuit for fl in specs] == [1, 2]
    assert len({fl.branch_index for fl in specs}) == 2
    pinned = parse_flex_config("[lines]\n42 49 0.8 3.0 1\n", case118).lines
    assert len(pinned) == 1


def test_five_named_lines_with_circuit(case118):
    text = "[lines]\n23 25 0.8 3\n25 27 0.8 3\n42 49 0.8 3 1\n47 69 0.8 3\n100 106 0.8 3\n"
    assert len(parse_flex_config(text, case118).lines) == 5


def test_config_defaults_and_empty(case118):
    cfg = parse_flex_config("", case118)
    assert cfg.lines == () and cfg.epsilon == 0.04 and cfg.wq == 0.2
    assert cfg.modifications.is_identity


@pytest.mark.parametrize("text, message", [
    ("[lines]\n23 25 1.2 3.0\n", "k_min <= 1"),
    ("[lines]\n23 25 2.0 1.5\n", "k_min > k_max"),
    ("[lines]\n23 25 0 3.0\n", "k_min must be positive"),
    ("[lines]\n1 118 0.8 3.0\n", "does not match"),
    ("bogus = 3\n", "unknown config options"),
    ("[lines]\n23 25 0.8 3.0\n23 25 0.8 3.0\n", "twice"),
])
def test_config_errors(case118, text, message):
    with pytest.raises(CaseError, match=message):
        parse_flex_config(text, case118)


@pytest.mark.parametrize("text, message", [
    ("mpc.bus = [];", "baseMVA"),
    (TWO_BUS_TEXT.replace("1 2 0 0.1 0", "1 2 0 0 0"), "zero impedance"),
    (TWO_BUS_TEXT.replace("2 1 50 0 0 0 1 1 0 230 1 1.1 0.9;", "2 1 50 0 0 0 1 1 0 230 1;"), "bus row 2"),
    (TWO_BUS_TEXT.replace("  2 1 50", "  1 1 50"), "duplicate bus"),
    (TWO_BUS_TEXT.replace("1 2 0 0.1", "1 3 0 0.1"), "unknown bus 3"),
])
def test_case_errors(text, message):
    with pytest.raises(CaseError, match=message):
        parse_matpower_case(text)


def test_round_trip_118(case118):
    assert parse_matpower_case(write_matpower_case(case118), name=case118.name) == case118


def test_identity_modifications(case118):
    assert apply_case_modifications(case118, CaseModifications()) == case118


def test_modifications_leave_input_unchanged_and_are_idempotent(case118):
    cfg = parse_flex_config((DATA / "flex118.cfg").read_text(), case118)
    flexed = with_flex_lines(case118, cfg.lines)
    mods = dataclasses.replace(cfg.modifications, pmax_scale=1.0, flow_limit=1.9)
    once = apply_case_modifications(flexed, mods)
    assert apply_case_modifications(once, mods) == once
    assert flexed.branches[0].P_flow_max == math.inf
    assert all(br.P_flow_max == 1.9 for _, br in once.active_branches())


def test_conventional_case_uses_rated_admittance(case118):
    cfg = parse_flex_config((DATA / "flex118.cfg").read_text(), case118)
    case = prepare_case(case118, cfg)
    conv = conventional_case(case)
    assert conv.flex_lines == ()
    for fl in case.flex_lines:
        assert conv.branches[fl.branch_index].admittance == pytest.approx(complex(0, fl.b_rated))


def test_flex_spec_invariants():
    with pytest.raises(CaseError):
        FlexLineSpec(1, 2, b_rated=1.0, k_min=0.8, k_max=2)
    with pytest.raises(CaseError):
        FlexLineSpec(1, 2, b_rated=-1.0, k_min=0.8, k_max=0.9)


@settings(max_examples=200, deadline=None)
@given(r=st.floats(0, 0.5), x=st.floats(1e-3, 2.0), sign=st.sampled_from([1, -1]))
def test_admittance_inverts_impedance(r, x, sign):
    br = Branch(1, 2, r=r, x=sign * x)
    assert abs(br.admittance * complex(r, sign * x) - 1) <= 1e-12


def test_tap_folded_into_pi_model():
    br = Branch(1, 2, r=0.01, x=0.1, charging_b=0.2, tap=1.05)
    y = 1 / complex(0.01, 0.1)
    sh_f, sh_t = br.terminal_shunts()
    # the from-end self admittance equals MATPOWER's (y + j b/2) / t^2
    assert br.admittance + sh_f == pytest.approx((y + 0.1j) / 1.05**2)
    assert br.admittance + sh_t == pytest.approx(y + 0.1j)


def test_phase_shifter_rejected():
    text = TWO_BUS_TEXT.replace("1 2 0 0.1 0 0 0 0 0 0 1", "1 2 0 0.1 0 0 0 0 1 5 1")
    with pytest.raises(CaseError, match="phase-shifting"):
        parse_matpower_case(text)
