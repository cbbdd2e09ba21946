"""Transformer-pair equivalent of flexible-impedance lines.

A line whose series admittance is ``k * y_rated`` carries the same terminal
flows as a constant ``y_rated`` line between two ideal transformers of ratio
``sqrt(k)``.  For the convex relaxation each transformer is made slightly
non-ideal by a coupling conductance ``eps * |b_rated|`` between its primary
and secondary buses.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass

import numpy as np

from .network import NetworkCase


@dataclass(frozen=True)
class AugBranch:
    a: int  # augmented bus index (flow sending end used for limits)
    b: int
    y: complex  # series admittance
    kind: str  # "constant" | "coupling" | "core"
    source: int  # branch index in the base case
    flow_limit: float = math.inf


@dataclass(frozen=True)
class AugmentedNetwork:
    case: NetworkCase
    epsilon: float
    labels: tuple[str, ...]
    shunts: tuple[complex, ...]  # y_io per augmented bus
    branches: tuple[AugBranch, ...]
    # flex line l -> (i, j, i_j, j_i) augmented indices
    flex_nodes: tuple[tuple[int, int, int, int], ...]

    @property
    def n_orig(self) -> int:
        return self.case.n_bus

    @property
    def size(self) -> int:
        return len(self.labels)

    def secondary(self, line: int, side: str) -> int:
        i, j, ij, ji = self.flex_nodes[line]
        return ij if side == "i" else ji

    def of_kind(self, kind: str) -> list[AugBranch]:
        return [br for br in self.branches if br.kind == kind]


def augment(case: NetworkCase, epsilon: float = 0.04) -> AugmentedNetwork:
    """Build the augmented network with ``n + 2f`` buses."""
    if not epsilon > 0:
        raise ValueError("epsilon must be positive; the ideal transformer limit is not usable here")
    idx = case.bus_index()
    n = case.n_bus
    labels = [str(b.id) for b in case.buses]
    shunts = [complex(b.shunt_g, b.shunt_b) for b in case.buses] + [0j] * (2 * len(case.flex_lines))
    flex_by_branch = {fl.branch_index: l for l, fl in enumerate(case.flex_lines)}

    branches: list[AugBranch] = []
    flex_nodes = []
    for k, br in case.active_branches():
        i, j = idx[br.from_bus], idx[br.to_bus]
        sh_f, sh_t = br.terminal_shunts()
        shunts[i] += sh_f
        shunts[j] += sh_t
        if k not in flex_by_branch:
            branches.append(AugBranch(i, j, br.admittance, "constant", k, br.P_flow_max))
    for l, fl in enumerate(case.flex_lines):
        br = case.branches[fl.branch_index]
        i, j = idx[fl.from_bus], idx[fl.to_bus]
        ij, ji = n + 2 * l, n + 2 * l + 1
        tag = "" if fl.circuit == 1 else f"#{fl.circuit}"
        labels += [f"{fl.from_bus}>{fl.to_bus}{tag}", f"{fl.to_bus}>{fl.from_bus}{tag}"]
        flex_nodes.append((i, j, ij, ji))
        g_c = epsilon * abs(fl.b_rated)
        branches.append(AugBranch(i, ij, complex(g_c, 0.0), "coupling", fl.branch_index))
        branches.append(AugBranch(j, ji, complex(g_c, 0.0), "coupling", fl.branch_index))
        branches.append(AugBranch(ij, ji, fl.rated_admittance, "core", fl.branch_index, br.P_flow_max))
    return AugmentedNetwork(case=case, epsilon=epsilon, labels=tuple(labels),
                            shunts=tuple(shunts), branches=tuple(branches),
                            flex_nodes=tuple(flex_nodes))


def flexible_line_flow(V_i: complex, V_j: complex, k: float, b_rated: float,
                       g_rated: float = 0.0) -> tuple[complex, complex]:
    """Sending-end complex flows of a line with admittance ``k*(g + jb)``."""
    yc = k * complex(g_rated, -b_rated)
    return (yc * V_i * (V_i.conjugate() - V_j.conjugate()),
            yc * V_j * (V_j.conjugate() - V_i.conjugate()))


def transformer_pair_flow(V_i: complex, V_j: complex, k: float, b_rated: float,
                          epsilon: float, g_rated: float = 0.0) -> tuple[complex, complex, float]:
    """Terminal injections of the (non-ideal) transformer-pair circuit.

    Returns ``(S_ij, S_ji, loss)`` where ``loss`` is the active power burnt in
    the two coupling conductances.
    """
    r = math.sqrt(k)
    V_ij, V_ji = r * V_i, r * V_j
    g_c = epsilon * abs(b_rated)
    yc = complex(g_rated, -b_rated)
    # power entering each secondary bus through its ideal transformer
    S_sec_i = g_c * V_ij * (V_ij - V_i).conjugate() + yc * V_ij * (V_ij - V_ji).conjugate()
    S_sec_j = g_c * V_ji * (V_ji - V_j).conjugate() + yc * V_ji * (V_ji - V_ij).conjugate()
    S_ij = S_sec_i + g_c * V_i * (V_i - V_ij).conjugate()
    S_ji = S_sec_j + g_c * V_j * (V_j - V_ji).conjugate()
    loss = g_c * (abs(V_i - V_ij) ** 2 + abs(V_j - V_ji) ** 2)
    return S_ij, S_ji, loss


@dataclass(frozen=True)
class TapCheck:
    holds: bool
    clause: str | None = None  # first violated clause (the witness)
    residual: float = 0.0
    violated: tuple[str, ...] = ()

    def __bool__(self):
        return self.holds


def check_tap_constraints(V_i: complex, V_j: complex, V_ij: complex, V_ji: complex,
                          k_min: float, k_max: float, tol: float = 1e-9) -> TapCheck:
    """Check that secondaries are consistent with one shared tap ratio.

    Clauses are tested in order; the first violated one is the witness and
    ``violated`` lists all of them.
    """
    a_i, a_j = abs(V_i) ** 2, abs(V_j) ** 2
    s_i, s_j = abs(V_ij) ** 2, abs(V_ji) ** 2
    p_i = V_i * V_ij.conjugate()
    p_j = V_j * V_ji.conjugate()
    clauses = [
        ("range_i", max(k_min * a_i - s_i, s_i - k_max * a_i)),
        ("range_j", max(k_min * a_j - s_j, s_j - k_max * a_j)),
        ("cross", abs(V_ij * V_j.conjugate() - V_i * V_ji.conjugate())),
        ("imag", max(abs(p_i.imag), abs(p_j.imag))),
        ("real", max(-p_i.real, -p_j.real)),
    ]
    bad = [(name, viol) for name, viol in clauses if viol > tol]
    if bad:
        return TapCheck(False, bad[0][0], bad[0][1], tuple(name for name, _ in bad))
    return TapCheck(True)


def tap_ratio_from_secondaries(V_i: complex, V_ij: complex) -> float:
    return abs(V_ij) ** 2 / abs(V_i) ** 2


def secondary_voltages(V: np.ndarray, case: NetworkCase, k: dict[int, float] | list[float]) -> np.ndarray:
    """Extend original-bus voltages with tap-consistent secondary entries."""
    idx = case.bus_index()
    extra = []
    for l, fl in enumerate(case.flex_lines):
        r = math.sqrt(k[l])
        extra += [r * V[idx[fl.from_bus]], r * V[idx[fl.to_bus]]]
    return np.concatenate([np.asarray(V, dtype=complex), np.asarray(extra, dtype=complex)])


def dump_augmented(aug: AugmentedNetwork) -> str:
    """Tab-separated listing of augmented buses and branches."""
    out = ["# buses: index\tlabel\tshunt_g\tshunt_b"]
    for a, (lab, sh) in enumerate(zip(aug.labels, aug.shunts)):
        out.append(f"{a}\t{lab}\t{sh.real:.10g}\t{sh.imag:.10g}")
    out.append("# branches: from\tto\tkind\tg\tb\tflow_limit\tsource")
    for br in aug.branches:
        lim = "inf" if math.isinf(br.flow_limit) else f"{br.flow_limit:.10g}"
        out.append(f"{aug.labels[br.a]}\t{aug.labels[br.b]}\t{br.kind}\t{br.y.real:.10g}\t"
                   f"{br.y.imag:.10g}\t{lim}\t{br.source}")
    return "\n".join(out) + "\n"


def polar(mag: float, deg: float) -> complex:
    return cmath.rect(mag, math.radians(deg))
