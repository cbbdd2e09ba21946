"""Formulation-free checks of candidate OPF points and a grid-search oracle.

Nothing here reads the conic program.  Power flows are recomputed from the
branch data, so the pi-model and transformer-pair formulas are deliberately
duplicated rather than imported.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .network import CaseError, NetworkCase


@dataclass(frozen=True)
class ResidualReport:
    bus_labels: tuple[str, ...]
    mismatch: np.ndarray  # complex, generation - load - network injection (p.u.)
    slacks: dict[str, float]  # >= 0 satisfied, < 0 violated by that amount
    epsilon: float = 0.0
    network: str = "original"  # or "augmented"

    @property
    def max_mismatch(self) -> float:
        return float(np.max(np.abs(self.mismatch))) if self.mismatch.size else 0.0

    @property
    def mean_mismatch(self) -> float:
        return float(np.mean(np.abs(self.mismatch))) if self.mismatch.size else 0.0

    @property
    def worst_bus(self) -> str | None:
        if not self.mismatch.size:
            return None
        return self.bus_labels[int(np.argmax(np.abs(self.mismatch)))]

    @property
    def worst_constraint(self) -> tuple[str | None, float]:
        """Most violated constraint and its violation (0 when all hold)."""
        if not self.slacks:
            return None, 0.0
        name = min(self.slacks, key=lambda s: (self.slacks[s], s))
        return name, max(0.0, -self.slacks[name])

    def passes(self, mismatch_tol: float, limit_tol: float) -> bool:
        return self.max_mismatch <= mismatch_tol and self.worst_constraint[1] <= limit_tol


# ---------------------------------------------------------------------------
# network injections, vectorised over the trailing axis
# ---------------------------------------------------------------------------

def _pi(r: float, x: float, charging: float, tap: float):
    ys = 1.0 / complex(r, x)
    half = 0.5j * charging
    return (ys + half) / tap**2, -ys / tap, -ys / tap, ys + half


def _injections(case: NetworkCase, V: np.ndarray, k: np.ndarray, epsilon: float):
    """Complex bus injections ``V * conj(I)`` and sending-end active flows.

    ``V`` has shape ``(n, P)``, ``k`` ``(f, P)``.  Flex lines carry
    ``k * y_rated`` in series; with ``epsilon > 0`` they are evaluated as the
    non-ideal transformer pair with secondaries at ``sqrt(k) * V``.
    """
    idx = case.bus_index()
    I = np.zeros_like(V)
    flows = {}
    flex = {fl.branch_index: (l, fl) for l, fl in enumerate(case.flex_lines)}
    for bi, br in enumerate(case.branches):
        if not br.in_service:
            continue
        f, t = idx[br.from_bus], idx[br.to_bus]
        Vf, Vt = V[f], V[t]
        if bi not in flex:
            yff, yft, ytf, ytt = _pi(br.r, br.x, br.charging_b, br.tap)
            I[f] += yff * Vf + yft * Vt
            I[t] += ytf * Vf + ytt * Vt
            ys = 1.0 / complex(br.r, br.x) / br.tap
            pf = (Vf * np.conj(ys * (Vf - Vt))).real
            pt = (Vt * np.conj(ys * (Vt - Vf))).real
        else:
            l, fl = flex[bi]
            y = fl.rated_admittance
            half = 0.5j * br.charging_b
            I[f] += half * Vf
            I[t] += half * Vt
            if epsilon == 0:
                I[f] += k[l] * y * (Vf - Vt)
                I[t] += k[l] * y * (Vt - Vf)
            else:
                r = np.sqrt(k[l])
                gc = epsilon * abs(fl.b_rated)
                Vfs, Vts = r * Vf, r * Vt
                # current drawn by each secondary, referred to its primary
                Ifs = gc * (Vfs - Vf) + y * (Vfs - Vts)
                Its = gc * (Vts - Vt) + y * (Vts - Vfs)
                I[f] += r * Ifs + gc * (Vf - Vfs)
                I[t] += r * Its + gc * (Vt - Vts)
            pf = (Vf * np.conj(k[l] * y * (Vf - Vt))).real
            pt = (Vt * np.conj(k[l] * y * (Vt - Vf))).real
        flows[bi] = (pf, pt)
    return V * np.conj(I), flows


def _limit_slacks(case: NetworkCase, V, P_G, Q_G, k, flows, both_ends: bool) -> dict[str, float]:
    s: dict[str, float] = {}
    for g, gen in enumerate(case.generators):
        s[f"P_G{g}@{gen.bus}:min"] = P_G[g] - gen.P_min
        s[f"P_G{g}@{gen.bus}:max"] = gen.P_max - P_G[g]
        s[f"Q_G{g}@{gen.bus}:min"] = Q_G[g] - gen.Q_min
        s[f"Q_G{g}@{gen.bus}:max"] = gen.Q_max - Q_G[g]
    for i, bus in enumerate(case.buses):
        s[f"V@{bus.id}:min"] = abs(V[i]) - bus.V_min
        s[f"V@{bus.id}:max"] = bus.V_max - abs(V[i])
    for bi, (pf, pt) in flows.items():
        br = case.branches[bi]
        if math.isinf(br.P_flow_max):
            continue
        name = f"flow{bi}:{br.from_bus}-{br.to_bus}"
        s[name + ":from"] = br.P_flow_max - abs(float(pf))
        if both_ends:
            s[name + ":to"] = br.P_flow_max - abs(float(pt))
    for l, fl in enumerate(case.flex_lines):
        s[f"k@{fl.label}:min"] = k[l] - fl.k_min
        s[f"k@{fl.label}:max"] = fl.k_max - k[l]
    return {name: float(v) for name, v in s.items()}


def _net_generation(case: NetworkCase, P_G, Q_G) -> np.ndarray:
    idx = case.bus_index()
    out = np.array([-complex(b.P_load, b.Q_load) for b in case.buses])
    for g, gen in enumerate(case.generators):
        out[idx[gen.bus]] += complex(P_G[g], Q_G[g])
    return out


def _bus_shunt_injection(case: NetworkCase, V: np.ndarray) -> np.ndarray:
    ysh = np.array([complex(b.shunt_g, b.shunt_b) for b in case.buses])
    return V * np.conj(ysh * V)


def evaluate_acopf_point(case: NetworkCase, V, P_G, Q_G, k=None, *, epsilon: float = 0.0,
                         both_ends: bool = False) -> ResidualReport:
    """Power-balance mismatch and limit slacks of a candidate point (p.u.).

    With ``epsilon = 0`` this is the flexible-line OPF itself: flex line
    series admittance ``k * y_rated``.  With ``epsilon > 0`` the flex lines
    are evaluated as the non-ideal transformer pair the relaxation models.
    """
    V = np.asarray(V, dtype=complex)
    P_G = np.asarray(P_G, dtype=float)
    Q_G = np.asarray(Q_G, dtype=float)
    f = len(case.flex_lines)
    k = np.ones(f) if k is None else np.asarray(k, dtype=float)
    ng = len(case.generators)
    if V.shape != (case.n_bus,) or P_G.shape != (ng,) or Q_G.shape != (ng,) or k.shape != (f,):
        raise ValueError("point dimensions do not match the case")
    S, flows = _injections(case, V[:, None], k[:, None], epsilon)
    S = S[:, 0] + _bus_shunt_injection(case, V)
    flows = {bi: (pf[0], pt[0]) for bi, (pf, pt) in flows.items()}
    return ResidualReport(
        bus_labels=tuple(str(b.id) for b in case.buses),
        mismatch=_net_generation(case, P_G, Q_G) - S,
        slacks=_limit_slacks(case, V, P_G, Q_G, k, flows, both_ends),
        epsilon=epsilon,
        network="original" if epsilon == 0 else "augmented",
    )


def evaluate_augmented_point(case: NetworkCase, V_aug, P_G, Q_G, *, epsilon: float,
                             both_ends: bool = False, tap_tol: float = 0.0) -> ResidualReport:
    """Evaluate a point given on the augmented network with explicit secondaries.

    ``V_aug`` lists original buses followed by the secondary pair of each flex
    line (``i``-side then ``j``-side).  Each transformer is ideal between its
    primary and secondary, so the power it passes equals what the secondary
    delivers to the core line and coupling conductance.  Tap consistency of
    the two secondaries is reported as slack ``tap@<line>``.
    """
    V_aug = np.asarray(V_aug, dtype=complex)
    n, nf = case.n_bus, len(case.flex_lines)
    if V_aug.shape != (n + 2 * nf,):
        raise ValueError("augmented voltage vector has the wrong length")
    V = V_aug[:n]
    idx = case.bus_index()
    S = _bus_shunt_injection(case, V)
    flex = {fl.branch_index: l for l, fl in enumerate(case.flex_lines)}
    k = np.empty(nf)
    taps = {}
    flows = {}
    for bi, br in enumerate(case.branches):
        if not br.in_service:
            continue
        f, t = idx[br.from_bus], idx[br.to_bus]
        if bi not in flex:
            yff, yft, ytf, ytt = _pi(br.r, br.x, br.charging_b, br.tap)
            S[f] += V[f] * np.conj(yff * V[f] + yft * V[t])
            S[t] += V[t] * np.conj(ytf * V[f] + ytt * V[t])
            ys = 1.0 / complex(br.r, br.x) / br.tap
            flows[bi] = ((V[f] * np.conj(ys * (V[f] - V[t]))).real,
                         (V[t] * np.conj(ys * (V[t] - V[f]))).real)
            continue
        l = flex[bi]
        fl = case.flex_lines[l]
        y, gc = fl.rated_admittance, epsilon * abs(fl.b_rated)
        Vfs, Vts = V_aug[n + 2 * l], V_aug[n + 2 * l + 1]
        half = 0.5j * br.charging_b
        S[f] += V[f] * np.conj(half * V[f]) + V[f] * np.conj(gc * (V[f] - Vfs))
        S[t] += V[t] * np.conj(half * V[t]) + V[t] * np.conj(gc * (V[t] - Vts))
        # ideal transformer: primary passes what its secondary sends out
        S[f] += Vfs * np.conj(gc * (Vfs - V[f]) + y * (Vfs - Vts))
        S[t] += Vts * np.conj(gc * (Vts - V[t]) + y * (Vts - Vfs))
        ratio_f, ratio_t = Vfs / V[f], Vts / V[t]
        k[l] = abs(ratio_f) ** 2
        taps[l] = max(abs(ratio_f - ratio_t), abs(ratio_f.imag), abs(ratio_t.imag),
                      max(0.0, -ratio_f.real), max(0.0, -ratio_t.real))
        flows[bi] = ((Vfs * np.conj(y * (Vfs - Vts))).real, (Vts * np.conj(y * (Vts - Vfs))).real)
    slacks = _limit_slacks(case, V, np.asarray(P_G, float), np.asarray(Q_G, float), k, flows, both_ends)
    for l, fl in enumerate(case.flex_lines):
        slacks[f"tap@{fl.label}"] = tap_tol - taps[l]
    return ResidualReport(
        bus_labels=tuple(str(b.id) for b in case.buses),
        mismatch=_net_generation(case, P_G, Q_G) - S,
        slacks=slacks, epsilon=epsilon, network="augmented",
    )


def epsilon_attribution(case: NetworkCase, V, k, epsilon: float) -> np.ndarray:
    """Per-bus mismatch the coupling conductances explain when the point is evaluated as flexible lines.

    With tap-consistent secondaries each coupling conductance burns
    ``eps * |b_rated| * |V_i|**2 * (sqrt(k) - 1)**2`` of active power at its
    primary bus, so ``original.mismatch = augmented.mismatch + attribution``.
    """
    V = np.asarray(V, dtype=complex)
    idx = case.bus_index()
    out = np.zeros(case.n_bus, dtype=complex)
    for l, fl in enumerate(case.flex_lines):
        gc = epsilon * abs(fl.b_rated)
        for bus in fl.key:
            i = idx[bus]
            out[i] += gc * abs(V[i]) ** 2 * (math.sqrt(k[l]) - 1.0) ** 2
    return out


# ---------------------------------------------------------------------------
# grid-search oracle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    dv: float = 0.005  # p.u. voltage magnitude step
    dtheta_deg: float = 0.2
    dk: float = 0.01
    theta_span_deg: float = 60.0  # angles scanned in [-span, span] relative to slack
    chunk: int = 200_000

    def __post_init__(self):
        if min(self.dv, self.dtheta_deg, self.dk, self.theta_span_deg) <= 0 or self.chunk < 1:
            raise ValueError("grid steps and span must be positive")


@dataclass(frozen=True)
class OracleResult:
    cost: float  # $/h
    V: np.ndarray
    P_G: np.ndarray
    Q_G: np.ndarray
    k: np.ndarray
    n_points: int
    n_feasible: int
    delta_grid: float  # $/h, Lipschitz estimate of the discretisation error
    # min feasible cost for each grid value of the first flex line's ratio
    k_landscape: tuple[np.ndarray, np.ndarray] = field(default=(np.empty(0), np.empty(0)))


def _axis(lo: float, hi: float, step: float) -> np.ndarray:
    if hi - lo < 1e-12:
        return np.array([lo])
    n = int(math.floor((hi - lo) / step + 1e-9))
    vals = lo + step * np.arange(n + 1)
    if hi - vals[-1] > 1e-12:
        vals = np.append(vals, hi)
    return vals


def brute_force_opf(case: NetworkCase, grid: GridSpec = GridSpec(), *, epsilon: float = 0.0,
                    tol: float = 1e-3, limit_tol: float = 0.0,
                    both_ends: bool = False) -> OracleResult:
    """Exhaustive grid search for the cheapest feasible operating point.

    The scan runs over voltage magnitudes, angles relative to the slack bus,
    and flex ratios.  Dispatch follows from power balance at each generator
    bus; buses without a generator must balance within ``tol``.  Limits are
    applied with ``limit_tol`` (exact by default, which keeps the oracle an
    upper bound on the true optimum up to ``delta_grid``).  Ties go to the
    first point in lexicographic grid order.
    """
    n, nf = case.n_bus, len(case.flex_lines)
    if n > 4 or nf > 2:
        raise CaseError("brute force is limited to 4 buses and 2 flex lines")
    idx = case.bus_index()
    gen_at: dict[int, int] = {}
    for g, gen in enumerate(case.generators):
        if idx[gen.bus] in gen_at:
            raise CaseError("brute force needs at most one generator per bus")
        gen_at[idx[gen.bus]] = g
    slack = case.slack_index
    span = grid.theta_span_deg
    nth = int(math.floor(span / grid.dtheta_deg + 1e-9))
    theta = np.radians(grid.dtheta_deg * np.arange(-nth, nth + 1))
    axes = [_axis(b.V_min, b.V_max, grid.dv) for b in case.buses]
    ang_buses = [i for i in range(n) if i != slack]
    axes += [theta] * len(ang_buses)
    axes += [_axis(fl.k_min, fl.k_max, grid.dk) for fl in case.flex_lines]
    shape = tuple(a.size for a in axes)
    total = int(np.prod(shape))
    steps = [grid.dv] * n + [math.radians(grid.dtheta_deg)] * len(ang_buses) + [grid.dk] * nf

    load = np.array([complex(b.P_load, b.Q_load) for b in case.buses])
    ysh = np.array([complex(b.shunt_g, b.shunt_b) for b in case.buses])
    gens = case.generators
    base = case.base_mva
    kvals = axes[-nf] if nf else np.empty(0)
    landscape = np.full(kvals.size, np.inf)

    def evaluate(flat):
        coords = np.unravel_index(flat, shape)
        vals = [a[c] for a, c in zip(axes, coords)]
        mag = np.array(vals[:n])
        ang = np.zeros_like(mag)
        for t, i in enumerate(ang_buses):
            ang[i] = vals[n + t]
        V = mag * np.exp(1j * ang)
        k = np.array(vals[n + len(ang_buses):]) if nf else np.zeros((0, flat.size))
        S, flows = _injections(case, V, k, epsilon)
        S = S + V * np.conj(ysh[:, None] * V)
        need = S + load[:, None]
        ok = np.ones(flat.size, dtype=bool)
        cost = np.zeros(flat.size)
        P = np.zeros((len(gens), flat.size))
        Q = np.zeros_like(P)
        for i in range(n):
            if i in gen_at:
                g = gen_at[i]
                gen = gens[g]
                P[g], Q[g] = need[i].real, need[i].imag
                ok &= (P[g] >= gen.P_min - limit_tol) & (P[g] <= gen.P_max + limit_tol)
                ok &= (Q[g] >= gen.Q_min - limit_tol) & (Q[g] <= gen.Q_max + limit_tol)
                Pmw = P[g] * base
                cost += gen.cost_c2 * Pmw**2 + gen.cost_c1 * Pmw + gen.cost_c0
            else:
                ok &= np.abs(need[i]) <= tol
        for bi, (pf, pt) in flows.items():
            lim = case.branches[bi].P_flow_max
            if not math.isinf(lim):
                ok &= np.abs(pf) <= lim + limit_tol
                if both_ends:
                    ok &= np.abs(pt) <= lim + limit_tol
        return ok, cost, V, P, Q, k, coords

    best_cost, best_flat, n_feas = math.inf, -1, 0
    for start in range(0, total, grid.chunk):
        flat = np.arange(start, min(total, start + grid.chunk))
        ok, cost, *_rest, coords = evaluate(flat)
        n_feas += int(ok.sum())
        if not ok.any():
            continue
        c = np.where(ok, cost, np.inf)
        j = int(np.argmin(c))
        if c[j] < best_cost:
            best_cost, best_flat = float(c[j]), int(flat[j])
        if nf:
            np.minimum.at(landscape, coords[n + len(ang_buses)], c)
    if best_flat < 0:
        raise CaseError("no feasible grid point found")

    ok, cost, V, P, Q, k, coords = evaluate(np.array([best_flat]))
    # discretisation error: steepest cost change towards any feasible neighbour
    delta = 0.0
    best_coord = np.array([c[0] for c in coords])
    for d, h in enumerate(steps):
        if shape[d] == 1:
            continue
        slope = 0.0
        for s in (-1, 1):
            nb = best_coord.copy()
            nb[d] += s
            if not 0 <= nb[d] < shape[d]:
                continue
            okn, cn, *_ = evaluate(np.array([np.ravel_multi_index(tuple(nb), shape)]))
            if okn[0]:
                slope = max(slope, abs(cn[0] - best_cost))
        delta += slope
    return OracleResult(
        cost=best_cost, V=V[:, 0], P_G=P[:, 0], Q_G=Q[:, 0],
        k=k[:, 0] if nf else np.empty(0), n_points=total, n_feasible=n_feas,
        delta_grid=float(delta), k_landscape=(kvals, landscape),
    )
