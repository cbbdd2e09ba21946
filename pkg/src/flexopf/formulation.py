"""Assembly of the relaxed transformer-pair OPF as a conic program.

The program is kept at modeling level: named scalar variables with bounds,
range rows ``lo <= a'x + f(W) <= hi`` whose matrix part ``f`` is a real-linear
functional of the Hermitian matrix ``W``, and quadratic cost epigraphs.  The
solver module lowers it to standard conic form.

A matrix functional is stored as ``{(a, b): alpha}`` with ``a <= b`` and means
``sum(Re(alpha * W[a, b]))``.
"""

from __future__ import annotations

import cmath
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field

import numpy as np

from .network import NetworkCase, conventional_case
from .transform import AugmentedNetwork, augment

WForm = dict  # (a, b) -> complex, a <= b


@dataclass(frozen=True)
class FormulationOptions:
    wq: float = 0.0
    conventional_mode: bool = False
    both_ends: bool = False
    # $/h charged per p.u. of reactive output for wq = 1; None means
    # base_mva**2, i.e. wq is read per MVAr against cost in units of base_mva $/h
    q_penalty_scale: float | None = None

    def __post_init__(self):
        if self.wq < 0:
            raise ValueError("wq must be non-negative")
        if self.q_penalty_scale is not None and not self.q_penalty_scale > 0:
            raise ValueError("q_penalty_scale must be positive")

    def q_weight(self, base_mva: float) -> float:
        scale = base_mva**2 if self.q_penalty_scale is None else self.q_penalty_scale
        return self.wq * scale


@dataclass
class Variable:
    name: str
    lo: float = -math.inf
    hi: float = math.inf


@dataclass
class Row:
    family: str
    label: str
    scalars: dict[int, float]
    wform: WForm
    lo: float
    hi: float

    @property
    def is_equality(self) -> bool:
        return self.lo == self.hi


@dataclass
class Epigraph:
    """``t >= a*x**2 + b*x + c`` over scalar variables ``t`` and ``x``."""

    t: int
    x: int
    a: float
    b: float
    c: float


@dataclass
class ConicProgram:
    size: int  # order m of the Hermitian matrix variable
    variables: list[Variable] = field(default_factory=list)
    rows: list[Row] = field(default_factory=list)
    epigraphs: list[Epigraph] = field(default_factory=list)
    objective: dict[int, float] = field(default_factory=dict)
    objective_constant: float = 0.0
    # bookkeeping for reporting
    base_mva: float = 100.0
    wq: float = 0.0
    q_weight: float = 0.0  # objective coefficient on each Q_G (p.u.)
    gen_P: list[int] = field(default_factory=list)
    gen_Q: list[int] = field(default_factory=list)
    cost_terms: list[tuple[int, float, float, float]] = field(default_factory=list)
    labels: tuple[str, ...] = ()
    network: AugmentedNetwork | None = None  # the network actually assembled

    def add_var(self, name: str, lo: float = -math.inf, hi: float = math.inf) -> int:
        self.variables.append(Variable(name, lo, hi))
        return len(self.variables) - 1

    def add_row(self, family, label, scalars, wform, lo, hi=None) -> None:
        hi = lo if hi is None else hi
        if not all(cmath.isfinite(v) for v in wform.values()):
            raise ValueError(f"non-finite coefficient in {family} {label}")
        self.rows.append(Row(family, label, dict(scalars), _clean(wform), lo, hi))

    @property
    def embedding_dim(self) -> int:
        return 2 * self.size

    def census(self) -> Counter:
        """Constraint count per family (range rows count once)."""
        counts = Counter(r.family for r in self.rows)
        counts["cost_epigraph"] = len(self.epigraphs)
        counts["psd"] = 1
        return counts

    def equality_rows(self) -> list[Row]:
        return [r for r in self.rows if r.is_equality]

    def inequality_rows(self) -> list[Row]:
        return [r for r in self.rows if not r.is_equality]


# ---------------------------------------------------------------------------
# Hermitian functionals
# ---------------------------------------------------------------------------

def _clean(form: WForm) -> WForm:
    return {k: v for k, v in form.items() if v != 0}


def _add(form: WForm, a: int, b: int, coef: complex) -> None:
    """Accumulate ``coef * W[a, b]`` (complex valued) into a real-part functional."""
    if a > b:
        a, b, coef = b, a, np.conj(coef)
    if a == b:
        coef = complex(coef.real, 0.0)
    form[(a, b)] = form.get((a, b), 0) + coef


def complex_parts(terms: list[tuple[int, int, complex]]) -> tuple[WForm, WForm]:
    """Real and imaginary part functionals of ``sum(coef * W[a, b])``.

    Diagonal entries of ``W`` are real, so ``Im(coef * W[a, a]) = Im(coef) * W[a, a]``.
    """
    re, im = {}, {}
    for a, b, coef in terms:
        coef = complex(coef)
        if a == b:
            _add(re, a, a, coef.real)
            _add(im, a, a, coef.imag)
        else:
            _add(re, a, b, coef)
            _add(im, a, b, -1j * coef)
    return _clean(re), _clean(im)


def evaluate_form(form: WForm, W: np.ndarray) -> float:
    return float(sum((alpha * W[a, b]).real for (a, b), alpha in form.items()))


def form_to_hermitian(form: WForm, m: int) -> np.ndarray:
    """Hermitian ``C`` with ``tr(C W) = f(W)`` for Hermitian ``W``."""
    C = np.zeros((m, m), dtype=complex)
    for (a, b), alpha in form.items():
        if a == b:
            C[a, a] += alpha.real
        else:
            C[b, a] += alpha / 2
            C[a, b] += np.conj(alpha) / 2
    return C


def form_to_embedding(form: WForm, m: int) -> tuple[list[int], list[int], list[float]]:
    """Sparse triplets of the real symmetric ``E`` with ``<E, emb(W)> = f(W)``.

    ``<E, X>`` is the full elementwise sum; this is half the embedding of the
    Hermitian coefficient matrix.
    """
    rows, cols, vals = [], [], []

    def put(p, q, v):
        rows.append(p)
        cols.append(q)
        vals.append(v)

    for (a, b), alpha in form.items():
        if a == b:
            put(a, a, alpha.real / 2)
            put(m + a, m + a, alpha.real / 2)
            continue
        re, im = alpha.real / 4, alpha.imag / 4
        if re:
            for p, q in ((a, b), (b, a), (m + a, m + b), (m + b, m + a)):
                put(p, q, re)
        if im:
            for p, q in ((m + a, b), (b, m + a)):
                put(p, q, -im)
            for p, q in ((a, m + b), (m + b, a)):
                put(p, q, im)
    return rows, cols, vals


def embed_hermitian(H: np.ndarray) -> np.ndarray:
    """Real symmetric embedding ``[[Re H, -Im H], [Im H, Re H]]``."""
    H = np.asarray(H)
    return np.block([[H.real, -H.imag], [H.imag, H.real]])


def hermitian_from_embedding(X: np.ndarray) -> np.ndarray:
    """Project a real symmetric ``2m x 2m`` matrix back onto Hermitian ``m x m``.

    The projection averages the two copies, so it is exact on embeddings and
    maps PSD matrices to PSD matrices.
    """
    m = X.shape[0] // 2
    R = 0.5 * (X[:m, :m] + X[m:, m:])
    S = 0.5 * (X[m:, :m] - X[:m, m:])
    W = R + 1j * S
    return 0.5 * (W + W.conj().T)


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------

def _injection_terms(aug: AugmentedNetwork) -> dict[int, list[tuple[int, int, complex]]]:
    """Complex injection ``S_a = sum coef * W[.,.]`` per augmented bus, from shunts and branches."""
    terms: dict[int, list] = defaultdict(list)
    for a, y in enumerate(aug.shunts):
        if y != 0:
            terms[a].append((a, a, np.conj(y)))
    for br in aug.branches:
        yc = np.conj(br.y)
        terms[br.a] += [(br.a, br.a, yc), (br.a, br.b, -yc)]
        terms[br.b] += [(br.b, br.b, yc), (br.b, br.a, -yc)]
    return terms


def assemble(aug: AugmentedNetwork, opts: FormulationOptions = FormulationOptions()) -> ConicProgram:
    """Build the relaxed OPF conic program over the augmented network."""
    if opts.conventional_mode and aug.case.flex_lines:
        aug = augment(conventional_case(aug.case), aug.epsilon)
    case: NetworkCase = aug.case
    base = case.base_mva
    n = case.n_bus
    prog = ConicProgram(size=aug.size, base_mva=base, wq=opts.wq, q_weight=opts.q_weight(base),
                        labels=aug.labels, network=aug)
    idx = case.bus_index()

    # generator variables and costs
    gens_at = defaultdict(list)
    for g_i, g in enumerate(case.generators):
        p = prog.add_var(f"P_G{g_i}@{g.bus}", g.P_min, g.P_max)
        q = prog.add_var(f"Q_G{g_i}@{g.bus}", g.Q_min, g.Q_max)
        prog.gen_P.append(p)
        prog.gen_Q.append(q)
        gens_at[idx[g.bus]].append((p, q))
        a, b, c = g.cost_c2 * base**2, g.cost_c1 * base, g.cost_c0
        prog.cost_terms.append((p, a, b, c))
        if a > 0:
            t = prog.add_var(f"t_G{g_i}@{g.bus}")
            prog.epigraphs.append(Epigraph(t=t, x=p, a=a, b=b, c=c))
            prog.objective[t] = 1.0
        else:
            prog.objective[p] = prog.objective.get(p, 0.0) + b
            prog.objective_constant += c
        if prog.q_weight:
            prog.objective[q] = prog.objective.get(q, 0.0) + prog.q_weight

    # flow variables through each transformer of a pair
    inj = _injection_terms(aug)
    pair_vars: dict[int, list[tuple[int, int]]] = defaultdict(list)
    for l, (i, j, ij, ji) in enumerate(aug.flex_nodes):
        for prim, sec in ((i, ij), (j, ji)):
            s_re = prog.add_var(f"Sre_{aug.labels[sec]}")
            s_im = prog.add_var(f"Sim_{aug.labels[sec]}")
            pair_vars[prim].append((s_re, s_im))
            re, im = complex_parts(inj[sec])
            prog.add_row("secondary_balance", f"P@{aug.labels[sec]}", {s_re: 1.0}, _neg(re), 0.0)
            prog.add_row("secondary_balance", f"Q@{aug.labels[sec]}", {s_im: 1.0}, _neg(im), 0.0)

    # power balance at original buses: gen - load = injection through W + pair flows
    for i, bus in enumerate(case.buses):
        re, im = complex_parts(inj[i])
        sp = {p: 1.0 for p, _ in gens_at[i]}
        sq = {q: 1.0 for _, q in gens_at[i]}
        for s_re, s_im in pair_vars[i]:
            sp[s_re] = -1.0
            sq[s_im] = -1.0
        prog.add_row("power_balance", f"P@{bus.id}", sp, _neg(re), bus.P_load)
        prog.add_row("power_balance", f"Q@{bus.id}", sq, _neg(im), bus.Q_load)

    # tap-pair correlation
    for l, (i, j, ij, ji) in enumerate(aug.flex_nodes):
        fl = case.flex_lines[l]
        lab = fl.label
        for prim, sec, side in ((i, ij, "i"), (j, ji, "j")):
            prog.add_row("tap_range", f"kmin_{side}@{lab}", {}, {(sec, sec): 1.0, (prim, prim): -fl.k_min}, 0.0, math.inf)
            prog.add_row("tap_range", f"kmax_{side}@{lab}", {}, {(sec, sec): 1.0, (prim, prim): -fl.k_max}, -math.inf, 0.0)
        re, im = complex_parts([(ij, j, 1.0), (i, ji, -1.0)])
        prog.add_row("tap_cross", f"re@{lab}", {}, re, 0.0)
        prog.add_row("tap_cross", f"im@{lab}", {}, im, 0.0)
        for prim, sec, side in ((i, ij, "i"), (j, ji, "j")):
            re, im = complex_parts([(prim, sec, 1.0)])
            prog.add_row("tap_imag", f"{side}@{lab}", {}, im, 0.0)
            prog.add_row("tap_real", f"{side}@{lab}", {}, re, 0.0, math.inf)

    # voltage magnitude limits on original buses
    for i, bus in enumerate(case.buses):
        prog.add_row("voltage", f"V@{bus.id}", {}, {(i, i): 1.0}, bus.V_min**2, bus.V_max**2)

    # active flow limits on constant and core branches
    for br in aug.branches:
        if br.kind == "coupling" or math.isinf(br.flow_limit):
            continue
        yc = np.conj(br.y)
        ends = ((br.a, br.b), (br.b, br.a)) if opts.both_ends else ((br.a, br.b),)
        for a, b in ends:
            re, _ = complex_parts([(a, a, yc), (a, b, -yc)])
            prog.add_row("flow", f"{aug.labels[a]}->{aug.labels[b]}", {}, re, -br.flow_limit, br.flow_limit)
    return prog


def _neg(form: WForm) -> WForm:
    return {k: -v for k, v in form.items()}


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ObjectiveValue:
    cost: float  # $/h
    penalty: float  # $/h equivalent of the reactive penalty
    total: float


def objective_value(program: ConicProgram, scalars) -> ObjectiveValue:
    """Generation cost and reactive penalty at a scalar assignment (p.u. values)."""
    x = np.asarray(scalars, dtype=float)
    cost = sum(a * x[p] ** 2 + b * x[p] + c for p, a, b, c in program.cost_terms)
    penalty = program.q_weight * sum(x[q] for q in program.gen_Q)
    return ObjectiveValue(float(cost), float(penalty), float(cost + penalty))


def row_values(program: ConicProgram, scalars, W: np.ndarray) -> np.ndarray:
    x = np.asarray(scalars, dtype=float)
    return np.array([sum(c * x[k] for k, c in r.scalars.items()) + evaluate_form(r.wform, W)
                     for r in program.rows])


def max_violation(program: ConicProgram, scalars, W: np.ndarray) -> tuple[float, str]:
    """Largest violation over rows and variable bounds, with the offending label."""
    x = np.asarray(scalars, dtype=float)
    worst, where = 0.0, ""
    for r, v in zip(program.rows, row_values(program, x, W)):
        viol = max(r.lo - v, v - r.hi, 0.0)
        if viol > worst:
            worst, where = viol, f"{r.family}:{r.label}"
    for k, var in enumerate(program.variables):
        viol = max(var.lo - x[k], x[k] - var.hi, 0.0)
        if viol > worst:
            worst, where = viol, f"bound:{var.name}"
    for e in program.epigraphs:
        viol = e.a * x[e.x] ** 2 + e.b * x[e.x] + e.c - x[e.t]
        if viol > worst:
            worst, where = viol, f"cost_epigraph:{program.variables[e.t].name}"
    return worst, where


def lift(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=complex)
    return np.outer(v, v.conj())
