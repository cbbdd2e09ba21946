"""Standard conic form and a primal-dual interior-point solver.

Primal:  min c'x  s.t.  A x = b,  x in K
Dual:    max b'y  s.t.  A'y + z = c,  z in K

``K`` is a product of a nonnegative orthant, second-order cones and PSD
cones.  PSD variables are kept as dense symmetric matrices and their rows of
``A`` use full (both triangle) vectorisation, so ``<A_i, X>`` is the plain
elementwise sum.

The method uses Nesterov-Todd scaling, the Mehrotra predictor-corrector and a
dense Cholesky factorisation of the Schur complement.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .formulation import ConicProgram, form_to_embedding, hermitian_from_embedding

logger = logging.getLogger(__name__)

STATUSES = ("optimal", "primal_infeasible", "dual_infeasible", "iteration_limit", "numerical_failure")


@dataclass(frozen=True)
class SolverSettings:
    max_iterations: int = 200
    tol_gap: float = 1e-8
    tol_primal: float = 1e-8
    tol_dual: float = 1e-8
    step_fraction: float = 0.99
    regularization: float = 1e-13
    eliminate_free: bool = True
    remove_duplicates: bool = True
    chunk: int = 64
    refinement_steps: int = 50

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if min(self.tol_gap, self.tol_primal, self.tol_dual) <= 0:
            raise ValueError("tolerances must be positive")
        if not 0 < self.step_fraction < 1:
            raise ValueError("step_fraction must lie in (0, 1)")


# ---------------------------------------------------------------------------
# standard form
# ---------------------------------------------------------------------------

@dataclass
class StandardForm:
    c: np.ndarray  # objective over linear-cone variables (lp then soc)
    C: list[np.ndarray]  # objective per PSD block
    A: sp.csr_matrix  # rows x linear-cone variables
    A_psd: list[sp.csr_matrix]  # rows x N**2 per PSD block
    b: np.ndarray
    lp: int
    soc: tuple[int, ...]
    psd: tuple[int, ...]
    offset: float = 0.0

    @property
    def m(self) -> int:
        return self.b.size

    @property
    def n_lin(self) -> int:
        return self.lp + sum(self.soc)

    def apply_A(self, x, X) -> np.ndarray:
        out = self.A @ x
        for Ak, Xk in zip(self.A_psd, X):
            out = out + Ak @ Xk.ravel()
        return out

    def apply_At(self, y) -> tuple[np.ndarray, list[np.ndarray]]:
        ylin = self.A.T @ y
        Ys = []
        for Ak, N in zip(self.A_psd, self.psd):
            Y = (Ak.T @ y).reshape(N, N)
            Ys.append(0.5 * (Y + Y.T))
        return ylin, Ys


class Lowering:
    """Maps a :class:`ConicProgram` onto a :class:`StandardForm` and back."""

    def __init__(self, prog: ConicProgram, eliminate_free: bool = True, remove_duplicates: bool = True):
        self.prog = prog
        self.m_w = prog.size
        self.N = 2 * prog.size
        rows = [(dict(r.scalars), dict(r.wform), r.lo, r.hi, f"{r.family}:{r.label}") for r in prog.rows]
        objective = dict(prog.objective)
        self.eliminated: dict[int, tuple[float, dict, dict]] = {}
        self._obj_wform: dict = {}
        epi_t = {e.t for e in prog.epigraphs}
        if eliminate_free:
            rows, objective = self._eliminate(rows, objective, epi_t)
        self._build(rows, objective, remove_duplicates)

    # -- presolve ---------------------------------------------------------
    def _eliminate(self, rows, objective, epi_t):
        """Substitute free variables defined by an equality row."""
        prog = self.prog
        used_elsewhere = {e.x for e in prog.epigraphs}
        for k, var in enumerate(prog.variables):
            if math.isfinite(var.lo) or math.isfinite(var.hi) or k in epi_t or k in used_elsewhere:
                continue
            defining = [r for r, row in enumerate(rows) if k in row[0] and row[2] == row[3]]
            if not defining:
                continue
            r = min(defining, key=lambda q: len(rows[q][0]) + len(rows[q][1]))
            sc, wf, rhs, _, _ = rows[r]
            alpha = sc[k]
            # k = (rhs - sum_{j != k} sc_j x_j - f(W)) / alpha
            e_const = rhs / alpha
            e_sc = {j: -c / alpha for j, c in sc.items() if j != k}
            e_wf = {key: -v / alpha for key, v in wf.items()}
            self.eliminated[k] = (e_const, e_sc, e_wf)
            del rows[r]
            for q, (sq, wq, lo, hi, lab) in enumerate(rows):
                if k not in sq:
                    continue
                coef = sq.pop(k)
                for j, c in e_sc.items():
                    sq[j] = sq.get(j, 0.0) + coef * c
                for key, v in e_wf.items():
                    wq[key] = wq.get(key, 0) + coef * v
                shift = coef * e_const
                rows[q] = (sq, wq, lo - shift, hi - shift, lab)
            if k in objective:
                coef = objective.pop(k)
                for key, v in e_wf.items():
                    self._obj_wform[key] = self._obj_wform.get(key, 0) + coef * v
                for j, c in e_sc.items():
                    objective[j] = objective.get(j, 0.0) + coef * c
                self._obj_shift = getattr(self, "_obj_shift", 0.0) + coef * e_const
        return rows, objective

    # -- lowering ----------------------------------------------------------
    def _build(self, rows, objective, remove_duplicates):
        prog = self.prog
        lp_count = 0
        soc_blocks: list[int] = []
        trip_r, trip_c, trip_v = [], [], []
        psd_r, psd_c, psd_v = [], [], []
        rhs: list[float] = []
        labels: list[str] = []

        def new_lp():
            nonlocal lp_count
            lp_count += 1
            return ("lp", lp_count - 1)

        def new_soc(k):
            soc_blocks.append(k)
            return [("soc", len(soc_blocks) - 1, p) for p in range(k)]

        def add_row(lin: dict, wform: dict, value: float, label: str):
            r = len(rhs)
            for col, v in lin.items():
                if v != 0:
                    trip_r.append(r)
                    trip_c.append(col)
                    trip_v.append(v)
            if wform:
                pr, pc, pv = form_to_embedding(wform, self.m_w)
                psd_r.extend([r] * len(pv))
                psd_c.extend(p * self.N + q for p, q in zip(pr, pc))
                psd_v.extend(pv)
            rhs.append(value)
            labels.append(label)

        def expr_of(sc: dict) -> tuple[float, dict]:
            const, lin = 0.0, {}
            for k, coef in sc.items():
                e = exprs[k]
                const += coef * e[0]
                for col, v in e[1].items():
                    lin[col] = lin.get(col, 0.0) + coef * v
            return const, lin

        # scalar variables -> affine maps of cone variables
        exprs: dict[int, tuple[float, dict]] = {}
        epi_by_t = {e.t: e for e in prog.epigraphs}
        in_rows = set()
        for sc, _, _, _, _ in rows:
            in_rows.update(sc)
        for k, var in enumerate(prog.variables):
            if k in self.eliminated or k in epi_by_t:
                continue
            lo, hi = var.lo, var.hi
            if lo == hi:
                exprs[k] = (lo, {})
            elif math.isfinite(lo) and math.isfinite(hi):
                u, w = new_lp(), new_lp()
                exprs[k] = (lo, {u: 1.0})
                add_row({u: 1.0, w: 1.0}, {}, hi - lo, f"bound:{var.name}")
            elif math.isfinite(lo):
                exprs[k] = (lo, {new_lp(): 1.0})
            elif math.isfinite(hi):
                exprs[k] = (hi, {new_lp(): -1.0})
            else:
                exprs[k] = (0.0, {new_lp(): 1.0, new_lp(): -1.0})
        for t, e in epi_by_t.items():
            if prog.variables[t].lo != -math.inf or prog.variables[t].hi != math.inf or t in in_rows:
                raise NotImplementedError("epigraph variables must be free and objective-only")
            cx, lx = exprs[e.x]
            if not lx:
                exprs[t] = (e.a * cx * cx + e.b * cx + e.c, {})
                continue
            if e.a == 0:
                exprs[t] = (e.c + e.b * cx, {col: e.b * v for col, v in lx.items()})
                continue
            # (w0, w1, w2) in Q3 with w0 - w2 = 1 and w1 = sqrt(a / tau) x gives
            # tau (w0 + w2) >= a x^2.  tau is the size of the quadratic term,
            # which keeps the cone variables of order one.
            xv = prog.variables[e.x]
            xmax = max(abs(xv.lo), abs(xv.hi))
            tau = max(e.a * xmax * xmax, 1e-6) if math.isfinite(xmax) else 1.0
            w0, w1, w2 = new_soc(3)
            add_row({w0: 1.0, w2: -1.0}, {}, 1.0, f"epigraph_norm:{prog.variables[t].name}")
            ra = math.sqrt(e.a / tau)
            lin = {w1: 1.0}
            for col, v in lx.items():
                lin[col] = lin.get(col, 0.0) - ra * v
            add_row(lin, {}, ra * cx, f"epigraph_link:{prog.variables[t].name}")
            lin_t = {w0: tau, w2: tau}
            for col, v in lx.items():
                lin_t[col] = lin_t.get(col, 0.0) + e.b * v
            exprs[t] = (e.c + e.b * cx, lin_t)

        for sc, wf, lo, hi, label in rows:
            const, lin = expr_of(sc)
            if lo == hi:
                add_row(lin, wf, lo - const, label)
            elif math.isfinite(lo) and math.isfinite(hi):
                s1, s2 = new_lp(), new_lp()
                add_row({**lin, s1: -1.0}, wf, lo - const, label)
                add_row({s1: 1.0, s2: 1.0}, {}, hi - lo, label + ":range")
            elif math.isfinite(lo):
                add_row({**lin, new_lp(): -1.0}, wf, lo - const, label)
            elif math.isfinite(hi):
                add_row({**lin, new_lp(): 1.0}, wf, hi - const, label)

        # objective
        const, lin = expr_of(objective)
        self.offset = const + prog.objective_constant + getattr(self, "_obj_shift", 0.0)

        # finalise column numbering: lp first, then soc blocks
        soc_start = np.concatenate([[0], np.cumsum(soc_blocks)]).astype(int) if soc_blocks else [0]

        def col_index(col):
            if col[0] == "lp":
                return col[1]
            return lp_count + int(soc_start[col[1]]) + col[2]

        n_lin = lp_count + sum(soc_blocks)
        A = sp.csr_matrix((trip_v, ([r for r in trip_r], [col_index(c) for c in trip_c])),
                          shape=(len(rhs), n_lin))
        A_psd = sp.csr_matrix((psd_v, (psd_r, psd_c)), shape=(len(rhs), self.N * self.N))
        c = np.zeros(n_lin)
        for col, v in lin.items():
            c[col_index(col)] += v
        C = np.zeros((self.N, self.N))
        if self._obj_wform:
            pr, pc, pv = form_to_embedding(self._obj_wform, self.m_w)
            np.add.at(C, (pr, pc), pv)
        b = np.asarray(rhs, dtype=float)
        A.sum_duplicates()
        A_psd.sum_duplicates()
        A.eliminate_zeros()
        A_psd.eliminate_zeros()

        keep = self._select_rows(A, A_psd, b, remove_duplicates)
        self.row_labels = [labels[k] for k in keep]
        self.exprs = {k: (e[0], {col_index(col): v for col, v in e[1].items()}) for k, e in exprs.items()}
        self.std = StandardForm(c=c, C=[C], A=A[keep], A_psd=[A_psd[keep]],
                                b=b[keep], lp=lp_count, soc=tuple(soc_blocks), psd=(self.N,),
                                offset=self.offset)

    @staticmethod
    def _select_rows(A, A_psd, b, remove_duplicates) -> np.ndarray:
        both = sp.hstack([A, A_psd]).tocsr()
        keep, seen = [], set()
        for r in range(both.shape[0]):
            lo, hi = both.indptr[r], both.indptr[r + 1]
            if lo == hi:
                if abs(b[r]) > 1e-12:
                    raise ValueError(f"row {r} reads 0 = {b[r]}: program is infeasible")
                continue
            if remove_duplicates:
                key = (tuple(both.indices[lo:hi]), tuple(np.round(both.data[lo:hi], 15)), round(b[r], 15))
                if key in seen:
                    continue
                seen.add(key)
            keep.append(r)
        return np.asarray(keep, dtype=int)

    # -- recovery -----------------------------------------------------------
    def recover(self, x_lin: np.ndarray, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Scalar assignment and Hermitian ``W`` from a standard-form point."""
        from .formulation import evaluate_form

        W = hermitian_from_embedding(X)
        vals = np.zeros(len(self.prog.variables))
        for k, (const, lin) in self.exprs.items():
            vals[k] = const + sum(v * x_lin[col] for col, v in lin.items())
        # eliminated variables may depend on each other only through earlier ones
        for k, (const, sc, wf) in self.eliminated.items():
            vals[k] = const + sum(c * vals[j] for j, c in sc.items()) + evaluate_form(wf, W)
        return vals, W


# ---------------------------------------------------------------------------
# cone algebra
# ---------------------------------------------------------------------------

class _Scaling:
    """Nesterov-Todd scaling for one iterate."""

    def __init__(self, std: StandardForm, x, X, z, Z):
        self.std = std
        lp = std.lp
        self.d = np.sqrt(x[:lp] / z[:lp])
        self.lam_lp = np.sqrt(x[:lp] * z[:lp])
        self.soc_W, self.soc_lam = [], []
        off = lp
        for k in std.soc:
            W, lam = _soc_scaling(x[off:off + k], z[off:off + k])
            self.soc_W.append(W)
            self.soc_lam.append(lam)
            off += k
        self.R, self.Rinv, self.lam_psd, self.G = [], [], [], []
        for Xk, Zk in zip(X, Z):
            Lx = np.linalg.cholesky(Xk)
            Lz = np.linalg.cholesky(Zk)
            U, s, Vt = np.linalg.svd(Lz.T @ Lx)
            R = Lx @ Vt.T / np.sqrt(s)
            Rinv = (U.T / np.sqrt(s)[:, None]) @ Lz.T
            self.R.append(R)
            self.Rinv.append(Rinv)
            self.lam_psd.append(s)
            self.G.append(R @ R.T)

    # u = W^T (lambda \ r) in x-space
    def wt_solve(self, r_lin, r_psd, scaled=False):
        lp = self.std.lp
        out = np.empty_like(r_lin)
        out[:lp] = self.d * (r_lin[:lp] / self.lam_lp)
        off = lp
        for W, lam, k in zip(self.soc_W, self.soc_lam, self.std.soc):
            out[off:off + k] = W @ _soc_inv_circ(lam, r_lin[off:off + k])
            off += k
        outs, Vs = [], []
        for R, s, Rk in zip(self.R, self.lam_psd, r_psd):
            V = 2.0 * Rk / (s[:, None] + s[None, :])
            Vs.append(V)
            outs.append(R @ V @ R.T)
        return (out, outs, Vs) if scaled else (out, outs)

    def apply_H(self, v_lin, v_psd):
        lp = self.std.lp
        out = np.empty_like(v_lin)
        out[:lp] = self.d**2 * v_lin[:lp]
        off = lp
        for W, k in zip(self.soc_W, self.std.soc):
            out[off:off + k] = W @ (W @ v_lin[off:off + k])
            off += k
        return out, [G @ V @ G for G, V in zip(self.G, v_psd)]

    def scaled(self, dx_lin, dz_lin):
        """(W^{-T} dx, W dz) for the linear cones."""
        lp = self.std.lp
        a_lin = np.empty_like(dx_lin)
        b_lin = np.empty_like(dz_lin)
        a_lin[:lp] = dx_lin[:lp] / self.d
        b_lin[:lp] = dz_lin[:lp] * self.d
        off = lp
        for W, k in zip(self.soc_W, self.std.soc):
            a_lin[off:off + k] = np.linalg.solve(W, dx_lin[off:off + k])
            b_lin[off:off + k] = W @ dz_lin[off:off + k]
            off += k
        return a_lin, b_lin

    def lam_sq(self):
        lp = self.std.lp
        out = [self.lam_lp**2]
        for lam in self.soc_lam:
            out.append(_soc_circ(lam, lam))
        return np.concatenate(out) if out else np.zeros(0), [np.diag(s**2) for s in self.lam_psd]


def _soc_circ(u, v):
    return np.concatenate([[u @ v], u[0] * v[1:] + v[0] * u[1:]])


def _soc_inv_circ(lam, r):
    l0, l1 = lam[0], lam[1:]
    nl = np.linalg.norm(l1)
    det = (l0 - nl) * (l0 + nl)
    w0 = (l0 * r[0] - l1 @ r[1:]) / det
    return np.concatenate([[w0], (r[1:] - w0 * l1) / l0])


def _soc_det_sqrt(v):
    # sqrt(v0^2 - |v1|^2) without cancellation
    r = np.linalg.norm(v[1:])
    return math.sqrt(max((v[0] - r) * (v[0] + r), 1e-300))


def _soc_scaling(x, z):
    """Symmetric NT scaling ``W`` with ``W z = W^{-1} x``; returns ``(W, W z)``."""
    J = np.ones(x.size)
    J[1:] = -1
    xn, zn = _soc_det_sqrt(x), _soc_det_sqrt(z)
    xb, zb = x / xn, z / zn
    gamma = math.sqrt(max((1 + xb @ zb) / 2, 1.0))
    w = (xb + J * zb) / (2 * gamma)
    # square root of w in the Jordan algebra (det w = 1)
    u = w.copy()
    u[0] += 1.0
    u /= math.sqrt(2 * (w[0] + 1))
    W = math.sqrt(xn / zn) * (2 * np.outer(u, u) - np.diag(J))
    return W, W @ z


def _soc_unit(k):
    e = np.zeros(k)
    e[0] = 1.0
    return e


def _max_step(std: StandardForm, x, dx, lam_psd, dS) -> float:
    """Largest step keeping ``x + a dx`` in the cone.

    PSD blocks are given in the scaled space: the iterate is ``diag(lam)``
    and ``dS`` the scaled direction.
    """
    alpha = math.inf
    lp = std.lp
    neg = dx[:lp] < 0
    if np.any(neg):
        alpha = min(alpha, float(np.min(-x[:lp][neg] / dx[:lp][neg])))
    off = lp
    for k in std.soc:
        alpha = min(alpha, _soc_step(x[off:off + k], dx[off:off + k]))
        off += k
    for lam, D in zip(lam_psd, dS):
        r = 1.0 / np.sqrt(lam)
        lmin = np.linalg.eigvalsh(D * np.outer(r, r))[0]
        if lmin < 0:
            alpha = min(alpha, -1.0 / lmin)
    return alpha


def _soc_step(x, d):
    # largest a with x + a d in the cone: (x0 + a d0)^2 - |x1 + a d1|^2 >= 0, x0 + a d0 >= 0
    A = d[0] ** 2 - d[1:] @ d[1:]
    B = 2 * (x[0] * d[0] - x[1:] @ d[1:])
    C = x[0] ** 2 - x[1:] @ x[1:]
    roots = []
    if abs(A) < 1e-300:
        if B < 0:
            roots.append(-C / B)
    else:
        disc = B * B - 4 * A * C
        if disc >= 0:
            sq = math.sqrt(disc)
            roots += [r for r in ((-B - sq) / (2 * A), (-B + sq) / (2 * A)) if r > 0]
    if d[0] < 0:
        roots.append(-x[0] / d[0])
    return min(roots) if roots else math.inf


# ---------------------------------------------------------------------------
# solution container
# ---------------------------------------------------------------------------

@dataclass
class SolverSolution:
    status: str
    primal_objective: float
    dual_objective: float
    x: np.ndarray
    X: list[np.ndarray]
    y: np.ndarray
    z: np.ndarray
    Z: list[np.ndarray]
    residuals: dict
    iterations: int
    wall_time: float
    history: list[dict] = field(default_factory=list)
    log: list[str] = field(default_factory=list)
    # model-level quantities, filled when solving a ConicProgram
    scalars: np.ndarray | None = None
    W: np.ndarray | None = None
    backend: str = "internal"

    @property
    def optimal(self) -> bool:
        return self.status == "optimal"


# ---------------------------------------------------------------------------
# interior-point method
# ---------------------------------------------------------------------------

def _equilibrate(std: StandardForm) -> tuple[StandardForm, np.ndarray, float]:
    norms = np.zeros(std.m)
    for Ak in (std.A, *std.A_psd):
        if Ak.shape[1]:
            norms = np.maximum(norms, abs(Ak).max(axis=1).toarray().ravel())
    norms[norms == 0] = 1.0
    D = sp.diags(1.0 / norms)
    cscale = max(1.0, float(np.max(np.abs(std.c))) if std.c.size else 1.0,
                 *(float(np.max(np.abs(C))) for C in std.C))
    scaled = StandardForm(c=std.c / cscale, C=[C / cscale for C in std.C], A=(D @ std.A).tocsr(),
                          A_psd=[(D @ Ak).tocsr() for Ak in std.A_psd], b=std.b / norms,
                          lp=std.lp, soc=std.soc, psd=std.psd, offset=std.offset)
    return scaled, norms, cscale


class _SchurPSD:
    """Per-row dense supports of a PSD block for the Schur complement."""

    def __init__(self, Ak: sp.csr_matrix, N: int):
        self.rows = np.flatnonzero(np.diff(Ak.indptr))
        self.sub = Ak[self.rows].tocsr()
        self.N = N
        self.supports = []
        for r in self.rows:
            lo, hi = Ak.indptr[r], Ak.indptr[r + 1]
            cols = Ak.indices[lo:hi]
            p, q = np.divmod(cols, N)
            S = np.unique(np.concatenate([p, q]))
            pos = {s: t for t, s in enumerate(S)}
            B = np.zeros((S.size, S.size))
            for pp, qq, v in zip(p, q, Ak.data[lo:hi]):
                B[pos[pp], pos[qq]] += v
            self.supports.append((S, 0.5 * (B + B.T)))

    def contribution(self, G: np.ndarray, chunk: int) -> np.ndarray:
        k = self.rows.size
        out = np.empty((k, k))
        N = self.N
        for start in range(0, k, chunk):
            stop = min(k, start + chunk)
            T = np.empty((stop - start, N * N))
            for t, (S, B) in enumerate(self.supports[start:stop]):
                GS = G[:, S]
                T[t] = ((GS @ B) @ GS.T).ravel()
            out[:, start:stop] = (self.sub @ T.T)
        return 0.5 * (out + out.T)


def _fmt_line(it, pobj, dobj, gap, pres, dres, ap, ad, sigma):
    return (f"{it:3d}  pobj={pobj: .10e}  dobj={dobj: .10e}  gap={gap:.3e}  "
            f"pres={pres:.3e}  dres={dres:.3e}  ap={ap:.4f}  ad={ad:.4f}  sigma={sigma:.4f}")


def solve_standard(std_in: StandardForm, settings: SolverSettings = SolverSettings()) -> SolverSolution:
    t0 = time.perf_counter()
    std, rownorm, cscale = _equilibrate(std_in)
    m, lp = std.m, std.lp
    nu = lp + len(std.soc) + sum(std.psd)

    # starting point: identity-scaled interior iterates
    normb = np.linalg.norm(std.b)
    normc = max([np.linalg.norm(std.c), *(np.linalg.norm(C) for C in std.C)])
    xi = max(10.0, math.sqrt(nu), normb)
    eta = max(10.0, math.sqrt(nu), normc)
    x = np.zeros(std.n_lin)
    x[:lp] = xi
    z = np.zeros(std.n_lin)
    z[:lp] = eta
    off = lp
    for k in std.soc:
        x[off] = xi * 1.5
        z[off] = eta * 1.5
        off += k
    X = [xi * np.eye(N) for N in std.psd]
    Z = [eta * np.eye(N) for N in std.psd]
    y = np.zeros(m)

    schur = [_SchurPSD(Ak, N) for Ak, N in zip(std.A_psd, std.psd)]
    lin_rows = np.flatnonzero(np.diff(std.A.indptr))
    history, log = [], []
    status = "iteration_limit"
    bnorm1, cnorm1 = 1 + normb, 1 + normc
    sigma = 0.0
    ap = ad = 0.0
    it = 0

    def dot_cone(xl, Xl, zl, Zl):
        return float(xl @ zl + sum(np.sum(a * b) for a, b in zip(Xl, Zl)))

    stall = 0
    best = (math.inf, -1, x, X, y, z, Z)
    for it in range(settings.max_iterations + 1):
        Ax = std.apply_A(x, X)
        rp = std.b - Ax
        Aty_lin, Aty_psd = std.apply_At(y)
        rd = std.c - Aty_lin - z
        Rd = [C - Ay - Zk for C, Ay, Zk in zip(std.C, Aty_psd, Z)]
        pobj = float(std.c @ x + sum(np.sum(C * Xk) for C, Xk in zip(std.C, X)))
        dobj = float(std.b @ y)
        mu = dot_cone(x, X, z, Z) / nu
        gap = abs(pobj - dobj) / (1 + abs(pobj) + abs(dobj))
        pres = np.linalg.norm(rp) / bnorm1
        dres = math.sqrt(rd @ rd + sum(np.sum(R * R) for R in Rd)) / cnorm1
        history.append(dict(iteration=it, pobj=pobj * cscale + std.offset, dobj=dobj * cscale + std.offset,
                            gap=gap, pres=pres, dres=dres, mu=mu))
        line = _fmt_line(it, pobj * cscale + std.offset, dobj * cscale + std.offset, gap, pres, dres, ap, ad, sigma)
        log.append(line)
        logger.debug(line)
        if gap <= settings.tol_gap and pres <= settings.tol_primal and dres <= settings.tol_dual:
            status = "optimal"
            break
        merit = max(gap, pres, dres)
        if merit < best[0]:
            best = (merit, it, x, X, y, z, Z)
        elif best[0] < 1e-4 and merit > 1e3 * best[0]:
            status = "numerical_failure"
            break
        # infeasibility certificates (normalised rays)
        if dobj > 0:
            ray = math.sqrt(np.sum((Aty_lin + z) ** 2) + sum(np.sum((a + b) ** 2) for a, b in zip(Aty_psd, Z)))
            if ray / dobj < 1e-8 and dobj > 1e6:
                status = "primal_infeasible"
                break
        if pobj < 0:
            if np.linalg.norm(Ax) / -pobj < 1e-8 and -pobj > 1e6:
                status = "dual_infeasible"
                break
        if it == settings.max_iterations:
            break

        try:
            sc = _Scaling(std, x, X, z, Z)
        except np.linalg.LinAlgError:
            status = "numerical_failure"
            break

        # Schur complement A H A'
        M = np.zeros((m, m))
        if lin_rows.size:
            Hd = _lin_H_matrix(std, sc)
            Al = std.A[lin_rows]
            M[np.ix_(lin_rows, lin_rows)] += (Al @ Hd @ Al.T).toarray()
        for k, S in enumerate(schur):
            M[np.ix_(S.rows, S.rows)] += S.contribution(sc.G[k], settings.chunk)
        # static regularisation, raised when the factorisation breaks down;
        # the conjugate-gradient solve below works against the exact operator
        dM = np.diag(M).copy()
        cho = None
        for boost in (1.0, 1e2, 1e4, 1e6):
            Mr = M.copy()
            Mr[np.diag_indices(m)] += boost * settings.regularization * (dM + 1e-6 * dM.max())
            try:
                cho = sla.cho_factor(Mr, lower=True, check_finite=False)
                break
            except (np.linalg.LinAlgError, sla.LinAlgError):
                continue
        if cho is None:
            status = "numerical_failure"
            break

        lam2_lin, lam2_psd = sc.lam_sq()

        def schur_apply(v):
            al, ap_ = std.apply_At(v)
            hl, hp = sc.apply_H(al, ap_)
            return std.apply_A(hl, hp)
        H_rd_lin, H_rd_psd = sc.apply_H(rd, Rd)

        def newton(rc_lin, rc_psd):
            # PSD parts are formed in the scaled space, where the iterate is
            # the diagonal matrix lambda, and mapped back through R.
            u_lin, u_psd, V_psd = sc.wt_solve(rc_lin, rc_psd, scaled=True)
            rhs = rp - std.apply_A(u_lin, u_psd) + std.apply_A(H_rd_lin, H_rd_psd)
            dy = _pcg(schur_apply, lambda v: sla.cho_solve(cho, v, check_finite=False), rhs,
                      settings.refinement_steps)
            dzl, dZ = _dz(std, rd, Rd, dy)
            hl, _ = sc.apply_H(dzl, [])
            dxl = u_lin - hl
            dZs = [R.T @ D @ R for R, D in zip(sc.R, dZ)]
            dXs = [V - D for V, D in zip(V_psd, dZs)]
            dXs = [0.5 * (D + D.T) for D in dXs]
            dZs = [0.5 * (D + D.T) for D in dZs]
            dX = [R @ D @ R.T for R, D in zip(sc.R, dXs)]
            dX = [0.5 * (D + D.T) for D in dX]
            return dxl, dX, dy, dzl, dZ, dXs, dZs

        # predictor
        rc_lin = -lam2_lin
        rc_psd = [-L for L in lam2_psd]
        dxa, dXa, dya, dza, dZa, dXsa, dZsa = newton(rc_lin, rc_psd)
        apa = min(1.0, _max_step(std, x, dxa, sc.lam_psd, dXsa))
        ada = min(1.0, _max_step(std, z, dza, sc.lam_psd, dZsa))
        mu_aff = dot_cone(x + apa * dxa, [Xk + apa * d for Xk, d in zip(X, dXa)],
                          z + ada * dza, [Zk + ada * d for Zk, d in zip(Z, dZa)]) / nu
        sigma = min(1.0, max(0.0, (mu_aff / mu) ** 3))

        # corrector
        a_lin, b_lin = sc.scaled(dxa, dza)
        a_psd, b_psd = dXsa, dZsa
        corr_lin = _circ_lin(std, a_lin, b_lin)
        rc_lin = sigma * mu * _unit_lin(std) - lam2_lin - corr_lin
        rc_psd = [sigma * mu * np.eye(N) - L - 0.5 * (A_ @ B_ + B_ @ A_)
                  for N, L, A_, B_ in zip(std.psd, lam2_psd, a_psd, b_psd)]
        dx, dX, dy, dz, dZ, dXs, dZs = newton(rc_lin, rc_psd)
        ap = min(1.0, settings.step_fraction * _max_step(std, x, dx, sc.lam_psd, dXs))
        ad = min(1.0, settings.step_fraction * _max_step(std, z, dz, sc.lam_psd, dZs))
        x = x + ap * dx
        X = [Xk + ap * d for Xk, d in zip(X, dX)]
        y = y + ad * dy
        z = z + ad * dz
        Z = [Zk + ad * d for Zk, d in zip(Z, dZ)]
        X = [0.5 * (Xk + Xk.T) for Xk in X]
        Z = [0.5 * (Zk + Zk.T) for Zk in Z]
        stall = stall + 1 if max(ap, ad) < 1e-8 else 0
        if stall >= 5:
            status = "numerical_failure"
            break

    # a failed run hands back its most accurate iterate
    final = history[-1]
    if status != "optimal" and best[1] >= 0:
        _, k, x, X, y, z, Z = best
        final = history[k]
    y_out = y / rownorm * cscale
    sol = SolverSolution(
        status=status,
        primal_objective=final["pobj"],
        dual_objective=final["dobj"],
        x=x, X=X, y=y_out, z=z * cscale, Z=[Zk * cscale for Zk in Z],
        residuals=dict(gap=final["gap"], primal=final["pres"], dual=final["dres"]),
        iterations=it, wall_time=time.perf_counter() - t0, history=history, log=log,
    )
    return sol


def _pcg(apply, precond, rhs, max_steps, rtol=1e-15):
    """Conjugate gradients on the Schur system, preconditioned by its factor."""
    x = precond(rhs)
    r = rhs - apply(x)
    stop = rtol * (1 + np.linalg.norm(rhs))
    if max_steps == 0 or np.linalg.norm(r) <= stop:
        return x
    zr = precond(r)
    p = zr
    rz = r @ zr
    best, best_norm = x, np.linalg.norm(r)
    for _ in range(max_steps):
        Ap = apply(p)
        pAp = p @ Ap
        if not pAp > 0:
            break
        a = rz / pAp
        x = x + a * p
        r = r - a * Ap
        rn = np.linalg.norm(r)
        if rn < best_norm:
            best, best_norm = x, rn
        if rn <= stop:
            break
        zr = precond(r)
        rz_new = r @ zr
        p = zr + (rz_new / rz) * p
        rz = rz_new
    return best


def _dz(std, rd, Rd, dy):
    Aty_lin, Aty_psd = std.apply_At(dy)
    return rd - Aty_lin, [R - A_ for R, A_ in zip(Rd, Aty_psd)]


def _lin_H_matrix(std: StandardForm, sc: _Scaling) -> sp.csr_matrix:
    blocks = [sp.diags(sc.d**2)] if std.lp else []
    for W in sc.soc_W:
        blocks.append(sp.csr_matrix(W @ W))
    return sp.block_diag(blocks, format="csr") if blocks else sp.csr_matrix((0, 0))


def _circ_lin(std, a, b):
    out = np.empty_like(a)
    lp = std.lp
    out[:lp] = a[:lp] * b[:lp]
    off = lp
    for k in std.soc:
        out[off:off + k] = _soc_circ(a[off:off + k], b[off:off + k])
        off += k
    return out


def _unit_lin(std):
    e = np.zeros(std.n_lin)
    e[:std.lp] = 1.0
    off = std.lp
    for k in std.soc:
        e[off] = 1.0
        off += k
    return e


# ---------------------------------------------------------------------------
# model-level entry points
# ---------------------------------------------------------------------------

def solve(program: ConicProgram, settings: SolverSettings = SolverSettings()) -> SolverSolution:
    """Lower ``program`` to standard form, solve it, and map the result back."""
    low = Lowering(program, settings.eliminate_free, settings.remove_duplicates)
    sol = solve_standard(low.std, settings)
    sol.scalars, sol.W = low.recover(sol.x, sol.X[0])
    return sol


_BACKENDS: dict = {}


def register_backend(name: str, fn) -> None:
    """Register ``fn(program, settings) -> SolverSolution`` under ``name``."""
    _BACKENDS[name] = fn


def _load_builtin_backends() -> None:
    from . import sdpa  # noqa: F401  (registers the SDPA-fed external backend)


def registered_backends() -> list[str]:
    _load_builtin_backends()
    return sorted(["internal", *_BACKENDS])


def solve_via_backend(program: ConicProgram, backend: str = "internal",
                      settings: SolverSettings = SolverSettings()) -> SolverSolution:
    if backend == "internal":
        return solve(program, settings)
    _load_builtin_backends()
    if backend not in _BACKENDS:
        raise KeyError(f"unknown backend {backend!r}; registered: {', '.join(registered_backends())}")
    return _BACKENDS[backend](program, settings)


def compare_backends(program: ConicProgram, backends=("internal", "clarabel"), rtol: float = 1e-5,
                     settings: SolverSettings = SolverSettings()) -> tuple[dict[str, float], bool]:
    """Objectives per backend and whether they agree within ``rtol`` (relative)."""
    objs = {b: solve_via_backend(program, b, settings).primal_objective for b in backends}
    vals = list(objs.values())
    ref = max(1.0, *(abs(v) for v in vals))
    return objs, (max(vals) - min(vals)) <= rtol * ref
