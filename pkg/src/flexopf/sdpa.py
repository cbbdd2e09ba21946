"""SDPA sparse-format export/import and an external-solver backend.

A standard form ``min <C,X> s.t. <A_r,X> = b_r, X in K`` is written as the
SDPA dual problem ``max F0.Y s.t. F_r.Y = c_r, Y psd`` with ``F0 = -C``,
``F_r = A_r`` and ``c_r = b_r``.  Orthant variables form one diagonal block
and each 3-dimensional second-order cone becomes a 2x2 PSD block through
``(w0, w1, w2) <-> [[w0 + w2, w1], [w1, w0 - w2]]``.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .conic import Lowering, SolverSettings, SolverSolution, StandardForm, register_backend


class BackendUnavailable(RuntimeError):
    pass


@dataclass
class SdpaProblem:
    block_sizes: tuple[int, ...]  # negative = diagonal block
    c: np.ndarray  # length m
    # entries[(mat, blk)] = list of (i, j, value), 1-based, i <= j
    entries: dict[tuple[int, int], list[tuple[int, int, float]]]

    @property
    def m(self) -> int:
        return self.c.size


def _blocks(std: StandardForm):
    if any(k != 3 for k in std.soc):
        raise NotImplementedError("SDPA export supports 3-dimensional second-order cones only")
    sizes = [*std.psd, *([2] * len(std.soc))]
    if std.lp:
        sizes.append(-std.lp)
    return tuple(sizes)


def _lin_entries(vec: np.ndarray, std: StandardForm, sign: float):
    """(block, i, j, value) entries representing ``sign * vec . x_lin``."""
    out = []
    nb_psd = len(std.psd)
    lp_block = nb_psd + len(std.soc) + 1
    for p in np.flatnonzero(vec[:std.lp]):
        out.append((lp_block, p + 1, p + 1, sign * vec[p]))
    off = std.lp
    for s in range(len(std.soc)):
        a0, a1, a2 = vec[off:off + 3]
        blk = nb_psd + s + 1
        for i, j, v in ((1, 1, (a0 + a2) / 2), (2, 2, (a0 - a2) / 2), (1, 2, a1 / 2)):
            if v != 0:
                out.append((blk, i, j, sign * v))
        off += 3
    return out


def _psd_entries(M: np.ndarray, blk: int, sign: float):
    F = 0.5 * (M + M.T)
    ii, jj = np.nonzero(np.triu(F))
    return [(blk, i + 1, j + 1, sign * F[i, j]) for i, j in zip(ii, jj)]


def to_sdpa(std: StandardForm) -> SdpaProblem:
    sizes = _blocks(std)
    entries: dict = {}

    def push(mat, items):
        for blk, i, j, v in items:
            entries.setdefault((mat, blk), []).append((i, j, float(v)))

    push(0, _lin_entries(std.c, std, -1.0))
    for k, C in enumerate(std.C):
        push(0, _psd_entries(C, k + 1, -1.0))
    A = std.A.tocsr()
    for r in range(std.m):
        row = np.zeros(std.n_lin)
        lo, hi = A.indptr[r], A.indptr[r + 1]
        row[A.indices[lo:hi]] = A.data[lo:hi]
        push(r + 1, _lin_entries(row, std, 1.0))
        for k, (Ak, N) in enumerate(zip(std.A_psd, std.psd)):
            sub = Ak[r]
            if sub.nnz == 0:
                continue
            p, q = np.divmod(sub.indices, N)
            F = sp.coo_matrix((sub.data, (p, q)), shape=(N, N)).toarray()
            push(r + 1, _psd_entries(F, k + 1, 1.0))
    return SdpaProblem(sizes, std.b.copy(), entries)


def write_sdpa(std: StandardForm, comment: str = "flexopf standard form") -> str:
    prob = to_sdpa(std)
    lines = [f'"{comment}', str(prob.m), str(len(prob.block_sizes)),
             " ".join(str(s) for s in prob.block_sizes),
             " ".join(repr(float(v)) for v in prob.c)]
    for (mat, blk) in sorted(prob.entries):
        for i, j, v in prob.entries[(mat, blk)]:
            if v != 0:
                lines.append(f"{mat} {blk} {i} {j} {v!r}")
    return "\n".join(lines) + "\n"


def read_sdpa(text: str) -> SdpaProblem:
    """Parse SDPA sparse text (comments start with ``"`` or ``*``)."""
    body = [ln for ln in text.splitlines() if ln.strip() and ln.lstrip()[0] not in '"*']
    tokens = [t for ln in body for t in ln.replace(",", " ").replace("{", " ").replace("}", " ")
              .replace("(", " ").replace(")", " ").split()]
    pos = 0
    m = int(tokens[pos]); pos += 1
    nb = int(tokens[pos]); pos += 1
    sizes = tuple(int(float(t)) for t in tokens[pos:pos + nb]); pos += nb
    c = np.array([float(t) for t in tokens[pos:pos + m]]); pos += m
    rest = tokens[pos:]
    if len(rest) % 5:
        raise ValueError("malformed SDPA entry list")
    entries: dict = {}
    for t in range(0, len(rest), 5):
        mat, blk, i, j = (int(x) for x in rest[t:t + 4])
        v = float(rest[t + 4])
        if i > j:
            i, j = j, i
        entries.setdefault((mat, blk), []).append((i, j, v))
    return SdpaProblem(sizes, c, entries)


# ---------------------------------------------------------------------------
# external backend: Clarabel fed from the SDPA data
# ---------------------------------------------------------------------------

def _svec_index(n: int):
    """Position of (i, j), i <= j, in column-major upper-triangle order."""
    return lambda i, j: j * (j + 1) // 2 + i


def solve_sdpa_clarabel(prob: SdpaProblem, settings: SolverSettings = SolverSettings()):
    """Solve an SDPA problem with Clarabel; returns (status, objective, Y blocks)."""
    try:
        import clarabel
    except ImportError as exc:
        raise BackendUnavailable("the clarabel package is not installed") from exc
    offsets, off = [], 0
    for s in prob.block_sizes:
        offsets.append(off)
        off += abs(s) if s < 0 else s * (s + 1) // 2
    nvar = off
    sq2 = math.sqrt(2.0)

    def coeff_vector(mat):
        vec = np.zeros(nvar)
        for b, s in enumerate(prob.block_sizes, start=1):
            for i, j, v in prob.entries.get((mat, b), ()):
                if s < 0:
                    vec[offsets[b - 1] + i - 1] += v
                else:
                    pos = offsets[b - 1] + _svec_index(s)(i - 1, j - 1)
                    vec[pos] += v if i == j else sq2 * v
        return vec

    q = -coeff_vector(0)
    Aeq = sp.csr_matrix(np.array([coeff_vector(r) for r in range(1, prob.m + 1)]))
    A = sp.vstack([Aeq, -sp.identity(nvar)]).tocsc()
    b = np.concatenate([prob.c, np.zeros(nvar)])
    cones = [clarabel.ZeroConeT(prob.m)]
    for s in prob.block_sizes:
        cones.append(clarabel.NonnegativeConeT(-s) if s < 0 else clarabel.PSDTriangleConeT(s))
    opts = clarabel.DefaultSettings()
    opts.verbose = False
    opts.max_iter = settings.max_iterations
    opts.tol_gap_abs = opts.tol_gap_rel = settings.tol_gap
    opts.tol_feas = min(settings.tol_primal, settings.tol_dual)
    solver = clarabel.DefaultSolver(sp.csc_matrix((nvar, nvar)), q, A, b, cones, opts)
    res = solver.solve()
    x = np.asarray(res.x)
    Y = []
    for b_i, s in enumerate(prob.block_sizes):
        o = offsets[b_i]
        if s < 0:
            Y.append(x[o:o - s].copy())
            continue
        M = np.zeros((s, s))
        idx = _svec_index(s)
        for j in range(s):
            for i in range(j + 1):
                v = x[o + idx(i, j)]
                M[i, j] = M[j, i] = v if i == j else v / sq2
        Y.append(M)
    return str(res.status), -float(res.obj_val), Y


_STATUS = {"Solved": "optimal", "AlmostSolved": "optimal", "PrimalInfeasible": "primal_infeasible",
           "DualInfeasible": "dual_infeasible", "MaxIterations": "iteration_limit"}


def clarabel_backend(program, settings: SolverSettings = SolverSettings()) -> SolverSolution:
    """Round-trip the program through SDPA text and solve it with Clarabel."""
    t0 = time.perf_counter()
    low = Lowering(program, settings.eliminate_free, settings.remove_duplicates)
    std = low.std
    prob = read_sdpa(write_sdpa(std))
    status, dual_obj, Y = solve_sdpa_clarabel(prob, settings)
    # undo the block mapping
    X = [Y[k] for k in range(len(std.psd))]
    x = np.zeros(std.n_lin)
    if std.lp:
        x[:std.lp] = Y[-1]
    off = std.lp
    for s in range(len(std.soc)):
        M = Y[len(std.psd) + s]
        x[off:off + 3] = [(M[0, 0] + M[1, 1]) / 2, M[0, 1], (M[0, 0] - M[1, 1]) / 2]
        off += 3
    pobj = float(std.c @ x + sum(np.sum(C * Xk) for C, Xk in zip(std.C, X))) + std.offset
    rp = std.b - std.apply_A(x, X)
    sol = SolverSolution(
        status=_STATUS.get(status, "numerical_failure"),
        primal_objective=pobj, dual_objective=-dual_obj + std.offset,
        x=x, X=X, y=np.empty(0), z=np.empty(0), Z=[],
        residuals=dict(primal=float(np.linalg.norm(rp) / (1 + np.linalg.norm(std.b)))),
        iterations=0, wall_time=time.perf_counter() - t0, backend="clarabel",
    )
    sol.scalars, sol.W = low.recover(x, X[0])
    return sol


register_backend("clarabel", clarabel_backend)
