"""Rank test, voltage and tuning-ratio recovery, and OPF result packaging."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .formulation import ConicProgram, objective_value
from .oracle import ResidualReport, evaluate_acopf_point, evaluate_augmented_point
from .transform import AugmentedNetwork

RANK_THRESHOLD = 1e-5
K_TOL = 1e-6


class RankError(RuntimeError):
    """Voltage recovery was asked for on a matrix that is not rank one."""

    def __init__(self, message: str, report: "RankReport"):
        super().__init__(message)
        self.report = report


class SolverInconsistency(ValueError):
    """The relaxed and penalized runs contradict the cost ordering."""


@dataclass(frozen=True)
class RankReport:
    eigenvalues: tuple[float, ...]  # descending, top five
    ratio: float  # lambda_2 / lambda_1 (inf when degenerate)
    declared_rank: int
    threshold: float
    degenerate: bool = False  # lambda_1 <= 0

    @property
    def is_rank_one(self) -> bool:
        return self.declared_rank == 1


def numeric_rank(W: np.ndarray, threshold: float = RANK_THRESHOLD) -> RankReport:
    W = np.asarray(W)
    H = 0.5 * (W + W.conj().T)
    ev = np.linalg.eigvalsh(H)[::-1]
    top = tuple(float(v) for v in ev[:5])
    lam1 = float(ev[0]) if ev.size else 0.0
    if not lam1 > 0:
        return RankReport(top, math.inf, 0, threshold, degenerate=True)
    ratio = float(ev[1] / lam1) if ev.size > 1 else 0.0
    rank = int(np.sum(ev > threshold * lam1))
    return RankReport(top, ratio, rank, threshold)


def leading_vector(W: np.ndarray, slack: int) -> np.ndarray:
    """``sqrt(lambda_1) * u_1`` rotated so that entry ``slack`` is real positive."""
    H = 0.5 * (np.asarray(W) + np.asarray(W).conj().T)
    ev, U = np.linalg.eigh(H)
    v = math.sqrt(max(ev[-1], 0.0)) * U[:, -1]
    ref = v[slack]
    if abs(ref) > 0:
        v = v * (abs(ref) / ref)
    return v


def recover_voltages(W: np.ndarray, n_original: int, slack: int, threshold: float = RANK_THRESHOLD,
                     *, full: bool = False) -> np.ndarray:
    """Bus voltages from a rank-one ``W``, slack angle fixed at zero.

    Set ``full`` to also return the secondary-bus entries after the originals.
    """
    report = numeric_rank(W, threshold)
    if not report.is_rank_one:
        raise RankError(f"W has declared rank {report.declared_rank} "
                        f"(lambda2/lambda1 = {report.ratio:.3e}); no unique voltage profile", report)
    v = leading_vector(W, slack)
    return v if full else v[:n_original]


@dataclass(frozen=True)
class TapRecovery:
    k: tuple[float, ...]
    flags: tuple[str | None, ...]  # None, "tap-correlation", "out-of-range"

    @property
    def clean(self) -> bool:
        return all(f is None for f in self.flags)


def extract_k(W: np.ndarray, aug: AugmentedNetwork, tol: float = K_TOL) -> TapRecovery:
    """Tuning ratio per flex line from the diagonal of ``W``.

    The i-side ratio is returned.  Values within ``tol`` outside the bounds
    are clamped; larger overshoots and i/j disagreement are flagged.
    """
    d = np.real(np.diag(W))
    ks, flags = [], []
    for fl, (i, j, ij, ji) in zip(aug.case.flex_lines, aug.flex_nodes):
        if not (d[i] > 0 and d[j] > 0):
            raise ValueError(f"flex line {fl.label}: zero voltage at an endpoint")
        k_i, k_j = d[ij] / d[i], d[ji] / d[j]
        flag = None
        if abs(k_i - k_j) > tol * max(abs(k_i), 1.0):
            flag = "tap-correlation"
        if fl.k_min - tol <= k_i <= fl.k_max + tol:
            k_i = min(max(k_i, fl.k_min), fl.k_max)
        elif flag is None:
            flag = "out-of-range"
        ks.append(float(k_i))
        flags.append(flag)
    return TapRecovery(tuple(ks), tuple(flags))


def gap_bound(cost_sdp: float, cost_penalized: float) -> float:
    """Upper bound on ``cost_penalized / cost_opt`` from a lower-bounding relaxed cost."""
    if not cost_sdp > 0:
        raise ValueError("the relaxed cost must be positive")
    ratio = cost_penalized / cost_sdp
    if ratio < 1 - 1e-6:
        raise SolverInconsistency(f"penalized cost {cost_penalized:.6g} is below the relaxed "
                                  f"bound {cost_sdp:.6g}")
    return max(ratio, 1.0)


@dataclass(frozen=True)
class OPFResult:
    status: str  # "exact", "inexact", "projected", "solver:<status>"
    solver_status: str
    objective: float  # $/h including the penalty
    cost: float  # generation cost, $/h
    penalty: float
    rank: RankReport
    P_G: np.ndarray  # p.u.
    Q_G: np.ndarray
    k: TapRecovery
    V: np.ndarray | None = None  # original buses; None unless rank one or projected
    V_aug: np.ndarray | None = None
    residual_augmented: ResidualReport | None = None
    residual_original: ResidualReport | None = None
    gap_ratio_bound: float | None = None
    certified: bool = False
    wq: float = 0.0
    epsilon: float = 0.0

    @property
    def exact(self) -> bool:
        return self.certified and self.rank.is_rank_one


def build_result(program: ConicProgram, solution, *, threshold: float = RANK_THRESHOLD,
                 project_rank1: bool = False, both_ends: bool = False) -> OPFResult:
    """Package a solved program: rank test, recovery and residual evaluation.

    With ``project_rank1`` an inexact ``W`` is replaced by its leading rank-one
    term; the resulting point is reported but never certified.
    """
    aug = program.network
    case = aug.case
    W = solution.W
    x = solution.scalars
    rank = numeric_rank(W, threshold)
    ov = objective_value(program, x)
    P_G = np.array([x[p] for p in program.gen_P])
    Q_G = np.array([x[q] for q in program.gen_Q])
    taps = extract_k(W, aug) if case.flex_lines else TapRecovery((), ())
    common = dict(solver_status=solution.status, objective=ov.total, cost=ov.cost, penalty=ov.penalty,
                  rank=rank, P_G=P_G, Q_G=Q_G, k=taps, wq=program.wq, epsilon=aug.epsilon)
    if solution.status != "optimal" and not project_rank1:
        return OPFResult(status=f"solver:{solution.status}", **common)
    if not rank.is_rank_one and not project_rank1:
        return OPFResult(status="inexact", **common)
    projected = not rank.is_rank_one or solution.status != "optimal"
    V_aug = leading_vector(W, case.slack_index)
    V = V_aug[:case.n_bus]
    res_aug = evaluate_augmented_point(case, V_aug, P_G, Q_G, epsilon=aug.epsilon, both_ends=both_ends)
    res_orig = evaluate_acopf_point(case, V, P_G, Q_G, taps.k, both_ends=both_ends)
    return OPFResult(status="projected" if projected else "exact", V=V, V_aug=V_aug,
                     residual_augmented=res_aug, residual_original=res_orig,
                     certified=not projected, **common)
