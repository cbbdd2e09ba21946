"""Result files and human-readable reports.

Result files are flat ``key = value`` text, one entry per line, written in a
fixed order with ``repr`` floats so identical runs give identical bytes.
The keys are listed in ``docs/result-file.md``.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

from .network import NetworkCase, write_matpower_case
from .recovery import OPFResult

FORMAT = "flexopf-result/1"


def case_digest(case: NetworkCase, epsilon: float) -> str:
    """SHA-256 over the prepared case, its flex lines and epsilon."""
    h = hashlib.sha256()
    h.update(write_matpower_case(case).encode())
    for fl in case.flex_lines:
        h.update(f"flex {fl.branch_index} {fl.b_rated!r} {fl.g_rated!r} {fl.k_min!r} {fl.k_max!r}\n".encode())
    h.update(f"epsilon {epsilon!r}\n".encode())
    return h.hexdigest()


def _num(v) -> str:
    if v is None:
        return "none"
    v = float(v)
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(v)


def result_entries(result: OPFResult, case: NetworkCase, *, run: str, mode: str, digest: str,
                   extra: dict | None = None) -> list[tuple[str, str]]:
    e: list[tuple[str, str]] = [
        ("format", FORMAT), ("case", case.name), ("case_digest", digest),
        ("run", run), ("mode", mode),
    ]
    for key, val in (extra or {}).items():
        e.append((key, str(val)))
    e += [
        ("epsilon", _num(result.epsilon)), ("wq", _num(result.wq)),
        ("status", result.status), ("certified", str(result.certified).lower()),
        ("solver_status", result.solver_status),
        ("objective", _num(result.objective)), ("cost", _num(result.cost)),
        ("penalty", _num(result.penalty)), ("gap_ratio_bound", _num(result.gap_ratio_bound)),
        ("rank.declared", str(result.rank.declared_rank)), ("rank.ratio", _num(result.rank.ratio)),
        ("rank.threshold", _num(result.rank.threshold)),
    ]
    e += [(f"rank.eig.{i + 1}", _num(v)) for i, v in enumerate(result.rank.eigenvalues)]
    for tag, rep in (("augmented", result.residual_augmented), ("original", result.residual_original)):
        if rep is None:
            continue
        name, viol = rep.worst_constraint
        e += [(f"residual.{tag}.max", _num(rep.max_mismatch)),
              (f"residual.{tag}.mean", _num(rep.mean_mismatch)),
              (f"residual.{tag}.worst_bus", str(rep.worst_bus)),
              (f"residual.{tag}.worst_constraint", str(name)),
              (f"residual.{tag}.worst_violation", _num(viol))]
    e += [("n_bus", str(case.n_bus)), ("n_gen", str(len(case.generators))),
          ("n_flex", str(len(result.k.k)))]
    if result.V is not None:
        for bus, v in zip(case.buses, result.V):
            e += [(f"V.{bus.id}.re", _num(v.real)), (f"V.{bus.id}.im", _num(v.imag))]
    for g, (p, q) in enumerate(zip(result.P_G, result.Q_G)):
        e += [(f"P_G.{g}", _num(p)), (f"Q_G.{g}", _num(q))]
    for fl, k, flag in zip(case.flex_lines, result.k.k, result.k.flags):
        e.append((f"k.{fl.label}", _num(k)))
        if flag:
            e.append((f"k.{fl.label}.flag", flag))
    return e


def format_entries(entries: list[tuple[str, str]]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in entries)


def parse_result_file(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if " = " not in line:
            raise ValueError(f"result file line {lineno}: expected 'key = value'")
        k, v = line.split(" = ", 1)
        out[k.strip()] = v.strip()
    if out.get("format") != FORMAT:
        raise ValueError(f"not a {FORMAT} result file")
    return out


def point_from_result(data: dict[str, str], case: NetworkCase):
    """(V, P_G, Q_G, k) arrays read back from a parsed result file."""
    try:
        V = np.array([complex(float(data[f"V.{b.id}.re"]), float(data[f"V.{b.id}.im"])) for b in case.buses])
    except KeyError:
        raise ValueError("result file carries no voltage profile (inexact run)") from None
    ng = len(case.generators)
    P = np.array([float(data[f"P_G.{g}"]) for g in range(ng)])
    Q = np.array([float(data[f"Q_G.{g}"]) for g in range(ng)])
    k = np.array([float(data[f"k.{fl.label}"]) for fl in case.flex_lines])
    return V, P, Q, k


# ---------------------------------------------------------------------------
# tables
# ---------------------------------------------------------------------------

def _table(header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(h), *(len(r[c]) for r in rows)) if rows else len(h) for c, h in enumerate(header)]
    fmt = "  ".join("{:>%d}" % w for w in widths)
    sep = "  ".join("-" * w for w in widths)
    return "\n".join([fmt.format(*header), sep, *(fmt.format(*r) for r in rows)]) + "\n"


def _dsv(header: list[str], rows: list[list[str]]) -> str:
    return "\n".join("\t".join(r) for r in [header, *rows]) + "\n"


def tuning_table(case: NetworkCase, result: OPFResult) -> tuple[str, str]:
    """Per flex line: rated susceptance magnitude and optimal ratio (text, DSV)."""
    header = ["line", "-b_rated (p.u.)", "k"]
    rows = []
    for fl, k, flag in zip(case.flex_lines, result.k.k, result.k.flags):
        rows.append([f"({fl.from_bus},{fl.to_bus})" + ("" if fl.circuit == 1 else f"#{fl.circuit}"),
                     f"{-fl.b_rated:.4f}", f"{k:.4f}" + (f" [{flag}]" if flag else "")])
    return _table(header, rows), _dsv(header, rows)


def comparison_table(limits_mw: list[float], flexible: list[float], conventional: list[float]) -> tuple[str, str]:
    """Generation cost with and without flexible lines, one column per flow limit."""
    header = ["$/h"] + [f"Pmax_flow={lim:g}MW" for lim in limits_mw]
    rows = [["Flexible"] + [f"{v:.2f}" for v in flexible],
            ["Conventional"] + [f"{v:.2f}" for v in conventional],
            ["Saved cost"] + [f"{c - f:.2f}" for f, c in zip(flexible, conventional)]]
    return _table(header, rows), _dsv(header, rows)


def run_summary(label: str, result: OPFResult) -> str:
    r = result.rank
    lines = [f"[{label}] status={result.status} solver={result.solver_status} "
             f"cost={result.cost:.4f} $/h penalty={result.penalty:.4f} objective={result.objective:.4f}",
             f"  rank: declared {r.declared_rank}, lambda2/lambda1 = {r.ratio:.3e} "
             f"(threshold {r.threshold:g}); top eigenvalues " + ", ".join(f"{v:.4e}" for v in r.eigenvalues)]
    if result.gap_ratio_bound is not None:
        lines.append(f"  gap ratio bound: {result.gap_ratio_bound:.6f}")
    for tag, rep in (("augmented network", result.residual_augmented),
                     ("original network", result.residual_original)):
        if rep is not None:
            name, viol = rep.worst_constraint
            lines.append(f"  residual on {tag}: max {rep.max_mismatch:.3e} p.u. at bus {rep.worst_bus}, "
                         f"mean {rep.mean_mismatch:.3e}; worst limit {name} violated by {viol:.3e}")
    if result.status == "projected":
        lines.append("  NOTE: rank-one projection of an inexact relaxation; not certified")
    return "\n".join(lines) + "\n"
